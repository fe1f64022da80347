//! Finite-difference checks for every recorded op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradmod::Task;
use crate::params::ParamStore;
use crate::signal::ChunkLayout;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
fn project(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = if shape.is_empty() {
        Tensor::scalar(1.3)
    } else {
        rand_tensor(rng, &shape)
    };
    let w = tape.constant(w).unwrap();
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

/// Compares tape gradients against central differences for every input.
fn check<F>(inputs: Vec<Tensor>, tol: f64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let l = project(&mut tape, out, &mut rng);
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let l = project(&mut tape, out, &mut rng);
    let analytic = tape.grads(l, &vars).unwrap();

    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.clone();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            let fd = (up - down) / (2.0 * h);
            let an = analytic[i].data()[j];
            let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            assert!(err < tol, "input {i} elem {j}: analytic {an} vs numeric {fd}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_and_linear() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 2])], 1e-7, |t, v| t.matmul(v[0], v[1]));
    check(
        vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[5, 4]), rand_tensor(&mut r, &[5])],
        1e-7,
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    );
    check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[2, 4])], 1e-7, |t, v| t.linear(v[0], v[1], None));
}

#[test]
fn convolutions() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[1, 13]), rand_tensor(&mut r, &[3, 1, 4])], 1e-7, |t, v| t.conv1d(v[0], v[1], 2));
    check(vec![rand_tensor(&mut r, &[2, 9]), rand_tensor(&mut r, &[3, 2, 3])], 1e-7, |t, v| t.conv1d(v[0], v[1], 3));
    check(vec![rand_tensor(&mut r, &[3, 5]), rand_tensor(&mut r, &[3, 1, 4])], 1e-7, |t, v| {
        t.conv_transpose1d(v[0], v[1], 2)
    });
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 11]);
    let w = rand_tensor(&mut r, &[3, 2, 4]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()).unwrap(), tape.constant(w.clone()).unwrap());
    let y = tape.conv1d(xv, wv, 3).unwrap();
    let frames = (11 - 4) / 3 + 1;
    assert_eq!(tape.shape(y), &[3, frames]);
    for o in 0..3 {
        for t in 0..frames {
            let mut s = 0.0;
            for c in 0..2 {
                for k in 0..4 {
                    s += w.data()[(o * 2 + c) * 4 + k] * x.data()[c * 11 + t * 3 + k];
                }
            }
            assert!((tape.value(y).data()[o * frames + t] - s).abs() < 1e-12);
        }
    }

    // transpose conv scatters each input frame into an output window
    let xt = rand_tensor(&mut r, &[2, 4]);
    let wt = rand_tensor(&mut r, &[2, 1, 3]);
    let (a, b) = (tape.constant(xt.clone()).unwrap(), tape.constant(wt.clone()).unwrap());
    let y = tape.conv_transpose1d(a, b, 2).unwrap();
    let len = (4 - 1) * 2 + 3;
    let mut want = vec![0.0; len];
    for c in 0..2 {
        for t in 0..4 {
            for k in 0..3 {
                want[t * 2 + k] += xt.data()[c * 4 + t] * wt.data()[c * 3 + k];
            }
        }
    }
    for (g, w) in tape.value(y).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn pointwise() {
    let mut r = rng();
    // keep values away from the relu kink
    let away = |t: Tensor| t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check(vec![away(rand_tensor(&mut r, &[2, 5]))], 1e-7, |t, v| t.relu(v[0]));
    check(vec![away(rand_tensor(&mut r, &[2, 5])), Tensor::full(vec![1], 0.25)], 1e-7, |t, v| t.prelu(v[0], v[1]));
    check(vec![away(rand_tensor(&mut r, &[2, 5])), rand_tensor(&mut r, &[5])], 1e-7, |t, v| t.prelu(v[0], v[1]));
    check(vec![rand_tensor(&mut r, &[7])], 1e-7, |t, v| t.sigmoid(v[0]));
    check(vec![rand_tensor(&mut r, &[7])], 1e-7, |t, v| t.tanh(v[0]));
    check(vec![rand_tensor(&mut r, &[7])], 1e-7, |t, v| t.square(v[0]));
    check(vec![rand_tensor(&mut r, &[7])], 1e-7, |t, v| t.scale(v[0], -2.5));
}

#[test]
fn layer_norm() {
    let mut r = rng();
    check(
        vec![rand_tensor(&mut r, &[3, 2, 6]), rand_tensor(&mut r, &[6]), rand_tensor(&mut r, &[6])],
        1e-6,
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut r = rng();
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut r, &[4, 8])).unwrap();
    let g = tape.constant(Tensor::ones(vec![8])).unwrap();
    let b = tape.constant(Tensor::zeros(vec![8])).unwrap();
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let m = row.iter().sum::<f64>() / 8.0;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn broadcasting_binary_ops() {
    let mut r = rng();
    for op in 0..3 {
        let f = move |t: &mut Tape, v: &[Var]| match op {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            _ => t.mul(v[0], v[1]),
        };
        check(vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[2, 3, 4])], 1e-7, f);
        check(vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[3, 4])], 1e-7, f);
        check(vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[4])], 1e-7, f);
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(vec![2])).unwrap();
    assert!(tape.add(a, b).is_err());
}

#[test]
fn reductions_and_layout() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[3, 4])], 1e-7, |t, v| t.sum(v[0]));
    check(vec![rand_tensor(&mut r, &[3, 4])], 1e-7, |t, v| t.mean(v[0]));
    check(vec![rand_tensor(&mut r, &[3, 4])], 1e-7, |t, v| t.transpose(v[0]));
    check(vec![rand_tensor(&mut r, &[3, 4])], 1e-7, |t, v| t.reshape(v[0], &[2, 6]));
    check(vec![rand_tensor(&mut r, &[2, 3, 4])], 1e-7, |t, v| t.swap_leading(v[0]));
    check(vec![rand_tensor(&mut r, &[3, 2, 4])], 1e-7, |t, v| t.select(v[0], 1));
    check(vec![rand_tensor(&mut r, &[2, 3, 2]), rand_tensor(&mut r, &[2, 3, 5])], 1e-7, |t, v| {
        t.concat_last(v[0], v[1])
    });
    check(vec![rand_tensor(&mut r, &[9])], 1e-7, |t, v| t.fit_len(v[0], 6));
    check(vec![rand_tensor(&mut r, &[9])], 1e-7, |t, v| t.fit_len(v[0], 12));
}

#[test]
fn swap_leading_moves_axes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3, 1], (0..6).map(f64::from).collect()).unwrap()).unwrap();
    let y = tape.swap_leading(x).unwrap();
    assert_eq!(tape.shape(y), &[3, 2, 1]);
    assert_eq!(tape.value(y).data(), &[0., 3., 1., 4., 2., 5.]);
}

#[test]
fn chunk_and_overlap_add() {
    let mut r = rng();
    let layout = ChunkLayout::new(11, 4).unwrap();
    check(vec![rand_tensor(&mut r, &[11, 3])], 1e-7, move |t, v| t.chunk(v[0], layout));
    check(vec![rand_tensor(&mut r, &[layout.chunks, 4, 3])], 1e-7, move |t, v| t.overlap_add(v[0], layout));
}

#[test]
fn gru_directions() {
    let mut r = rng();
    let (b, l, i, h) = (2, 5, 3, 4);
    let inputs = || {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        vec![
            rand_tensor(&mut r, &[b, l, i]),
            rand_tensor(&mut r, &[3 * h, i]),
            rand_tensor(&mut r, &[3 * h, h]),
            rand_tensor(&mut r, &[3 * h]),
            rand_tensor(&mut r, &[3 * h]),
        ]
    };
    for reverse in [false, true] {
        check(inputs(), 1e-6, move |t, v| {
            let p = GruParams { w_ih: v[1], w_hh: v[2], b_ih: v[3], b_hh: v[4] };
            t.gru(v[0], p, reverse)
        });
    }
    let _ = rand_tensor(&mut r, &[1]);
}

/// Reference single-sequence GRU written directly from the gate equations.
fn naive_gru(x: &[Vec<f64>], w_ih: &Tensor, w_hh: &Tensor, b_ih: &Tensor, b_hh: &Tensor) -> Vec<Vec<f64>> {
    let h = w_hh.shape()[1];
    let i = w_ih.shape()[1];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let row = |w: &Tensor, k: usize, v: &[f64], n: usize| (0..n).map(|c| w.data()[k * n + c] * v[c]).sum::<f64>();
    let mut state = vec![0.0; h];
    let mut out = Vec::new();
    for xt in x {
        let mut next = vec![0.0; h];
        for j in 0..h {
            let r = sig(row(w_ih, j, xt, i) + b_ih.data()[j] + row(w_hh, j, &state, h) + b_hh.data()[j]);
            let z = sig(row(w_ih, h + j, xt, i) + b_ih.data()[h + j] + row(w_hh, h + j, &state, h) + b_hh.data()[h + j]);
            let n = (row(w_ih, 2 * h + j, xt, i)
                + b_ih.data()[2 * h + j]
                + r * (row(w_hh, 2 * h + j, &state, h) + b_hh.data()[2 * h + j]))
                .tanh();
            next[j] = (1.0 - z) * n + z * state[j];
        }
        state = next;
        out.push(state.clone());
    }
    out
}

#[test]
fn gru_matches_gate_equations() {
    let mut r = rng();
    let (l, i, h) = (6, 2, 3);
    let x = rand_tensor(&mut r, &[1, l, i]);
    let w_ih = rand_tensor(&mut r, &[3 * h, i]);
    let w_hh = rand_tensor(&mut r, &[3 * h, h]);
    let b_ih = rand_tensor(&mut r, &[3 * h]);
    let b_hh = rand_tensor(&mut r, &[3 * h]);
    let seq: Vec<Vec<f64>> = x.data().chunks(i).map(|c| c.to_vec()).collect();
    let fwd = naive_gru(&seq, &w_ih, &w_hh, &b_ih, &b_hh);
    let mut rev_seq = seq.clone();
    rev_seq.reverse();
    let mut bwd = naive_gru(&rev_seq, &w_ih, &w_hh, &b_ih, &b_hh);
    bwd.reverse();

    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let p = GruParams {
        w_ih: tape.constant(w_ih).unwrap(),
        w_hh: tape.constant(w_hh).unwrap(),
        b_ih: tape.constant(b_ih).unwrap(),
        b_hh: tape.constant(b_hh).unwrap(),
    };
    for (reverse, want) in [(false, fwd), (true, bwd)] {
        let y = tape.gru(xv, p, reverse).unwrap();
        for (t, w) in want.iter().enumerate() {
            for j in 0..h {
                assert!((tape.value(y).data()[t * h + j] - w[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn si_snr_gradient() {
    let mut r = rng();
    let reference = rand_tensor(&mut r, &[16]);
    let reff = reference.clone();
    check(vec![rand_tensor(&mut r, &[16])], 1e-6, move |t, v| t.si_snr(v[0], &reff));
}

#[test]
fn shared_subexpressions_accumulate() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::from_vec(vec![1.5, -2.0])).unwrap();
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let l = tape.sum(z).unwrap();
    let g = tape.grads(l, &[x]).unwrap();
    assert_eq!(g[0].data(), &[4.0, -3.0]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    assert!(matches!(tape.constant(Tensor::from_vec(vec![f64::NAN])), Err(Error::NonFinite(_))));
    let x = tape.constant(Tensor::from_vec(vec![1e200])).unwrap();
    assert!(matches!(tape.square(x), Err(Error::NonFinite(_))));
}

fn tiny_store() -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
    s.insert("unused", Tensor::ones(vec![2]));
    s
}

#[test]
fn backward_consumes_and_gradients_retain() {
    let mut store = tiny_store();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let w = tape.param(&store, "w").unwrap();
    assert_eq!(tape.param(&store, "w").unwrap(), w);
    let y = tape.linear(x, w, None).unwrap();
    let l = tape.sum(y).unwrap();

    let a = tape.gradients(l, &store, Task::Ss).unwrap();
    let b = tape.gradients(l, &store, Task::Ss).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.get("w").unwrap(), &[1., 2., 3., 1., 2., 3.]);
    assert_eq!(a.get("unused").unwrap(), &[0., 0.]);

    let c = tape.backward(l, &mut store, Task::Ss).unwrap();
    assert_eq!(c, a);
    assert_eq!(store.get("w").unwrap().grad.data(), &[1., 2., 3., 1., 2., 3.]);
    assert!(matches!(tape.backward(l, &mut store, Task::Ss), Err(Error::TapeConsumed)));
    assert!(matches!(tape.constant(Tensor::scalar(1.0)), Err(Error::TapeConsumed)));
}

#[test]
fn backward_is_deterministic() {
    let store = tiny_store();
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![0.3, 0.1, -0.7, 0.2, 0.9, 0.4]).unwrap()).unwrap();
        let w = tape.param(&store, "w").unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let y = tape.tanh(y).unwrap();
        let l = tape.mean(y).unwrap();
        tape.gradients(l, &store, Task::Combined).unwrap()
    };
    let a = run();
    for _ in 0..3 {
        assert_eq!(run(), a);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let store = tiny_store();
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    assert!(tape.gradients(w, &store, Task::Se).is_err());
}
