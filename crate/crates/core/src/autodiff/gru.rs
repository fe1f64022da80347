//! Fused single-direction GRU over a batch of sequences, with hand-written
//! backpropagation through time.
//!
//! Gate order in the stacked weights is `r, z, n`:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use crate::linalg::{gemm, MatRef};

#[derive(Clone, Copy, Debug)]
pub(crate) struct GruDims {
    pub batch: usize,
    pub len: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl GruDims {
    /// Time index visited at processing step `step`.
    fn time(&self, step: usize) -> usize {
        if self.reverse {
            self.len - 1 - step
        } else {
            step
        }
    }
}

/// Saved activations, each laid out `[batch, len, hidden]`.
#[derive(Clone, Debug)]
pub(crate) struct GruSaved {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `W_hn h + b_hn`, the recurrent part of the candidate pre-activation.
    pub hn: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn forward(
    d: GruDims,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    b_ih: &[f64],
    b_hh: &[f64],
) -> (Vec<f64>, GruSaved) {
    let GruDims { batch, len, input, hidden: h, .. } = d;
    let g3 = 3 * h;
    let rows = batch * len;

    let mut xp = vec![0.0; rows * g3];
    gemm(MatRef::rm(x, rows, input), MatRef::rm(w_ih, g3, input).t(), &mut xp, g3, 0.0);
    for row in xp.chunks_exact_mut(g3) {
        for (v, b) in row.iter_mut().zip(b_ih) {
            *v += b;
        }
    }

    let mut out = vec![0.0; rows * h];
    let mut saved = GruSaved {
        r: vec![0.0; rows * h],
        z: vec![0.0; rows * h],
        n: vec![0.0; rows * h],
        hn: vec![0.0; rows * h],
    };
    let mut hp = vec![0.0; batch * g3];

    for step in 0..len {
        let t = d.time(step);
        let prev = (step > 0).then(|| d.time(step - 1));
        for row in hp.chunks_exact_mut(g3) {
            row.copy_from_slice(b_hh);
        }
        if let Some(p) = prev {
            let hprev = MatRef::strided(&out[p * h..], batch, h, len * h);
            gemm(hprev, MatRef::rm(w_hh, g3, h).t(), &mut hp, g3, 1.0);
        }
        for b in 0..batch {
            let xrow = &xp[(b * len + t) * g3..(b * len + t + 1) * g3];
            let hrow = &hp[b * g3..(b + 1) * g3];
            let at = (b * len + t) * h;
            for j in 0..h {
                let r = sigmoid(xrow[j] + hrow[j]);
                let z = sigmoid(xrow[h + j] + hrow[h + j]);
                let hn = hrow[2 * h + j];
                let n = (xrow[2 * h + j] + r * hn).tanh();
                let hprev = prev.map_or(0.0, |p| out[(b * len + p) * h + j]);
                out[at + j] = (1.0 - z) * n + z * hprev;
                saved.r[at + j] = r;
                saved.z[at + j] = z;
                saved.n[at + j] = n;
                saved.hn[at + j] = hn;
            }
        }
    }
    (out, saved)
}

pub(crate) struct GruGrads {
    pub dx: Vec<f64>,
    pub dw_ih: Vec<f64>,
    pub dw_hh: Vec<f64>,
    pub db_ih: Vec<f64>,
    pub db_hh: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    d: GruDims,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    out: &[f64],
    saved: &GruSaved,
    grad_out: &[f64],
    need_dx: bool,
) -> GruGrads {
    let GruDims { batch, len, input, hidden: h, .. } = d;
    let g3 = 3 * h;
    let rows = batch * len;

    let mut dxp = vec![0.0; rows * g3];
    let mut dhp = vec![0.0; rows * g3];
    let mut hprev_all = vec![0.0; rows * h];
    let mut dh = vec![0.0; batch * h];

    for step in (0..len).rev() {
        let t = d.time(step);
        let prev = (step > 0).then(|| d.time(step - 1));
        for b in 0..batch {
            let at = (b * len + t) * h;
            let gat = (b * len + t) * g3;
            for j in 0..h {
                let dht = grad_out[at + j] + dh[b * h + j];
                let (r, z, n, hn) = (saved.r[at + j], saved.z[at + j], saved.n[at + j], saved.hn[at + j]);
                let hprev = prev.map_or(0.0, |p| out[(b * len + p) * h + j]);
                hprev_all[at + j] = hprev;

                let dn_pre = dht * (1.0 - z) * (1.0 - n * n);
                let dz_pre = dht * (hprev - n) * z * (1.0 - z);
                let dr_pre = dn_pre * hn * r * (1.0 - r);

                dxp[gat + j] = dr_pre;
                dxp[gat + h + j] = dz_pre;
                dxp[gat + 2 * h + j] = dn_pre;
                dhp[gat + j] = dr_pre;
                dhp[gat + h + j] = dz_pre;
                dhp[gat + 2 * h + j] = dn_pre * r;
                dh[b * h + j] = dht * z;
            }
        }
        if prev.is_some() {
            let dhp_t = MatRef::strided(&dhp[t * g3..], batch, g3, len * g3);
            gemm(dhp_t, MatRef::rm(w_hh, g3, h), &mut dh, h, 1.0);
        }
    }

    let mut dw_hh = vec![0.0; g3 * h];
    gemm(MatRef::rm(&dhp, rows, g3).t(), MatRef::rm(&hprev_all, rows, h), &mut dw_hh, h, 0.0);
    let mut dw_ih = vec![0.0; g3 * input];
    gemm(MatRef::rm(&dxp, rows, g3).t(), MatRef::rm(x, rows, input), &mut dw_ih, input, 0.0);
    let mut db_ih = vec![0.0; g3];
    let mut db_hh = vec![0.0; g3];
    for (rx, rh) in dxp.chunks_exact(g3).zip(dhp.chunks_exact(g3)) {
        for k in 0..g3 {
            db_ih[k] += rx[k];
            db_hh[k] += rh[k];
        }
    }
    let mut dx = Vec::new();
    if need_dx {
        dx = vec![0.0; rows * input];
        gemm(MatRef::rm(&dxp, rows, g3), MatRef::rm(w_ih, g3, input), &mut dx, input, 0.0);
    }
    GruGrads { dx, dw_ih, dw_hh, db_ih, db_hh }
}
