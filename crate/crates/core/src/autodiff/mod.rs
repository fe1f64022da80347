//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive evaluates eagerly, checks its output for NaN/Inf, and
//! appends a node to the [`Tape`]. A backward pass walks the nodes in exact
//! reverse order of recording and accumulates gradients into the inputs.
//!
//! Elementwise binary ops broadcast the right operand over leading
//! dimensions: its shape must equal the left shape or be a suffix of it.

mod gru;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::gradmod::{GradientSet, Task};
use crate::linalg::{gemm, MatRef};
use crate::losses::{si_snr_parts, SiSnrParts};
use crate::params::ParamStore;
use crate::signal::ChunkLayout;
use crate::tensor::Tensor;

use gru::{GruDims, GruSaved};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stacked parameters of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, stride: usize },
    ConvTranspose1d { x: Var, w: Var, stride: usize },
    Relu(Var),
    Prelu { x: Var, slope: Var },
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Transpose(Var),
    Reshape(Var),
    SwapLeading(Var),
    Select { x: Var, index: usize },
    ConcatLast(Var, Var),
    FitLen { x: Var, len: usize },
    Chunk { x: Var, layout: ChunkLayout },
    OverlapAdd { x: Var, layout: ChunkLayout },
    Gru(Box<GruNode>),
    SiSnr { est: Var, parts: Box<SiSnrParts> },
}

struct GruNode {
    x: Var,
    p: GruParams,
    dims: GruDims,
    saved: GruSaved,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    consumed: bool,
}

fn suffix_of(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Sums `g` over leading dimensions down to `inner` trailing values.
fn reduce_leading(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for row in g.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A free leaf that receives a gradient (used for input-gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Registers a store parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(store.value(name)?.clone(), true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ([m, k], [k2, n]) = (sa, sb) else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let (m, k, n) = (*m, *k, *n);
        if k != *k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::rm(self.value(a).data(), m, k),
            MatRef::rm(self.value(b).data(), k, n),
            &mut out,
            n,
            0.0,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x · wᵀ + b` over the last dimension of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let [out_f, in_f] = sw[..] else {
            return Err(Error::shape("linear", &sx, &sw));
        };
        if sx.is_empty() || last_dim(&sx) != in_f {
            return Err(Error::shape("linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(Error::shape("linear", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / in_f;
        let mut out = vec![0.0; rows * out_f];
        gemm(
            MatRef::rm(self.value(x).data(), rows, in_f),
            MatRef::rm(self.value(w).data(), out_f, in_f).t(),
            &mut out,
            out_f,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(out_f) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_f;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Valid (unpadded) 1-D convolution. `x` is `[c_in, len]`, `w` is
    /// `[c_out, c_in, kernel]`; output `[c_out, (len - kernel) / stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c_in, len], [c_out, c_in2, k]) = (&sx[..], &sw[..]) else {
            return Err(Error::shape("conv1d", &sx, &sw));
        };
        let (c_in, len, c_out, k) = (*c_in, *len, *c_out, *k);
        if c_in != *c_in2 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be >= 1"));
        }
        if len < k {
            return Err(Error::invalid("conv1d", format!("input length {len} < kernel {k}")));
        }
        let lout = (len - k) / stride + 1;
        let cols = im2col(self.value(x).data(), c_in, len, k, stride, lout);
        let ck = c_in * k;
        let mut out = vec![0.0; c_out * lout];
        gemm(
            MatRef::rm(self.value(w).data(), c_out, ck),
            MatRef::rm(&cols, lout, ck).t(),
            &mut out,
            lout,
            0.0,
        );
        self.push(
            "conv1d",
            Tensor::from_parts(vec![c_out, lout], out),
            Op::Conv1d { x, w, stride },
            &[x, w],
        )
    }

    /// Transposed 1-D convolution. `x` is `[c_in, len]`, `w` is
    /// `[c_in, c_out, kernel]`; output `[c_out, (len - 1) * stride + kernel]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c_in, len], [c_in2, c_out, k]) = (&sx[..], &sw[..]) else {
            return Err(Error::shape("conv_transpose1d", &sx, &sw));
        };
        let (c_in, len, c_out, k) = (*c_in, *len, *c_out, *k);
        if c_in != *c_in2 {
            return Err(Error::shape("conv_transpose1d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose1d", "stride must be >= 1"));
        }
        let lout = (len - 1) * stride + k;
        let ok = c_out * k;
        let mut cols = vec![0.0; len * ok];
        gemm(
            MatRef::rm(self.value(x).data(), c_in, len).t(),
            MatRef::rm(self.value(w).data(), c_in, ok),
            &mut cols,
            ok,
            0.0,
        );
        let mut out = vec![0.0; c_out * lout];
        col2im_add(&cols, c_out, lout, k, stride, len, &mut out);
        self.push(
            "conv_transpose1d",
            Tensor::from_parts(vec![c_out, lout], out),
            Op::ConvTranspose1d { x, w, stride },
            &[x, w],
        )
    }

    // ---- pointwise -----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// `x` where positive, `slope · x` elsewhere. `slope` is `[1]` or matches
    /// the last dimension of `x`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(slope).to_vec();
        let per_channel = ss == [last_dim(&sx)] && ss != [1];
        if !(ss == [1] || per_channel) {
            return Err(Error::shape("prelu", &sx, &ss));
        }
        let a = self.value(slope).data().to_vec();
        let c = a.len();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= a[i % c];
            }
        }
        self.push("prelu", out, Op::Prelu { x, slope }, &[x, slope])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        self.push("square", v, Op::Square(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = last_dim(&sx);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(sx, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let bd = self.value(b).data();
        let inner = bd.len();
        Ok(self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % inner]))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let s = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(s, v), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let s = self.shape(a).to_vec();
        self.push("sub", Tensor::from_parts(s, v), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let s = self.shape(a).to_vec();
        self.push("mul", Tensor::from_parts(s, v), Op::Mul(a, b), &[a, b])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", v, Op::Mean(x), &[x])
    }

    // ---- layout --------------------------------------------------------

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose2()?;
        self.push("transpose", v, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Swaps the first two axes: `[a, b, rest..] -> [b, a, rest..]`.
    pub fn swap_leading(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("swap_leading", format!("need >= 2 dims, got {s:?}")));
        }
        let (a, b) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..a {
            for j in 0..b {
                let from = (i * b + j) * inner;
                let to = (j * a + i) * inner;
                out[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
        let mut shape = s;
        shape.swap(0, 1);
        self.push("swap_leading", Tensor::from_parts(shape, out), Op::SwapLeading(x), &[x])
    }

    /// Slice `index` along the first axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || index >= s[0] {
            return Err(Error::invalid("select", format!("index {index} into {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        self.push("select", Tensor::from_parts(s[1..].to_vec(), data), Op::Select { x, index }, &[x])
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", &sa, &sb));
        }
        let (da, db) = (last_dim(&sa), last_dim(&sb));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let rows = va.len() / da;
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            out.extend_from_slice(&va[r * da..(r + 1) * da]);
            out.extend_from_slice(&vb[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        self.push("concat_last", Tensor::from_parts(shape, out), Op::ConcatLast(a, b), &[a, b])
    }

    /// Truncates or zero-pads the last dimension to `len`.
    pub fn fit_len(&mut self, x: Var, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::invalid("fit_len", "length must be positive"));
        }
        let s = self.shape(x).to_vec();
        let l = last_dim(&s);
        let src = self.value(x).data();
        let rows = src.len() / l;
        let keep = l.min(len);
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..r * len + keep].copy_from_slice(&src[r * l..r * l + keep]);
        }
        let mut shape = if s.is_empty() { vec![1] } else { s };
        *shape.last_mut().unwrap() = len;
        self.push("fit_len", Tensor::from_parts(shape, out), Op::FitLen { x, len }, &[x])
    }

    /// Frame-major chunking: `[frames, feat] -> [chunks, chunk, feat]`, zero
    /// beyond the last frame.
    pub fn chunk(&mut self, x: Var, layout: ChunkLayout) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [frames, feat] = s[..] else {
            return Err(Error::invalid("chunk", format!("expected [frames, feat], got {s:?}")));
        };
        if frames != layout.frames {
            return Err(Error::shape("chunk", &s, &[layout.frames, feat]));
        }
        let src = self.value(x).data();
        let (kk, ss) = (layout.chunk, layout.chunks);
        let mut out = vec![0.0; ss * kk * feat];
        for c in 0..ss {
            for k in 0..kk {
                let t = layout.start(c) + k;
                if t < frames {
                    let to = (c * kk + k) * feat;
                    out[to..to + feat].copy_from_slice(&src[t * feat..(t + 1) * feat]);
                }
            }
        }
        self.push(
            "chunk",
            Tensor::from_parts(vec![ss, kk, feat], out),
            Op::Chunk { x, layout },
            &[x],
        )
    }

    /// Inverse layout of [`Tape::chunk`]: overlapping frames are summed and
    /// the end padding dropped.
    pub fn overlap_add(&mut self, x: Var, layout: ChunkLayout) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [ss, kk, feat] = s[..] else {
            return Err(Error::invalid("overlap_add", format!("expected 3-D, got {s:?}")));
        };
        if ss != layout.chunks || kk != layout.chunk {
            return Err(Error::shape("overlap_add", &s, &[layout.chunks, layout.chunk, feat]));
        }
        let src = self.value(x).data();
        let frames = layout.frames;
        let mut out = vec![0.0; frames * feat];
        for c in 0..ss {
            for k in 0..kk {
                let t = layout.start(c) + k;
                if t < frames {
                    let from = (c * kk + k) * feat;
                    for j in 0..feat {
                        out[t * feat + j] += src[from + j];
                    }
                }
            }
        }
        self.push(
            "overlap_add",
            Tensor::from_parts(vec![frames, feat], out),
            Op::OverlapAdd { x, layout },
            &[x],
        )
    }

    // ---- fused ---------------------------------------------------------

    /// One GRU direction over `x: [batch, len, input]`; returns
    /// `[batch, len, hidden]`. With `reverse`, the sequence is read back to
    /// front and outputs stay aligned with their input positions.
    pub fn gru(&mut self, x: Var, p: GruParams, reverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [batch, len, input] = sx[..] else {
            return Err(Error::invalid("gru", format!("expected [batch, len, input], got {sx:?}")));
        };
        let sw = self.shape(p.w_hh).to_vec();
        let [g3, hidden] = sw[..] else {
            return Err(Error::shape("gru", &sx, &sw));
        };
        if g3 != 3 * hidden
            || self.shape(p.w_ih) != [3 * hidden, input]
            || self.shape(p.b_ih) != [3 * hidden]
            || self.shape(p.b_hh) != [3 * hidden]
        {
            return Err(Error::shape("gru", &sx, self.shape(p.w_ih)));
        }
        let dims = GruDims { batch, len, input, hidden, reverse };
        let (out, saved) = gru::forward(
            dims,
            self.value(x).data(),
            self.value(p.w_ih).data(),
            self.value(p.w_hh).data(),
            self.value(p.b_ih).data(),
            self.value(p.b_hh).data(),
        );
        self.push(
            "gru",
            Tensor::from_parts(vec![batch, len, hidden], out),
            Op::Gru(Box::new(GruNode { x, p, dims, saved })),
            &[x, p.w_ih, p.w_hh, p.b_ih, p.b_hh],
        )
    }

    /// Scale-invariant SNR (dB) of a 1-D estimate against a fixed reference.
    pub fn si_snr(&mut self, est: Var, reference: &Tensor) -> Result<Var> {
        let s = self.shape(est);
        if s.len() != 1 || reference.shape() != s {
            return Err(Error::shape("si_snr", s, reference.shape()));
        }
        let parts = si_snr_parts(self.value(est).data(), reference.data())?;
        let v = Tensor::scalar(parts.value);
        self.push("si_snr", v, Op::SiSnr { est, parts: Box::new(parts) }, &[est])
    }

    // ---- backward ------------------------------------------------------

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to `wrt`, leaving the tape intact.
    pub fn grads(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.run_backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec()))
            })
            .collect())
    }

    /// Per-parameter gradients of `loss` for every entry of `store`, in store
    /// order. Parameters the loss does not reach get zeros. The tape is kept,
    /// so further losses over the same forward may be differentiated.
    pub fn gradients(&self, loss: Var, store: &ParamStore, task: Task) -> Result<GradientSet> {
        let grads = self.run_backward(loss)?;
        let mut set = GradientSet::new(task);
        for (name, p) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| grads.get(v.0))
                .and_then(|g| g.as_ref())
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.len()]);
            set.insert(name, g);
        }
        Ok(set)
    }

    /// Like [`Tape::gradients`], but also writes the store's gradient slots
    /// and consumes the tape. A second call returns [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore, task: Task) -> Result<GradientSet> {
        let set = self.gradients(loss, store, task)?;
        for (name, g) in set.iter() {
            store.get_mut(name)?.grad.data_mut().copy_from_slice(g);
        }
        self.nodes.clear();
        self.params.clear();
        self.consumed = true;
        Ok(set)
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let t = Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), data);
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(MatRef::rm(gd, m, n), MatRef::rm(vb.data(), k, n).t(), &mut da, k, 0.0);
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(MatRef::rm(va.data(), m, k).t(), MatRef::rm(gd, m, n), &mut db, n, 0.0);
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (out_f, in_f) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / in_f;
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * in_f];
                    gemm(MatRef::rm(gd, rows, out_f), MatRef::rm(vw.data(), out_f, in_f), &mut dx, in_f, 0.0);
                    acc(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(MatRef::rm(gd, rows, out_f).t(), MatRef::rm(vx.data(), rows, in_f), &mut dw, in_f, 0.0);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        acc(*b, reduce_leading(gd, out_f));
                    }
                }
            }
            Op::Conv1d { x, w, stride } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (c_in, len) = (vx.shape()[0], vx.shape()[1]);
                let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
                let lout = g.shape()[1];
                let ck = c_in * k;
                if self.rg(*w) {
                    let cols = im2col(vx.data(), c_in, len, k, *stride, lout);
                    let mut dw = vec![0.0; c_out * ck];
                    gemm(MatRef::rm(gd, c_out, lout), MatRef::rm(&cols, lout, ck), &mut dw, ck, 0.0);
                    acc(*w, dw);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; lout * ck];
                    gemm(MatRef::rm(gd, c_out, lout).t(), MatRef::rm(vw.data(), c_out, ck), &mut dcols, ck, 0.0);
                    let mut dx = vec![0.0; c_in * len];
                    col2im_add(&dcols, c_in, len, k, *stride, lout, &mut dx);
                    acc(*x, dx);
                }
            }
            Op::ConvTranspose1d { x, w, stride } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (c_in, len) = (vx.shape()[0], vx.shape()[1]);
                let (c_out, k) = (vw.shape()[1], vw.shape()[2]);
                let lout = g.shape()[1];
                let ok = c_out * k;
                let dcols = im2col(gd, c_out, lout, k, *stride, len);
                if self.rg(*x) {
                    let mut dx = vec![0.0; c_in * len];
                    gemm(MatRef::rm(vw.data(), c_in, ok), MatRef::rm(&dcols, len, ok).t(), &mut dx, len, 0.0);
                    acc(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; c_in * ok];
                    gemm(MatRef::rm(vx.data(), c_in, len), MatRef::rm(&dcols, len, ok), &mut dw, ok, 0.0);
                    acc(*w, dw);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                acc(*x, gd.iter().zip(vx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Prelu { x, slope } => {
                let vx = self.value(*x).data();
                let a = self.value(*slope).data();
                let c = a.len();
                let dx = gd
                    .iter()
                    .zip(vx)
                    .enumerate()
                    .map(|(i, (g, &v))| if v > 0.0 { *g } else { g * a[i % c] })
                    .collect();
                let mut da = vec![0.0; c];
                for (i, (g, &v)) in gd.iter().zip(vx).enumerate() {
                    if v <= 0.0 {
                        da[i % c] += g * v;
                    }
                }
                acc(*x, dx);
                acc(*slope, da);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect());
            }
            Op::Square(x) => {
                let vx = self.value(*x).data();
                acc(*x, gd.iter().zip(vx).map(|(g, v)| 2.0 * g * v).collect());
            }
            Op::Scale(x, c) => acc(*x, gd.iter().map(|g| g * c).collect()),
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = gd.len() / d;
                let mut dgain = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j];
                        let dxh = gr[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                    }
                    let is = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx[r * d + j] = is * (d as f64 * dxh - s1 - xr[j] * s2);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, reduce_leading(gd, d));
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                if self.rg(*b) {
                    acc(*b, reduce_leading(gd, self.value(*b).len()));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                if self.rg(*b) {
                    let r = reduce_leading(gd, self.value(*b).len());
                    acc(*b, r.into_iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let inner = vb.len();
                if self.rg(*a) {
                    acc(*a, gd.iter().enumerate().map(|(i, g)| g * vb[i % inner]).collect());
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    acc(*b, reduce_leading(&prod, inner));
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gd[0] / n as f64; n]);
            }
            Op::Transpose(x) => acc(*x, g.transpose2().expect("2-D").into_data()),
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::SwapLeading(x) => {
                // g is [b, a, rest]; swap back to [a, b, rest]
                let s = g.shape();
                let (b, a) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut out = vec![0.0; gd.len()];
                for j in 0..b {
                    for i in 0..a {
                        let from = (j * a + i) * inner;
                        let to = (i * b + j) * inner;
                        out[to..to + inner].copy_from_slice(&gd[from..from + inner]);
                    }
                }
                acc(*x, out);
            }
            Op::Select { x, index } => {
                let n = self.value(*x).len();
                let inner = gd.len();
                let mut out = vec![0.0; n];
                out[index * inner..(index + 1) * inner].copy_from_slice(gd);
                acc(*x, out);
            }
            Op::ConcatLast(a, b) => {
                let (da, db) = (last_dim(self.shape(*a)), last_dim(self.shape(*b)));
                let rows = gd.len() / (da + db);
                let mut ga = Vec::with_capacity(rows * da);
                let mut gb = Vec::with_capacity(rows * db);
                for r in 0..rows {
                    let row = &gd[r * (da + db)..(r + 1) * (da + db)];
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::FitLen { x, len } => {
                let l = last_dim(self.shape(*x));
                let rows = self.value(*x).len() / l;
                let keep = l.min(*len);
                let mut out = vec![0.0; rows * l];
                for r in 0..rows {
                    out[r * l..r * l + keep].copy_from_slice(&gd[r * len..r * len + keep]);
                }
                acc(*x, out);
            }
            Op::Chunk { x, layout } => {
                let feat = last_dim(self.shape(*x));
                let mut out = vec![0.0; layout.frames * feat];
                for c in 0..layout.chunks {
                    for k in 0..layout.chunk {
                        let t = layout.start(c) + k;
                        if t < layout.frames {
                            let from = (c * layout.chunk + k) * feat;
                            for j in 0..feat {
                                out[t * feat + j] += gd[from + j];
                            }
                        }
                    }
                }
                acc(*x, out);
            }
            Op::OverlapAdd { x, layout } => {
                let feat = last_dim(g.shape());
                let mut out = vec![0.0; layout.chunks * layout.chunk * feat];
                for c in 0..layout.chunks {
                    for k in 0..layout.chunk {
                        let t = layout.start(c) + k;
                        if t < layout.frames {
                            let to = (c * layout.chunk + k) * feat;
                            out[to..to + feat].copy_from_slice(&gd[t * feat..(t + 1) * feat]);
                        }
                    }
                }
                acc(*x, out);
            }
            Op::Gru(n) => {
                let grads = gru::backward(
                    n.dims,
                    self.value(n.x).data(),
                    self.value(n.p.w_ih).data(),
                    self.value(n.p.w_hh).data(),
                    node.value.data(),
                    &n.saved,
                    gd,
                    self.rg(n.x),
                );
                if self.rg(n.x) {
                    acc(n.x, grads.dx);
                }
                acc(n.p.w_ih, grads.dw_ih);
                acc(n.p.w_hh, grads.dw_hh);
                acc(n.p.b_ih, grads.db_ih);
                acc(n.p.b_hh, grads.db_hh);
            }
            Op::SiSnr { est, parts } => {
                let ge = parts.grad_est();
                acc(*est, ge.into_iter().map(|v| v * gd[0]).collect());
            }
        }
    }
}

/// `cols[t][c * k + j] = x[c][t * stride + j]`.
fn im2col(x: &[f64], c_in: usize, len: usize, k: usize, stride: usize, lout: usize) -> Vec<f64> {
    let ck = c_in * k;
    let mut cols = vec![0.0; lout * ck];
    for t in 0..lout {
        for c in 0..c_in {
            let src = &x[c * len + t * stride..c * len + t * stride + k];
            cols[t * ck + c * k..t * ck + c * k + k].copy_from_slice(src);
        }
    }
    cols
}

/// `out[c][t * stride + j] += cols[t][c * k + j]`.
fn col2im_add(cols: &[f64], c: usize, len: usize, k: usize, stride: usize, frames: usize, out: &mut [f64]) {
    let ck = c * k;
    for t in 0..frames {
        for ch in 0..c {
            let dst = &mut out[ch * len + t * stride..ch * len + t * stride + k];
            for (o, v) in dst.iter_mut().zip(&cols[t * ck + ch * k..t * ck + ch * k + k]) {
                *o += v;
            }
        }
    }
}

#[cfg(test)]
mod tests;
