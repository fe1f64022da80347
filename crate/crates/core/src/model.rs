//! Mask networks and the unified encoder → SE → SS → decoder model.
//!
//! The SE and SS networks are the same dual-path mask network; the SE network
//! is the one-source case. Inside the graph, feature maps are frame-major
//! (`[T', F]`, chunks `[S, K, F]`); the public [`Representation`] and [`Mask`]
//! types use the `[F, T']` orientation.

use crate::autodiff::{GruParams, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamStore};
use crate::signal::{self, ChunkLayout, ChunkedRepresentation, Representation};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sequence model used inside each dual-path pass. Only the recurrent
/// backbone is implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Rnn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub chunk: usize,
    pub se_blocks: usize,
    pub ss_blocks: usize,
    pub hidden: usize,
    pub sources: usize,
    pub backbone: Backbone,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filters: 64,
            kernel: 16,
            stride: 8,
            chunk: 50,
            se_blocks: 2,
            ss_blocks: 3,
            hidden: 32,
            sources: 2,
            backbone: Backbone::Rnn,
        }
    }
}

impl ModelConfig {
    /// Full-size recurrent configuration (256 filters, K = 250, 2/6 blocks,
    /// 256 hidden units per direction).
    pub fn full_size() -> Self {
        Self {
            filters: 256,
            chunk: 250,
            se_blocks: 2,
            ss_blocks: 6,
            hidden: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.filters == 0 || self.hidden == 0 {
            return bad("filters and hidden must be positive");
        }
        if self.kernel == 0 || self.stride == 0 {
            return bad("kernel and stride must be positive");
        }
        if self.sources == 0 {
            return bad("sources must be >= 1");
        }
        if self.ss_blocks == 0 {
            return bad("ss_blocks must be >= 1");
        }
        if self.chunk < 2 || !self.chunk.is_multiple_of(2) {
            return bad("chunk must be even and >= 2");
        }
        Ok(())
    }

    pub fn se_net(&self) -> MaskNetConfig {
        MaskNetConfig {
            filters: self.filters,
            chunk: self.chunk,
            num_blocks: self.se_blocks,
            hidden: self.hidden,
            sources: 1,
        }
    }

    pub fn ss_net(&self) -> MaskNetConfig {
        MaskNetConfig {
            filters: self.filters,
            chunk: self.chunk,
            num_blocks: self.ss_blocks,
            hidden: self.hidden,
            sources: self.sources,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskNetConfig {
    pub filters: usize,
    pub chunk: usize,
    pub num_blocks: usize,
    pub hidden: usize,
    pub sources: usize,
}

impl MaskNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.num_blocks == 0 || self.chunk < 2 || !self.chunk.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid mask network config {self:?}")));
        }
        Ok(())
    }
}

/// Nonnegative masks, `[C, F, T']`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    data: Tensor,
}

impl Mask {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::invalid("mask", format!("expected [C, F, T'], got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn sources(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Mask of source `k` as a `[F, T']` map.
    pub fn source(&self, k: usize) -> Representation {
        let s = self.data.shape();
        let n = s[1] * s[2];
        let t = Tensor::from_parts(vec![s[1], s[2]], self.data.data()[k * n..(k + 1) * n].to_vec());
        Representation::new(t).expect("2-D")
    }

    /// Frame-major `[C, T', F]` graph layout to `[C, F, T']`.
    fn from_frame_major(t: &Tensor) -> Self {
        let s = t.shape();
        let (c, frames, f) = (s[0], s[1], s[2]);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for k in 0..c {
            for ti in 0..frames {
                for fi in 0..f {
                    out[(k * f + fi) * frames + ti] = src[(k * frames + ti) * f + fi];
                }
            }
        }
        Self {
            data: Tensor::from_parts(vec![c, f, frames], out),
        }
    }
}

// ---- parameter layout ---------------------------------------------------

fn insert_uniform(store: &mut ParamStore, seed: u64, name: String, shape: &[usize], fan_in: usize) {
    let t = uniform_init(seed, &name, shape, fan_in);
    store.insert(name, t);
}

fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, out_f: usize, in_f: usize) {
    insert_uniform(store, seed, format!("{prefix}.weight"), &[out_f, in_f], in_f);
    insert_uniform(store, seed, format!("{prefix}.bias"), &[out_f], in_f);
}

fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::ones(vec![dim]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![dim]));
}

fn init_gru(store: &mut ParamStore, seed: u64, prefix: &str, input: usize, hidden: usize) {
    for dir in ["fwd", "bwd"] {
        let p = format!("{prefix}.{dir}");
        insert_uniform(store, seed, format!("{p}.w_ih"), &[3 * hidden, input], hidden);
        insert_uniform(store, seed, format!("{p}.w_hh"), &[3 * hidden, hidden], hidden);
        insert_uniform(store, seed, format!("{p}.b_ih"), &[3 * hidden], hidden);
        insert_uniform(store, seed, format!("{p}.b_hh"), &[3 * hidden], hidden);
    }
}

/// Adds the parameters of one bidirectional recurrent layer under `prefix`.
pub fn init_bi_recurrent(store: &mut ParamStore, seed: u64, prefix: &str, input: usize, hidden: usize) {
    init_gru(store, seed, prefix, input, hidden);
}

/// Adds one dual-path block's parameters under `prefix`.
pub fn init_dual_path_block(store: &mut ParamStore, seed: u64, prefix: &str, filters: usize, hidden: usize) {
    for pass in ["intra", "inter"] {
        let p = format!("{prefix}.{pass}");
        init_gru(store, seed, &format!("{p}.rnn"), filters, hidden);
        init_linear(store, seed, &format!("{p}.proj"), filters, 2 * hidden);
        init_norm(store, &format!("{p}.norm"), filters);
    }
}

/// Adds a mask network's parameters under `prefix`.
pub fn init_mask_net(store: &mut ParamStore, seed: u64, prefix: &str, cfg: &MaskNetConfig) {
    let f = cfg.filters;
    init_norm(store, &format!("{prefix}.norm"), f);
    init_linear(store, seed, &format!("{prefix}.in_proj"), f, f);
    for b in 0..cfg.num_blocks {
        init_dual_path_block(store, seed, &format!("{prefix}.block{b}"), f, cfg.hidden);
    }
    store.insert(format!("{prefix}.prelu.slope"), Tensor::full(vec![1], 0.25));
    init_linear(store, seed, &format!("{prefix}.out_proj"), cfg.sources * f, f);
    init_linear(store, seed, &format!("{prefix}.head1"), f, f);
    init_linear(store, seed, &format!("{prefix}.head2"), f, f);
}

// ---- graph builders -----------------------------------------------------

fn gru_params(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<GruParams> {
    Ok(GruParams {
        w_ih: tape.param(store, &format!("{prefix}.w_ih"))?,
        w_hh: tape.param(store, &format!("{prefix}.w_hh"))?,
        b_ih: tape.param(store, &format!("{prefix}.b_ih"))?,
        b_hh: tape.param(store, &format!("{prefix}.b_hh"))?,
    })
}

fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

fn norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gain"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Bidirectional GRU over `x: [batch, len, in]` → `[batch, len, 2H]`, forward
/// states first.
pub fn bi_recurrent_graph(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let fwd = gru_params(tape, store, &format!("{prefix}.fwd"))?;
    let bwd = gru_params(tape, store, &format!("{prefix}.bwd"))?;
    let a = tape.gru(x, fwd, false)?;
    let b = tape.gru(x, bwd, true)?;
    tape.concat_last(a, b)
}

/// `x + LayerNorm(Linear(BiGRU(x)))` along the second axis of `[batch, len, F]`.
fn dual_path_pass(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let y = bi_recurrent_graph(tape, store, &format!("{prefix}.rnn"), x)?;
    let y = linear(tape, store, &format!("{prefix}.proj"), y)?;
    let y = norm(tape, store, &format!("{prefix}.norm"), y)?;
    tape.add(x, y)
}

/// Intra-chunk pass along K for every chunk, then inter-chunk pass along S
/// for every position; `x` is `[S, K, F]`.
pub fn dual_path_block_graph(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let x = dual_path_pass(tape, store, &format!("{prefix}.intra"), x)?;
    let xt = tape.swap_leading(x)?;
    let xt = dual_path_pass(tape, store, &format!("{prefix}.inter"), xt)?;
    tape.swap_leading(xt)
}

/// Mask network on a frame-major `[T', F]` input; returns `[C, T', F]`.
pub fn mask_net_graph(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &MaskNetConfig,
    h: Var,
) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(h).to_vec();
    let [frames, f] = s[..] else {
        return Err(Error::invalid("mask_net", format!("expected [T', F], got {s:?}")));
    };
    if f != cfg.filters {
        return Err(Error::shape("mask_net", &s, &[frames, cfg.filters]));
    }
    let layout = ChunkLayout::new(frames, cfg.chunk)?;
    let x = norm(tape, store, &format!("{prefix}.norm"), h)?;
    let x = linear(tape, store, &format!("{prefix}.in_proj"), x)?;
    let mut x = tape.chunk(x, layout)?;
    for b in 0..cfg.num_blocks {
        x = dual_path_block_graph(tape, store, &format!("{prefix}.block{b}"), x)?;
    }
    let slope = tape.param(store, &format!("{prefix}.prelu.slope"))?;
    let x = tape.prelu(x, slope)?;
    let x = linear(tape, store, &format!("{prefix}.out_proj"), x)?;
    let x = tape.overlap_add(x, layout)?;
    let x = tape.reshape(x, &[frames, cfg.sources, f])?;
    let x = tape.swap_leading(x)?;
    let x = linear(tape, store, &format!("{prefix}.head1"), x)?;
    let x = tape.tanh(x)?;
    let x = linear(tape, store, &format!("{prefix}.head2"), x)?;
    tape.relu(x)
}

// ---- standalone forms ---------------------------------------------------

/// Bidirectional recurrence over `x: [F, L]` → `[2H, L]`.
pub fn bi_recurrent(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let [f, l] = x.shape()[..] else {
        return Err(Error::invalid("bi_recurrent", format!("expected [F, L], got {:?}", x.shape())));
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.transpose2()?.reshape(vec![1, l, f])?)?;
    let y = bi_recurrent_graph(&mut tape, store, prefix, xv)?;
    let y = tape.value(y).clone();
    let h2 = y.shape()[2];
    y.reshape(vec![l, h2])?.transpose2()
}

pub fn dual_path_block(c: &ChunkedRepresentation, store: &ParamStore, prefix: &str) -> Result<ChunkedRepresentation> {
    let mut tape = Tape::new();
    let x = tape.constant(c.to_sequence_major())?;
    let y = dual_path_block_graph(&mut tape, store, prefix, x)?;
    ChunkedRepresentation::from_sequence_major(tape.value(y), c.layout)
}

pub fn mask_net_forward(h: &Representation, cfg: &MaskNetConfig, store: &ParamStore, prefix: &str) -> Result<Mask> {
    let mut tape = Tape::new();
    let x = tape.constant(h.tensor().transpose2()?)?;
    let m = mask_net_graph(&mut tape, store, prefix, cfg, x)?;
    Ok(Mask::from_frame_major(tape.value(m)))
}

/// `h_e = m_e ⊙ h_n`.
pub fn se_apply(h_n: &Representation, m_e: &Mask) -> Result<Representation> {
    if m_e.sources() != 1 {
        return Err(Error::invalid("se_apply", format!("enhancement mask has {} sources", m_e.sources())));
    }
    let m = m_e.source(0);
    if m.tensor().shape() != h_n.tensor().shape() {
        return Err(Error::shape("se_apply", h_n.tensor().shape(), m.tensor().shape()));
    }
    let data = h_n
        .tensor()
        .data()
        .iter()
        .zip(m.tensor().data())
        .map(|(a, b)| a * b)
        .collect();
    Representation::new(Tensor::from_parts(h_n.tensor().shape().to_vec(), data))
}

/// `ŝ_k = decode(m_k ⊙ h_e)`, each fitted to `len` samples.
pub fn separate(h_e: &Representation, masks: &Mask, decoder: &Tensor, stride: usize, len: usize) -> Result<Vec<Tensor>> {
    (0..masks.sources())
        .map(|k| {
            let masked = se_apply(h_e, &Mask::new(masks.source(k).into_tensor().reshape(vec![1, h_e.filters(), h_e.frames()])?)?)?;
            let y = signal::decode(&masked, decoder, stride)?;
            let mut tape = Tape::new();
            let v = tape.constant(y)?;
            let v = tape.fit_len(v, len)?;
            Ok(tape.value(v).clone())
        })
        .collect()
}

// ---- unified model ------------------------------------------------------

pub const ENCODER: &str = "encoder.weight";
pub const DECODER: &str = "decoder.weight";
pub const SE_PREFIX: &str = "se";
pub const SS_PREFIX: &str = "ss";

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[F, T']`
    pub h_n: Var,
    /// Frame-major `[T', F]` input to the SS network.
    pub h_e: Var,
    /// `[1, T', F]`, absent without an SE network.
    pub se_mask: Option<Var>,
    /// `[C, T', F]`
    pub ss_mask: Var,
    /// `C` waveforms of the input length.
    pub estimates: Vec<Var>,
}

/// Encoder → (SE network) → SS network → decoder.
#[derive(Clone, Debug)]
pub struct UnifiedNet {
    pub cfg: ModelConfig,
    pub with_se: bool,
}

impl UnifiedNet {
    pub fn new(cfg: ModelConfig, with_se: bool) -> Result<Self> {
        cfg.validate()?;
        if with_se && cfg.se_blocks == 0 {
            return Err(Error::Config("se_blocks must be >= 1 when the SE network is enabled".into()));
        }
        Ok(Self { cfg, with_se })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let mut store = ParamStore::new();
        insert_uniform(&mut store, seed, ENCODER.into(), &[c.filters, 1, c.kernel], c.kernel);
        if self.with_se {
            init_mask_net(&mut store, seed, SE_PREFIX, &c.se_net());
        }
        init_mask_net(&mut store, seed, SS_PREFIX, &c.ss_net());
        insert_uniform(&mut store, seed, DECODER.into(), &[c.filters, 1, c.kernel], c.kernel);
        store
    }

    /// Layers reached by the enhancement loss: encoder and SE network.
    pub fn in_se_scope(name: &str) -> bool {
        name == ENCODER || name.starts_with("se.")
    }

    pub fn encoded_len(&self, samples: usize) -> usize {
        signal::encoded_len(samples, self.cfg.kernel, self.cfg.stride)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_n: &Tensor) -> Result<ForwardVars> {
        let len = x_n.len();
        let x = tape.constant(x_n.clone())?;
        let enc = tape.param(store, ENCODER)?;
        let h_n = signal::encode_graph(tape, x, enc, self.cfg.stride)?;
        let h_fm = tape.transpose(h_n)?;

        let (h_e, se_mask) = if self.with_se {
            let m = mask_net_graph(tape, store, SE_PREFIX, &self.cfg.se_net(), h_fm)?;
            let frames = tape.shape(h_fm).to_vec();
            let m2 = tape.reshape(m, &frames)?;
            (tape.mul(m2, h_fm)?, Some(m))
        } else {
            (h_fm, None)
        };

        let ss_mask = mask_net_graph(tape, store, SS_PREFIX, &self.cfg.ss_net(), h_e)?;
        let dec = tape.param(store, DECODER)?;
        let mut estimates = Vec::with_capacity(self.cfg.sources);
        for k in 0..self.cfg.sources {
            let m = tape.select(ss_mask, k)?;
            let masked = tape.mul(m, h_e)?;
            let masked = tape.transpose(masked)?;
            let y = signal::decode_graph(tape, masked, dec, self.cfg.stride)?;
            estimates.push(tape.fit_len(y, len)?);
        }
        Ok(ForwardVars { h_n, h_e, se_mask, ss_mask, estimates })
    }

    /// Separated waveforms for one noisy mixture.
    pub fn separate_waveforms(&self, store: &ParamStore, x_n: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, store, x_n)?;
        Ok(f.estimates.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Clean-mixture representation as a detached frame-major target.
    pub fn clean_target(&self, store: &ParamStore, x_c: &Tensor) -> Result<Tensor> {
        let h_c = signal::encode(x_c, store.value(ENCODER)?, self.cfg.stride)?;
        h_c.tensor().transpose2()
    }
}
