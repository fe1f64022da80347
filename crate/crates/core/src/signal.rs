//! Waveform ↔ encoder-domain transforms, 50%-overlap chunking, and
//! magnitude spectrograms for inspection.

use std::io::Write;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encoder-domain feature map, `[filters, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    data: Tensor,
}

impl Representation {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() != 2 {
            return Err(Error::invalid("representation", format!("expected [F, T'], got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn filters(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.data.data()[f * self.frames() + t]
    }
}

/// `⌊(len − kernel) / stride⌋ + 1`.
pub fn encoded_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// `(frames − 1)·stride + kernel`.
pub fn decoded_len(frames: usize, kernel: usize, stride: usize) -> usize {
    (frames - 1) * stride + kernel
}

/// `ReLU(conv1d(x))` on the tape; `x` is `[T]`, `weight` is
/// `[F, 1, kernel]`, output `[F, T']`.
pub fn encode_graph(tape: &mut Tape, x: Var, weight: Var, stride: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 1 {
        return Err(Error::invalid("encode", format!("expected waveform [T], got {s:?}")));
    }
    let k = tape.shape(weight).get(2).copied().unwrap_or(0);
    if s[0] < k {
        return Err(Error::invalid("encode", format!("waveform length {} < kernel {k}", s[0])));
    }
    let x2 = tape.reshape(x, &[1, s[0]])?;
    let c = tape.conv1d(x2, weight, stride)?;
    tape.relu(c)
}

/// Transposed convolution back to a waveform; `masked` is `[F, T']`,
/// `weight` is `[F, 1, kernel]`, output `[(T' − 1)·stride + kernel]`.
pub fn decode_graph(tape: &mut Tape, masked: Var, weight: Var, stride: usize) -> Result<Var> {
    let y = tape.conv_transpose1d(masked, weight, stride)?;
    let len = tape.shape(y)[1];
    tape.reshape(y, &[len])
}

pub fn encode(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Representation> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let wv = tape.constant(weight.clone())?;
    let h = encode_graph(&mut tape, xv, wv, stride)?;
    Representation::new(tape.value(h).clone())
}

pub fn decode(masked: &Representation, weight: &Tensor, stride: usize) -> Result<Tensor> {
    if weight.ndim() != 3 || weight.shape()[0] != masked.filters() {
        return Err(Error::shape("decode", masked.tensor().shape(), weight.shape()));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(masked.tensor().clone())?;
    let wv = tape.constant(weight.clone())?;
    let y = decode_graph(&mut tape, hv, wv, stride)?;
    Ok(tape.value(y).clone())
}

/// Chunk bookkeeping for 50%-overlap segmentation of `frames` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    pub frames: usize,
    pub chunk: usize,
    pub hop: usize,
    pub chunks: usize,
    pub pad_len: usize,
}

impl ChunkLayout {
    /// The input is zero-padded at the end to the smallest `K + m·hop ≥ frames`.
    pub fn new(frames: usize, chunk: usize) -> Result<Self> {
        if chunk < 2 || !chunk.is_multiple_of(2) {
            return Err(Error::invalid("chunk", format!("chunk size {chunk} must be even and >= 2")));
        }
        if frames == 0 {
            return Err(Error::invalid("chunk", "no frames"));
        }
        let hop = chunk / 2;
        let m = if frames <= chunk { 0 } else { (frames - chunk).div_ceil(hop) };
        let padded = chunk + m * hop;
        Ok(Self {
            frames,
            chunk,
            hop,
            chunks: m + 1,
            pad_len: padded - frames,
        })
    }

    pub fn start(&self, s: usize) -> usize {
        s * self.hop
    }

    pub fn padded_len(&self) -> usize {
        self.frames + self.pad_len
    }
}

/// Overlapping chunks, `[F, K, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedRepresentation {
    pub data: Tensor,
    pub layout: ChunkLayout,
}

impl ChunkedRepresentation {
    pub fn at(&self, f: usize, k: usize, s: usize) -> f64 {
        let (kk, ss) = (self.layout.chunk, self.layout.chunks);
        self.data.data()[(f * kk + k) * ss + s]
    }

    /// Re-lays `[F, K, S]` as `[S, K, F]` (sequence-major, used on the tape).
    pub fn to_sequence_major(&self) -> Tensor {
        let f = self.data.shape()[0];
        let (kk, ss) = (self.layout.chunk, self.layout.chunks);
        let mut out = vec![0.0; f * kk * ss];
        for fi in 0..f {
            for k in 0..kk {
                for s in 0..ss {
                    out[(s * kk + k) * f + fi] = self.at(fi, k, s);
                }
            }
        }
        Tensor::from_parts(vec![ss, kk, f], out)
    }

    /// Inverse of [`ChunkedRepresentation::to_sequence_major`].
    pub fn from_sequence_major(t: &Tensor, layout: ChunkLayout) -> Result<Self> {
        let [ss, kk, f] = t.shape()[..] else {
            return Err(Error::invalid("chunked", format!("expected [S, K, F], got {:?}", t.shape())));
        };
        if ss != layout.chunks || kk != layout.chunk {
            return Err(Error::shape("chunked", t.shape(), &[layout.chunks, layout.chunk, f]));
        }
        let src = t.data();
        let mut out = vec![0.0; f * kk * ss];
        for s in 0..ss {
            for k in 0..kk {
                for fi in 0..f {
                    out[(fi * kk + k) * ss + s] = src[(s * kk + k) * f + fi];
                }
            }
        }
        Ok(Self {
            data: Tensor::from_parts(vec![f, kk, ss], out),
            layout,
        })
    }
}

/// Chops `h` along time into chunks of `chunk` frames with 50% overlap.
pub fn chunk(h: &Representation, chunk: usize) -> Result<ChunkedRepresentation> {
    let layout = ChunkLayout::new(h.frames(), chunk)?;
    let (f, kk, ss) = (h.filters(), layout.chunk, layout.chunks);
    let mut out = vec![0.0; f * kk * ss];
    for fi in 0..f {
        for k in 0..kk {
            for s in 0..ss {
                let t = layout.start(s) + k;
                if t < h.frames() {
                    out[(fi * kk + k) * ss + s] = h.at(fi, t);
                }
            }
        }
    }
    Ok(ChunkedRepresentation {
        data: Tensor::from_parts(vec![f, kk, ss], out),
        layout,
    })
}

/// Sums overlapping chunks back onto the time axis and drops the end padding.
pub fn overlap_add(c: &ChunkedRepresentation) -> Result<Representation> {
    let layout = c.layout;
    let f = c.data.shape()[0];
    let mut out = vec![0.0; f * layout.frames];
    for fi in 0..f {
        for k in 0..layout.chunk {
            for s in 0..layout.chunks {
                let t = layout.start(s) + k;
                if t < layout.frames {
                    out[fi * layout.frames + t] += c.at(fi, k, s);
                }
            }
        }
    }
    Representation::new(Tensor::from_parts(vec![f, layout.frames], out))
}

/// Magnitude short-time spectrum, `bins × frames`, Hann-windowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    /// Row-major by bin: `data[bin * frames + frame]`.
    pub data: Vec<f64>,
}

pub fn spectrogram(x: &[f64], frame: usize, hop: usize) -> Result<Spectrogram> {
    if frame == 0 || hop == 0 {
        return Err(Error::invalid("spectrogram", "frame and hop must be positive"));
    }
    if frame > x.len() {
        return Err(Error::invalid("spectrogram", format!("frame {frame} > signal length {}", x.len())));
    }
    let frames = (x.len() - frame) / hop + 1;
    let bins = frame / 2 + 1;
    let window: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(frame);
    let mut buf = vec![Complex::new(0.0, 0.0); frame];
    let mut data = vec![0.0; bins * frames];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[t * hop + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().take(bins).enumerate() {
            data[k * frames + t] = v.norm();
        }
    }
    Ok(Spectrogram { bins, frames, data })
}

impl Spectrogram {
    /// 8-bit log-magnitude image over an 80 dB range below the peak; row 0
    /// is the highest frequency bin.
    pub fn to_gray(&self) -> Vec<u8> {
        let peak = self.data.iter().cloned().fold(0.0, f64::max);
        let mut img = vec![0u8; self.bins * self.frames];
        if peak <= 0.0 {
            return img;
        }
        for b in 0..self.bins {
            let row = self.bins - 1 - b;
            for t in 0..self.frames {
                let m = self.data[b * self.frames + t];
                let db = if m > 0.0 { 20.0 * (m / peak).log10() } else { -80.0 };
                let v = ((db.max(-80.0) + 80.0) / 80.0 * 255.0).round();
                img[row * self.frames + t] = v as u8;
            }
        }
        img
    }

    /// Plain (P2) PGM.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = self.to_gray();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "P2\n{} {}\n255", self.frames, self.bins)?;
        for row in img.chunks(self.frames) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        f.flush()?;
        Ok(())
    }

    /// One line per frequency bin, magnitudes comma-separated.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in self.data.chunks(self.frames) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        f.flush()?;
        Ok(())
    }

    /// Bin with the largest summed magnitude over time.
    pub fn dominant_bin(&self) -> usize {
        (0..self.bins)
            .map(|b| (b, self.data[b * self.frames..(b + 1) * self.frames].iter().sum::<f64>()))
            .fold((0, f64::MIN), |acc, (b, e)| if e > acc.1 { (b, e) } else { acc })
            .0
    }
}
