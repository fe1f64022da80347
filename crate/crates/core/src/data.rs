//! Synthetic parallel corpus (noisy mixture, clean mixture, sources) and WAV I/O.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{read_records, write_records};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 8000;
pub const MIN_LEN: usize = 256;
const PEAK: f64 = 0.9;

/// Fundamental band of a source id in Hz. Bands grow geometrically and never
/// overlap: 100–160, 220–352, 484–774, ...
pub fn fundamental_band(source_id: usize) -> (f64, f64) {
    let g = 2.2f64.powi(source_id as i32);
    (100.0 * g, 160.0 * g)
}

/// A harmonic "speaker-like" signal: 3–6 harmonics of a fundamental drawn
/// from the source's band, 1/k amplitudes, a slow random envelope, peak 0.9.
pub fn synth_source(seed: u64, len: usize, source_id: usize) -> Result<Tensor> {
    if len < MIN_LEN {
        return Err(Error::invalid("synth_source", format!("length {len} < {MIN_LEN}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (source_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (lo, hi) = fundamental_band(source_id);
    let f0 = rng.random_range(lo..hi);
    let harmonics = rng.random_range(3..=6usize);
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|k| (k as f64 * f0, 1.0 / k as f64, rng.random_range(0.0..2.0 * PI)))
        .filter(|(f, _, _)| *f < 0.95 * nyquist)
        .collect();
    let env_rate = rng.random_range(0.5..3.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let env_depth = rng.random_range(0.1..0.5);

    let sr = SAMPLE_RATE as f64;
    let mut x: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 1.0 - env_depth * (0.5 + 0.5 * (2.0 * PI * env_rate * t + env_phase).sin());
            env * partials.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>()
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut x {
            *v = (*v * PEAK / peak).clamp(-PEAK, PEAK);
        }
    }
    Ok(Tensor::from_vec(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// One-pole low-pass filtered Gaussian noise.
    LowPass,
    /// No noise at all; `x_n == x_c`.
    Off,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(Self::White),
            "lowpass" => Ok(Self::LowPass),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("unknown noise kind `{s}` (white, lowpass, off)"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::White => "white",
            Self::LowPass => "lowpass",
            Self::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    /// Samples per waveform.
    pub len: usize,
    pub sources: usize,
    pub seed: u64,
    pub snr_mean_db: f64,
    pub snr_std_db: f64,
    pub noise: NoiseKind,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_train: 500,
            num_valid: 50,
            num_test: 50,
            len: 4000,
            sources: 2,
            seed: 0,
            snr_mean_db: -2.0,
            snr_std_db: 3.6,
            noise: NoiseKind::White,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.len < MIN_LEN {
            return Err(Error::Config(format!("len must be >= {MIN_LEN}")));
        }
        if self.sources == 0 {
            return Err(Error::Config("sources must be >= 1".into()));
        }
        if !(self.snr_std_db >= 0.0 && self.snr_std_db.is_finite() && self.snr_mean_db.is_finite()) {
            return Err(Error::Config("invalid SNR distribution".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed. For a fixed dataset seed the map (split, index) → seed
/// is injective, so split seed streams never overlap.
pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Valid => 1,
        Split::Test => 2,
    };
    splitmix64(dataset_seed) ^ (tag << 62) ^ (index as u64 & ((1 << 62) - 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub x_n: Tensor,
    pub x_c: Tensor,
    pub sources: Vec<Tensor>,
    /// `x_n − x_c`.
    pub noise: Tensor,
    pub sample_rate: u32,
    /// `10·log10(‖x_c‖² / ‖noise‖²)` of the stored fields.
    pub snr_db: f64,
    /// The SNR drawn for this sample.
    pub snr_drawn_db: f64,
}

impl MixtureSample {
    pub fn len(&self) -> usize {
        self.x_n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_n.is_empty()
    }
}

fn energy_db(signal: &[f64], noise: &[f64]) -> f64 {
    let s: f64 = signal.iter().map(|v| v * v).sum();
    let n: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (s / n).log10()
}

pub fn make_sample(spec: &DatasetSpec, seed: u64) -> Result<MixtureSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = Vec::with_capacity(spec.sources);
    for k in 0..spec.sources {
        let mut sub = rng.random::<u64>();
        let s = loop {
            let s = synth_source(sub, spec.len, k)?;
            if s.sq_norm() > 0.0 {
                break s;
            }
            sub = rng.random();
        };
        let gain_db: f64 = rng.random_range(-2.5..2.5);
        sources.push(s.map(|v| v * 10f64.powf(gain_db / 20.0)));
    }
    let mut x_c = vec![0.0; spec.len];
    for s in &sources {
        for (a, b) in x_c.iter_mut().zip(s.data()) {
            *a += b;
        }
    }

    let drawn = Normal::new(spec.snr_mean_db, spec.snr_std_db)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(&mut rng);
    let raw: Vec<f64> = match spec.noise {
        NoiseKind::Off => vec![0.0; spec.len],
        NoiseKind::White => (0..spec.len).map(|_| StandardNormal.sample(&mut rng)).collect(),
        NoiseKind::LowPass => {
            let mut y = 0.0;
            (0..spec.len)
                .map(|_| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    y = 0.9 * y + 0.1 * w;
                    y
                })
                .collect()
        }
    };
    let clean_energy: f64 = x_c.iter().map(|v| v * v).sum();
    let raw_energy: f64 = raw.iter().map(|v| v * v).sum();
    let scale = if raw_energy > 0.0 {
        (clean_energy / (raw_energy * 10f64.powf(drawn / 10.0))).sqrt()
    } else {
        0.0
    };
    let x_n: Vec<f64> = x_c.iter().zip(&raw).map(|(c, n)| c + scale * n).collect();
    let noise: Vec<f64> = x_n.iter().zip(&x_c).map(|(a, b)| a - b).collect();
    let snr_db = if scale > 0.0 {
        energy_db(&x_c, &noise)
    } else {
        f64::INFINITY
    };
    Ok(MixtureSample {
        x_n: Tensor::from_vec(x_n),
        x_c: Tensor::from_vec(x_c),
        sources,
        noise: Tensor::from_vec(noise),
        sample_rate: SAMPLE_RATE,
        snr_db,
        snr_drawn_db: if scale > 0.0 { drawn } else { f64::INFINITY },
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<MixtureSample>,
    pub valid: Vec<MixtureSample>,
    pub test: Vec<MixtureSample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let split = |s: Split, n: usize| -> Result<Vec<MixtureSample>> {
            (0..n).map(|i| make_sample(spec, sample_seed(spec.seed, s, i))).collect()
        };
        Ok(Self {
            spec: spec.clone(),
            train: split(Split::Train, spec.num_train)?,
            valid: split(Split::Valid, spec.num_valid)?,
            test: split(Split::Test, spec.num_test)?,
        })
    }

    pub fn split(&self, s: Split) -> &[MixtureSample] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Generates the dataset, or reads it from `dir` when a cache written for
    /// the same spec is present. A missing or stale cache is rewritten.
    pub fn load_or_generate(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let key = format!("{spec:?}\n");
        let key_path = dir.join("spec.txt");
        if std::fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) {
            let read = |s: Split, n: usize| -> Result<Vec<MixtureSample>> {
                (0..n).map(|i| load_sample(cache_path(dir, s, i))).collect()
            };
            if let (Ok(train), Ok(valid), Ok(test)) = (
                read(Split::Train, spec.num_train),
                read(Split::Valid, spec.num_valid),
                read(Split::Test, spec.num_test),
            ) {
                return Ok(Self { spec: spec.clone(), train, valid, test });
            }
        }
        let ds = Self::generate(spec)?;
        ds.write_cache(dir)?;
        std::fs::write(key_path, key)?;
        Ok(ds)
    }

    pub fn write_cache(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for s in Split::ALL {
            for (i, sample) in self.split(s).iter().enumerate() {
                save_sample(cache_path(dir, s, i), sample)?;
            }
        }
        Ok(())
    }
}

fn cache_path(dir: &Path, s: Split, i: usize) -> PathBuf {
    dir.join(format!("{}_{i:05}.bin", s.name()))
}

/// Writes one sample in the checkpoint container format.
pub fn save_sample(path: impl AsRef<Path>, s: &MixtureSample) -> Result<()> {
    let meta = Tensor::from_vec(vec![s.sample_rate as f64, s.snr_db, s.snr_drawn_db]);
    let names: Vec<String> = (0..s.sources.len()).map(|k| format!("source{k}")).collect();
    let mut records: Vec<(&str, &Tensor)> = vec![("meta", &meta), ("x_n", &s.x_n), ("x_c", &s.x_c), ("noise", &s.noise)];
    for (n, t) in names.iter().zip(&s.sources) {
        records.push((n, t));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, &records)
}

pub fn load_sample(path: impl AsRef<Path>) -> Result<MixtureSample> {
    let records = read_records(&mut BufReader::new(File::open(path)?))?;
    let mut it = records.into_iter();
    let mut take = |want: &str| -> Result<Tensor> {
        match it.next() {
            Some((n, t)) if n == want => Ok(t),
            other => Err(Error::Format(format!(
                "expected record `{want}`, found {:?}",
                other.map(|(n, _)| n)
            ))),
        }
    };
    let meta = take("meta")?;
    let (x_n, x_c, noise) = (take("x_n")?, take("x_c")?, take("noise")?);
    let sources: Vec<Tensor> = it.map(|(_, t)| t).collect();
    if meta.len() != 3 || sources.is_empty() {
        return Err(Error::Format("malformed sample record".into()));
    }
    Ok(MixtureSample {
        x_n,
        x_c,
        sources,
        noise,
        sample_rate: meta.data()[0] as u32,
        snr_db: meta.data()[1],
        snr_drawn_db: meta.data()[2],
    })
}

/// Reads a 16-bit PCM mono WAV file; samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<(Tensor, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!("unsupported channel count {}", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "unsupported encoding: {:?} {}-bit (16-bit PCM required)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let data = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(e.to_string()))?;
    if data.is_empty() {
        return Err(Error::Wav("no samples".into()));
    }
    Ok((Tensor::from_vec(data), spec.sample_rate))
}

/// Writes 16-bit PCM mono; values are scaled by 32768, rounded and clipped.
pub fn write_wav(path: impl AsRef<Path>, x: &Tensor, sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav = |e: hound::Error| Error::Wav(e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &v in x.data() {
        let q = (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(q).map_err(wav)?;
    }
    w.finalize().map_err(wav)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::spectrogram;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_train: 4,
            num_valid: 2,
            num_test: 2,
            len: 1000,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn source_contract() {
        let a = synth_source(3, 4000, 0).unwrap();
        assert_eq!(a, synth_source(3, 4000, 0).unwrap());
        let peak = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 0.9 && (peak - 0.9).abs() < 1e-12);
        assert!(synth_source(3, 100, 0).is_err());
    }

    #[test]
    fn sources_peak_in_their_own_bands() {
        let frame = 1024;
        let hz = |bin: usize| bin as f64 * SAMPLE_RATE as f64 / frame as f64;
        for seed in 0..8 {
            for id in 0..3 {
                let s = synth_source(seed, 4000, id).unwrap();
                let spec = spectrogram(s.data(), frame, 256).unwrap();
                let f = hz(spec.dominant_bin());
                let (lo, hi) = fundamental_band(id);
                // one bin of slack for the analysis resolution
                let slack = SAMPLE_RATE as f64 / frame as f64;
                assert!(f >= lo - slack && f <= hi + slack, "seed {seed} id {id}: {f} Hz");
            }
        }
        assert!(fundamental_band(0).1 < fundamental_band(1).0);
        assert!(fundamental_band(1).1 < fundamental_band(2).0);
    }

    #[test]
    fn sample_invariants() {
        let spec = small();
        for seed in 0..10 {
            let s = make_sample(&spec, seed).unwrap();
            let mut sum = vec![0.0; spec.len];
            for src in &s.sources {
                for (a, b) in sum.iter_mut().zip(src.data()) {
                    *a += b;
                }
            }
            assert_eq!(s.x_c.data(), &sum[..]);
            let diff: Vec<f64> = s.x_n.data().iter().zip(s.x_c.data()).map(|(a, b)| a - b).collect();
            assert_eq!(s.noise.data(), &diff[..]);
            assert!((s.snr_db - s.snr_drawn_db).abs() < 1e-6);
            assert!((energy_db(s.x_c.data(), s.noise.data()) - s.snr_db).abs() < 1e-12);
            assert!(s.sources.iter().all(|x| x.len() == spec.len));
        }
    }

    #[test]
    fn noise_off_is_clean() {
        let spec = DatasetSpec { noise: NoiseKind::Off, ..small() };
        let s = make_sample(&spec, 1).unwrap();
        assert_eq!(s.x_n, s.x_c);
        let spec = DatasetSpec { noise: NoiseKind::LowPass, ..small() };
        let s = make_sample(&spec, 1).unwrap();
        assert!((s.snr_db - s.snr_drawn_db).abs() < 1e-6);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for s in Split::ALL {
            for i in 0..1000 {
                assert!(seen.insert(sample_seed(42, s, i)));
            }
        }
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let a = Dataset::load_or_generate(&spec, dir.path()).unwrap();
        let b = Dataset::load_or_generate(&spec, dir.path()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = Dataset::load_or_generate(&DatasetSpec { seed: 9, ..spec }, dir.path()).unwrap();
        assert_ne!(c.train, a.train);
    }

    #[test]
    fn wav_contract() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x = Tensor::from_vec((-5..5).map(|k| k as f64 * 3000.0 / 32768.0).chain([32767.0 / 32768.0, -1.0]).collect());
        write_wav(&p, &x, 8000).unwrap();
        let (y, sr) = load_wav(&p).unwrap();
        assert_eq!(sr, 8000);
        assert_eq!(x, y);
        assert!((y.data()[10] - 0.99997).abs() < 1e-5);

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..4 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = load_wav(&stereo).unwrap_err().to_string();
        assert!(err.contains("unsupported channel count"), "{err}");

        std::fs::write(dir.path().join("bad.wav"), b"RIFFnope").unwrap();
        assert!(load_wav(dir.path().join("bad.wav")).is_err());
    }
}
