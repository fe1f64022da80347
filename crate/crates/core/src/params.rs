//! Named trainable parameters and the on-disk record container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "USGM"
//! version  u8       1
//! count    u32      number of records
//! record:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim × u64)
//!   values   product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"USGM";
pub const VERSION: u8 = 1;

/// One trainable tensor with its gradient slot and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        }
    }
}

/// Insertion-ordered map from layer name to parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<(&str, &Tensor)> = self.iter().map(|(n, p)| (n, &p.value)).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_records(&mut f, &records)?;
        f.flush()?;
        Ok(())
    }

    /// Overwrites values of an existing store from a checkpoint. Every stored
    /// parameter must be present in the file with a matching shape.
    pub fn load_values(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records: IndexMap<String, Tensor> = read_records(&mut f)?.into_iter().collect();
        for (name, p) in self.params.iter_mut() {
            let t = records
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_values", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

pub fn write_records<W: Write>(w: &mut W, records: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version[0])));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// FNV-1a, used to give every parameter its own seed stream so that shared
/// layers initialize identically regardless of which other layers exist.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, seeded by `(seed, name)`.
pub fn uniform_init(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_preserves_bits() {
        let a = Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap();
        let s = Tensor::scalar(0.1);
        let mut buf = Vec::new();
        write_records(&mut buf, &[("a", &a), ("s", &s)]).unwrap();
        assert_eq!(&buf[..4], b"USGM");
        assert_eq!(buf[4], 1);
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "a");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\0\0\0\0".to_vec();
        assert!(matches!(read_records(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn init_is_seeded_per_name() {
        let a = uniform_init(7, "x.weight", &[4, 4], 4);
        let b = uniform_init(7, "x.weight", &[4, 4], 4);
        let c = uniform_init(7, "y.weight", &[4, 4], 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn store_keeps_insertion_order() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(vec![1]));
        s.insert("a", Tensor::zeros(vec![2]));
        assert_eq!(s.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(s.get("a").unwrap().grad.shape(), &[2]);
        assert_eq!(s.num_values(), 3);
    }
}
