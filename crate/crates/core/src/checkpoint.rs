//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "EGNZCKPT"
//! version    u32       currently 1
//! kind       str       e.g. "vae" or "ego-mnmf"
//! n_meta     u32       followed by n_meta (key: str, value: str) pairs
//! n_tensors  u32       followed by n_tensors tensors:
//!   name     str
//!   ndim     u32
//!   dims     ndim x u64
//!   data     prod(dims) x f64, row-major
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8 bytes. Complex tensors are
//! stored with a trailing dimension of 2 holding (re, im).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EGNZCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint kind is `{found}`, expected `{expected}`")]
    WrongKind { expected: String, found: String },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("checkpoint entry `{name}` has shape {found:?}, expected {expected}")]
    BadShape { name: String, found: Vec<usize>, expected: String },
    #[error("checkpoint entry `{0}` is invalid")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor size mismatch");
        Self { dims, data }
    }
}

/// In-memory checkpoint: a kind tag, string metadata and named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), ..Default::default() }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize, CheckpointError> {
        self.meta(key)?.parse().map_err(|_| CheckpointError::Invalid(key.to_string()))
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) {
        self.tensors.insert(name.to_string(), Tensor::new(dims, data));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Fetches a tensor and checks its shape.
    pub fn tensor_shaped(&self, name: &str, dims: &[usize]) -> Result<&Tensor, CheckpointError> {
        let t = self.tensor(name)?;
        if t.dims != dims {
            return Err(CheckpointError::BadShape {
                name: name.to_string(),
                found: t.dims.clone(),
                expected: format!("{dims:?}"),
            });
        }
        Ok(t)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind { expected: kind.to_string(), found: self.kind.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let kind = r.string("kind")?;
        let mut ck = Checkpoint::new(&kind);
        for _ in 0..r.u32("meta count")? {
            let k = r.string("meta key")?;
            let v = r.string("meta value")?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor name")?;
            let ndim = r.u32("tensor rank")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64("tensor dims")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or(CheckpointError::Truncated("tensor dims"))?;
            let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            ck.tensors.insert(name, Tensor { dims, data });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CheckpointError::Invalid(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut ck = Checkpoint::new("vae");
        ck.set_meta("latent_dim", 3);
        ck.insert("w", vec![2, 3], vec![1.0, -2.5, f64::MIN_POSITIVE, 0.1, 1e300, -0.0]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_usize("latent_dim").unwrap(), 3);
    }

    #[test]
    fn corrupt_input_is_reported() {
        let mut ck = Checkpoint::new("vae");
        ck.insert("w", vec![4], vec![1.0; 4]);
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPTxxxx"), Err(CheckpointError::BadMagic)));
        assert!(matches!(ck.expect_kind("ego-mnmf"), Err(CheckpointError::WrongKind { .. })));
        assert!(ck.tensor_shaped("w", &[2, 2]).is_err());
    }
}
