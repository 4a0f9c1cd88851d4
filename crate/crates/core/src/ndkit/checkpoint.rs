//! Versioned tensor container.
//!
//! Layout: magic `NCKP`, u32 format version, u64 manifest length, the JSON
//! manifest (tensor names, shapes, dtype and free-form metadata), then each
//! tensor's values as raw little-endian f64 in manifest order. All integers
//! are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NCKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            dtype: DTYPE.into(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| bad(&e.to_string()))?;
        if manifest.dtype != DTYPE {
            return Err(bad(&format!("unsupported dtype {}", manifest.dtype)));
        }
        let mut rest = &body[mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if rest.len() < n * 8 {
                return Err(bad(&format!("truncated payload for `{}`", e.name)));
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[n * 8..];
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint { meta: manifest.meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"kind": "test", "n": 3}));
        c.push("a", Tensor::from_vec(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.push("b", Tensor::vector(vec![0.1]));
        c.push("empty", Tensor::zeros(&[0]));
        c
    }

    #[test]
    fn byte_exact_reload() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"NCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), 0.1);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
