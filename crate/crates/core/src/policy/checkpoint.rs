//! Versioned, checksummed parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MOALCKPT"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen     {"kind", "dims", "alphabet", "separator", "meta", "tensors": [{"name", "shape"}]}
//! data     f64 LE   every tensor in header order
//! checksum 32 bytes SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelDims, ModelError, TokenizerSpec};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"MOALCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    dims: ModelDims,
    alphabet: String,
    separator: char,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub dims: ModelDims,
    pub tokenizer: TokenizerSpec,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = Header {
            kind: self.kind.clone(),
            dims: self.dims.clone(),
            alphabet: self.tokenizer.alphabet(),
            separator: self.tokenizer.separator_char(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let hjson = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 4 + 32 {
            return Err(bad("file too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(ModelError::ChecksumMismatch);
        }
        if &body[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let hend = 16 + hlen;
        if body.len() < hend {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[16..hend]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let tokenizer = TokenizerSpec::from_alphabet(&header.alphabet, header.separator)?;
        let mut offset = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            if body.len() < end {
                return Err(bad("truncated tensor data"));
            }
            let data = body[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            offset = end;
        }
        if offset != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { kind: header.kind, dims: header.dims, tokenizer, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Removes and returns the tensor named `name`.
    pub fn take(&mut self, name: &str) -> Result<Tensor, ModelError> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }

    /// Takes tensors `prefix.<name>` for every backbone name in order.
    pub fn take_prefixed(&mut self, prefix: &str, names: &[String]) -> Result<Vec<Tensor>, ModelError> {
        names.iter().map(|n| self.take(&format!("{prefix}.{n}"))).collect()
    }
}
