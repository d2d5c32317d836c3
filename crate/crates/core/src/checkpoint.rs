//! Binary checkpoints: named tensor groups plus a JSON metadata record.
//!
//! Layout: magic, version, header length, JSON header (dtype, metadata and
//! every tensor's group, name and shape), little-endian element data in
//! header order, then a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vbpt_autodiff::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"VBPTCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    groups: Vec<(String, Vec<Entry>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub meta: serde_json::Value,
    pub groups: Vec<(String, ParamStore<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, groups: Vec::new() }
    }

    pub fn with(mut self, name: &str, store: ParamStore<T>) -> Self {
        self.groups.push((name.to_string(), store));
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore<T>> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("missing group `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            groups: self
                .groups
                .iter()
                .map(|(g, s)| (g.clone(), s.iter().map(|(n, t)| Entry { name: n.to_string(), shape: t.shape().to_vec() }).collect()))
                .collect(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, s) in &self.groups {
            for t in s.tensors() {
                for &x in t.data() {
                    x.write_le(&mut out);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("stored dtype {} differs from requested {}", header.dtype, T::DTYPE)));
        }
        let mut pos = hend;
        let mut groups = Vec::new();
        for (g, entries) in header.groups {
            let mut store = ParamStore::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let end = pos + n * T::BYTES;
                if end > body.len() {
                    return Err(bad("truncated data"));
                }
                let data = body[pos..end].chunks_exact(T::BYTES).map(T::read_le).collect();
                store.push(e.name, Tensor::new(data, &e.shape)?);
                pos = end;
            }
            groups.push((g, store));
        }
        if pos != body.len() {
            return Err(bad("trailing bytes after data"));
        }
        Ok(Checkpoint { meta: header.meta, groups })
    }

    /// Writes through a temporary file and a rename, so a crash never
    /// leaves a half-written checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A flat vector shaped like `like`, as a store (optimizer moments).
pub fn store_like<T: Scalar>(like: &ParamStore<T>, flat: &[T]) -> Result<ParamStore<T>> {
    let mut s = like.clone();
    s.set_flat(flat)?;
    Ok(s)
}
