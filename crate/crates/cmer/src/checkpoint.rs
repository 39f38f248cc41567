//! Binary checkpoint format. One file carries everything needed to resume a
//! run bit-for-bit: every parameter tensor, optimizer moments, both negative
//! queues, and a JSON metadata block (config, vocabulary, counters).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CMCK"  u32 version
//! u32 meta_len   meta JSON bytes
//! u32 n_tensors
//! repeat n_tensors (sorted by name):
//!   u32 name_len  name bytes
//!   u32 ndim      u32 dim ...
//!   f64 payload (row-major)
//! ```
//!
//! Tensors are stored in map order, metadata maps are ordered, and floats
//! round-trip exactly, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable snapshot of one negative queue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueState {
    pub capacity: usize,
    pub scenes: Vec<usize>,
    pub ages: Vec<u64>,
    pub pushed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub step: u64,
    pub seed: u64,
    pub adam_t: u64,
    pub best_val_mr: f64,
    pub vocab: BTreeMap<String, usize>,
    pub queue_v: QueueState,
    pub queue_s: QueueState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// name -> (shape, row-major data); includes parameters, `adam.m.*` and
    /// `adam.v.*` moments, and `queue_*.embeddings` banks.
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn push_u32(buf: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Checkpoint(format!("field {x} exceeds u32")))?;
    buf.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        push_u32(&mut buf, meta.len())?;
        buf.extend_from_slice(&meta);
        push_u32(&mut buf, self.tensors.len())?;
        for (name, (shape, data)) in &self.tensors {
            let numel: usize = shape.iter().product();
            if numel != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {shape:?} does not match {} values",
                    data.len()
                )));
            }
            push_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            push_u32(&mut buf, shape.len())?;
            for &d in shape {
                push_u32(&mut buf, d)?;
            }
            for &x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = cur.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
        let n_tensors = cur.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("tensor name not utf-8: {e}")))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}
