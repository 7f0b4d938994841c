//! Binary checkpoint container, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "KDCKPT\0\0"
//! version  u32
//! config   u64 length, then UTF-8 JSON of ModelConfig
//! count    u64 number of arrays
//! array    u32 name length, name bytes, u32 ndim, ndim × u64 dims,
//!          product(dims) × f64 values
//! ```
//!
//! Arrays are written in name order, so identical models give identical bytes.

use std::path::Path;

use super::{Decoder, ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Decoder {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.params.count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.params.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let count = r.u64()?;
        let mut params = ModelParams::default();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| ModelError::Checkpoint("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Decoder::from_parts(config, params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, model: &Decoder) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Decoder> {
    Decoder::from_bytes(&std::fs::read(path)?)
}
