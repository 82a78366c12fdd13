//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "M2CK" | version u16
//! metadata: u32 length, UTF-8 TOML (run config and training state)
//! manifest: u32 count, then per tensor
//!     u16 name length, name, u8 dtype (0 = f32), u8 rank, u32 dims..., u64 offset
//! payload: f32 values, offsets relative to the payload start
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"M2CK";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub step: usize,
    pub adam_t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    state: TrainingState,
    config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainingState,
    /// Named tensors in write order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = toml::to_string_pretty(&Metadata {
            state: self.state.clone(),
            config: self.config.clone(),
        })
        .expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason.to_string());
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not a checkpoint (magic mismatch)"));
        }
        let version = r.u16().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32().ok_or_else(|| bad("truncated metadata"))? as usize;
        let meta = std::str::from_utf8(r.take(meta_len).ok_or_else(|| bad("truncated metadata"))?)
            .map_err(|_| bad("metadata is not UTF-8"))?;
        let meta: Metadata = toml::from_str(meta).map_err(|e| bad(&e.to_string()))?;
        meta.config.validate()?;
        let count = r.u32().ok_or_else(|| bad("truncated manifest"))? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = (|| {
                let n = r.u16()? as usize;
                let name = String::from_utf8(r.take(n)?.to_vec()).ok()?;
                let dtype = r.take(1)?[0];
                let rank = r.take(1)?[0] as usize;
                let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
                let offset = r.u64()? as usize;
                Some((name, dtype, dims, offset))
            })()
            .ok_or_else(|| bad("truncated manifest"))?;
            manifest.push(entry);
        }
        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        for (name, dtype, dims, offset) in manifest {
            if dtype != DTYPE_F32 {
                return Err(bad(&format!("tensor {name}: unknown dtype {dtype}")));
            }
            let n: usize = dims.iter().product();
            let chunk = payload
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(&format!("tensor {name} runs past the payload")))?;
            let data = chunk
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        Ok(Checkpoint {
            config: meta.config,
            state: meta.state,
            tensors,
        })
    }

    /// Write via a temporary sibling file and rename, so readers never see
    /// a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?))
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
