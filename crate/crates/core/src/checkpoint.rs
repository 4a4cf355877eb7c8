//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `"PLUSCKPT"`, `u32` version, `u64` config length + config JSON, `u64` epoch,
//! `u32` parameter count, then per parameter `u32` name length + name, `u32`
//! rank, `u64` extents, `f32` values; then `u64` optimizer step followed by
//! the first and second moments of every parameter as `f32` blobs in
//! parameter order.

use std::path::Path;

use plus_autodiff::{Scalar, Tensor};

use crate::config::RunConfig;
use crate::error::{PlusError, Result};
use crate::nn::ParamSet;
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"PLUSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub params: ParamSet<f32>,
    pub optimizer: AdamState<f32>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(config: &RunConfig, epoch: u64, params: &ParamSet<T>, optimizer: &AdamState<T>) -> Self {
        Checkpoint { config: config.clone(), epoch, params: params.cast(), optimizer: optimizer.cast() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put_floats(&mut out, m.data());
            put_floats(&mut out, v.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(PlusError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(PlusError::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let cfg_len = r.u64()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| PlusError::Checkpoint(format!("embedded config is invalid: {e}")))?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new(config.seeds.init);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| PlusError::Checkpoint("parameter name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let t = Tensor::new(&shape, r.floats(n)?).map_err(|e| PlusError::Checkpoint(e.to_string()))?;
            params.insert(name, t).map_err(|e| PlusError::Checkpoint(e.to_string()))?;
        }
        let step = r.u64()?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for t in params.tensors() {
            m.push(Tensor::new(t.shape(), r.floats(t.numel())?).expect("sized"));
            v.push(Tensor::new(t.shape(), r.floats(t.numel())?).expect("sized"));
        }
        if r.pos != bytes.len() {
            return Err(PlusError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, epoch, params, optimizer: AdamState { step, m, v } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| PlusError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| PlusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PlusError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PlusError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| PlusError::Checkpoint("oversized tensor".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
