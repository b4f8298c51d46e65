//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DNLB1"
//! u32 config_len, config_len bytes of ModelConfig JSON
//! u32 n_params
//! n_params times:
//!     u32 name_len, name (UTF-8)
//!     u32 ndim, ndim x u64 dims
//!     product(dims) x f64
//! ```
//!
//! Parameters appear in [`ModelConfig::param_layout`] order. Trailing bytes are
//! rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::init::ParamSet;
use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DNLB1";

const MAX_NDIM: usize = 8;
const MAX_NAME_LEN: usize = 4096;

pub fn encode(model: &TransformerModel) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(&model.cfg)?;
    let mut out = Vec::with_capacity(64 + cfg.len() + model.params.count() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape.len())?;
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::contract(format!("{n} does not fit the checkpoint's u32 field")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

/// Decodes and validates a checkpoint. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<TransformerModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("missing DNLB1 magic"));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| bad(format!("config JSON: {e}")))?;
    cfg.validate()?;
    let layout = cfg.param_layout();
    let n = r.u32()? as usize;
    if n != layout.len() {
        return Err(bad(format!("expected {} tensors, header says {n}", layout.len())));
    }
    let mut params = ParamSet::default();
    for (want, role) in &layout {
        let name_len = r.u32()? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(bad(format!("parameter name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        if name != want {
            return Err(bad(format!("expected parameter `{want}`, found `{name}`")));
        }
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(bad(format!("`{name}` has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64()?).map_err(|_| bad("dimension overflows usize"))?;
            numel = numel.checked_mul(d).ok_or_else(|| bad("element count overflows"))?;
            shape.push(d);
        }
        if shape != role.shape() {
            return Err(bad(format!("`{name}` has shape {shape:?}, expected {:?}", role.shape())));
        }
        let nbytes = numel.checked_mul(8).ok_or_else(|| bad("byte count overflows"))?;
        let data = r
            .take(nbytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.push(name, *role, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    TransformerModel::from_params(cfg, params)
}

pub fn save(model: &TransformerModel, path: &Path) -> Result<()> {
    crate::report::write_atomic(path, &encode(model)?)
}

pub fn load(path: &Path) -> Result<TransformerModel> {
    decode(&fs::read(path)?)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
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
            .ok_or_else(|| bad(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
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
}
