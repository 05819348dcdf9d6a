//! Single-file checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "RXTCKPT\0"
//! version      u32
//! kind         u32 length + UTF-8 ("rxt" | "baseline")
//! config       u32 length + canonical JSON
//! config_hash  u64      CRC-64 of the config JSON
//! rng          u32 length + JSON (empty when absent)
//! n_tensors    u32
//! per tensor   u32 name length, name, u32 ndim, u64 dims…, f64 data…
//! checksum     u64      CRC-64 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::crc64;
use crate::model::{Baseline, ModelConfig, Rxt};
use crate::numcore::{ParamStore, RngState, Tensor};

const MAGIC: &[u8; 8] = b"RXTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// A model that can be rebuilt from its config and then filled with stored
/// parameters.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    fn build(config: ModelConfig) -> Result<Self>;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Checkpointable for Rxt {
    const KIND: &'static str = "rxt";
    fn build(config: ModelConfig) -> Result<Self> {
        Rxt::new(config)
    }
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Checkpointable for Baseline {
    const KIND: &'static str = "baseline";
    fn build(config: ModelConfig) -> Result<Self> {
        Baseline::new(config)
    }
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn to_bytes<M: Checkpointable>(model: &M, rng: Option<&RngState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut out, M::KIND.as_bytes());
    let cfg = model.config().canonical_json();
    put_bytes(&mut out, cfg.as_bytes());
    out.extend_from_slice(&crc64(cfg.as_bytes()).to_le_bytes());
    let rng = rng.map(|s| serde_json::to_string(s).expect("rng state serialises")).unwrap_or_default();
    put_bytes(&mut out, rng.as_bytes());
    let store = model.params();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        put_bytes(&mut out, store.name(id).as_bytes());
        let t = store.get(id);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = crc64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save<M: Checkpointable>(model: &M, rng: Option<&RngState>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, rng);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Parses and verifies a checkpoint image. Nothing is built unless the
/// checksum, version, kind, and every tensor check out.
pub fn from_bytes<M: Checkpointable>(bytes: &[u8]) -> Result<(M, Option<RngState>)> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if crc64(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let kind = r.string()?;
    if kind != M::KIND {
        return Err(Error::Checkpoint(format!("holds a {kind} model, expected {}", M::KIND)));
    }
    let cfg_text = r.string()?;
    let hash = r.u64()?;
    if crc64(cfg_text.as_bytes()) != hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let config: ModelConfig = serde_json::from_str(cfg_text)?;
    let rng_text = r.string()?;
    let rng = if rng_text.is_empty() {
        None
    } else {
        Some(serde_json::from_str(rng_text)?)
    };
    let mut model = M::build(config)?;
    let n = r.u32()? as usize;
    if n != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{n} tensors stored, model has {}",
            model.params().len()
        )));
    }
    let mut loaded = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        loaded.push((id, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    for (id, t) in loaded {
        model.params_mut().set(id, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok((model, rng))
}

pub fn load<M: Checkpointable>(path: &Path) -> Result<(M, Option<RngState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint only if it was written for exactly `expected`.
pub fn load_expecting<M: Checkpointable>(path: &Path, expected: &ModelConfig) -> Result<(M, Option<RngState>)> {
    let (model, rng) = load::<M>(path)?;
    if model.config().hash() != expected.hash() {
        return Err(Error::Checkpoint(format!(
            "config hash {:016x} does not match expected {:016x}",
            model.config().hash(),
            expected.hash()
        )));
    }
    Ok((model, rng))
}
