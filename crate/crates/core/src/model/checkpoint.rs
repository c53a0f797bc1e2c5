//! Checkpoint files.
//!
//! Layout (integers are little-endian `u32`):
//!
//! ```text
//! magic       "DRAMCKPT1\0"
//! meta_len    then meta_len bytes of TOML: network config, kind, attention
//! echo_len    then echo_len bytes of UTF-8: the resolved run configuration
//! count       number of parameter blocks, then per block:
//!   name_len, name (UTF-8)
//!   ndim, ndim × dim
//!   prod(dims) × f32 little-endian values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, ModelSpec, NetworkConfig};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"DRAMCKPT1\0";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: ModelKind,
    attention: bool,
    network: NetworkConfig,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(model: &Model<f32>, echo: &str) -> Vec<u8> {
    let meta = Meta {
        kind: model.kind,
        attention: model.attention.is_some(),
        network: model.config().clone(),
    };
    let meta = toml::to_string(&meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_str(&mut out, &meta);
    put_str(&mut out, echo);
    let params = model.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.shape.len());
        for &d in &p.shape {
            put_u32(&mut out, d);
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, echo: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(model, echo)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }
}

fn read_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(Reader<'a>, Meta, String)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let meta: Meta = toml::from_str(&r.string()?).map_err(|e| Error::format(path, e.to_string()))?;
    let echo = r.string()?;
    Ok((r, meta, echo))
}

/// Network configuration, model spec and config echo of a checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> Result<(NetworkConfig, ModelSpec, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta, echo) = read_header(&bytes, path)?;
    Ok((
        meta.network,
        ModelSpec {
            kind: meta.kind,
            attention: meta.attention,
        },
        echo,
    ))
}

/// Loads a model and the configuration echo stored with it.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut r, meta, echo) = read_header(&bytes, path)?;
    let spec = ModelSpec {
        kind: meta.kind,
        attention: meta.attention,
    };
    let mut model = Model::<f32>::new(&meta.network, spec, 0)?;
    let count = r.u32()?;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::format(path, format!("{count} parameter blocks, expected {}", params.len())));
    }
    for p in params.iter_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(Error::format(path, format!("block {name} where {} was expected", p.name)));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != p.shape {
            return Err(Error::format(path, format!("{name}: shape {shape:?}, expected {:?}", p.shape)));
        }
        let raw = r.take(p.value.len() * 4)?;
        for (v, c) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameter blocks"));
    }
    Ok((model, echo))
}
