//! Model checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"L2HC"  u32 version
//! u32 metadata length, metadata as UTF-8 JSON
//! u32 parameter count, then per parameter:
//!   u32 name length, name (UTF-8), u32 rank, rank x u64 dims, f32 payload
//! ```
//!
//! Parameters are written in the model's visiting order. Loading rebuilds the
//! model from the metadata and fills every parameter by name.

use std::fs;
use std::path::Path;

use densim_tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, Module, NetConfig};

pub const MAGIC: &[u8; 4] = b"L2HC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub net: NetConfig,
    pub low_frozen: bool,
    pub ldcm_trainable: bool,
    pub has_high: bool,
    pub seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes<T: Elem>(model: &Model<T>, seed: u64) -> Result<Vec<u8>> {
    let meta = Metadata {
        net: model.config.clone(),
        low_frozen: model.low.frozen,
        ldcm_trainable: model.ldcm.trainable,
        has_high: model.high.is_some(),
        seed,
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    let mut params = Vec::new();
    model.visit(&mut |p| params.push((p.name.clone(), p.value.cast::<f32>())));
    put_u32(&mut out, params.len())?;
    for (name, t) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("dimension {v} too large")))
    }
}

pub fn from_bytes<T: Elem>(bytes: &[u8]) -> Result<(Model<T>, Metadata)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
    let mut model = Model::new_low(meta.net.clone(), meta.seed)?;
    if meta.has_high {
        model.attach_high(meta.seed)?;
    }
    model.low.frozen = meta.low_frozen;
    model.ldcm.trainable = meta.ldcm_trainable;

    let count = r.u32()?;
    let mut stored = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if stored.insert(name.to_string(), Tensor::new(shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut err = None;
    let mut used = 0;
    model.visit_mut(&mut |p| match stored.get(&p.name) {
        Some(t) if t.shape() == p.value.shape() => {
            p.value = t.cast();
            used += 1;
        }
        Some(t) => {
            err.get_or_insert(Error::Format(format!("`{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
        }
        None => {
            err.get_or_insert(Error::Format(format!("missing parameter `{}`", p.name)));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != stored.len() {
        return Err(Error::Format(format!("{} unexpected parameters", stored.len() - used)));
    }
    Ok((model, meta))
}

pub fn save<T: Elem>(model: &Model<T>, seed: u64, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model, seed)?)?;
    Ok(())
}

/// Reads a checkpoint; a missing file is reported as [`Error::ModelNotLoaded`].
pub fn load<T: Elem>(path: &Path) -> Result<(Model<T>, Metadata)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ModelNotLoaded(format!("no checkpoint at {}", path.display())),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
