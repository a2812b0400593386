//! Binary checkpoint: a self-describing header followed by named arrays.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "FSAYOLO\0" | version | config length | config text (UTF-8)
//! | SHA-256 of config text (32 bytes) | array count
//! | per array: name length | name | rank | dims.. | f32 LE values..
//! ```

use std::path::Path;

use fsayolo_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"FSAYOLO\0";
pub const VERSION: u32 = 1;

pub fn config_hash(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let text = model.config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&config_hash(&text));
    put_u32(&mut out, model.store.len() as u32);
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Rebuilds the model described by the header and fills in every array.
/// The set of names and every shape must match the rebuilt model exactly.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let stored: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if stored != config_hash(text) {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let config = ModelConfig::from_text(text).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    let mut model = Model::new(config, 0)?;

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("{count} arrays, model has {}", model.store.len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown array `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("array `{name}` stored twice")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "array `{name}`: stored shape {shape:?}, model expects {:?}",
                model.store.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        model.store.set(id, Tensor::new(&shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
