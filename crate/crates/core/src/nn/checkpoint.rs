//! Binary weight container:
//!
//! ```text
//! magic "SSCDWGT\0" | u32 version | u32 len, config text | u32 count
//! count x (u32 len, name | u32 rank | rank x u32 extent | f32 payload)
//! ```
//!
//! All integers and floats are little-endian. The config text is the
//! model's `key=value` echo; a copy is also written next to the file with a
//! `.cfg` suffix.

use std::fs;
use std::path::{Path, PathBuf};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::config::{Architecture, ModelKind};
use crate::nn::model::Model;

pub const MAGIC: &[u8; 8] = b"SSCDWGT\0";
pub const VERSION: u32 = 1;

/// Serialized checkpoint bytes.
pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = model.architecture().to_kv().to_text();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params().iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.tensor.shape().len() as u32);
        for &e in p.tensor.shape() {
            put_u32(&mut out, e as u32);
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))?;
    let cfg = config_path(path);
    fs::write(&cfg, model.architecture().to_kv().to_text()).map_err(|e| Error::io(&cfg, e))
}

pub fn load_weights(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}

/// Load and insist on a particular network kind.
pub fn load_weights_as(path: &Path, kind: ModelKind) -> Result<Model> {
    let model = load_weights(path)?;
    if model.kind() != kind {
        return Err(Error::CheckpointMismatch {
            expected: kind.to_string(),
            found: model.kind().to_string(),
        });
    }
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            offset: start,
            detail: format!("{what} is not UTF-8"),
        })
    }
}

/// Parse checkpoint bytes; `path` only labels errors.
pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch {
            expected: format!("format version {VERSION}"),
            found: format!("format version {version}"),
        });
    }
    let cfg_at = r.pos;
    let cfg = r.string("config echo")?;
    let arch = KvMap::parse(&cfg).and_then(|kv| Architecture::from_kv(&kv)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: cfg_at,
        detail: format!("config echo: {e}"),
    })?;
    let mut model = Model::build(arch, 0)?;
    let count = r.u32("record count")? as usize;
    if count != model.params().len() {
        return Err(r.fail(format!("expected {} records, found {count}", model.params().len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for p in model.params().iter() {
        let at = r.pos;
        let name = r.string("record name")?;
        if name != p.name {
            r.pos = at;
            return Err(r.fail(format!("expected record `{}`, found `{name}`", p.name)));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        if shape != p.tensor.shape() {
            return Err(r.fail(format!("`{name}` has shape {shape:?}, expected {:?}", p.tensor.shape())));
        }
        let numel = p.tensor.numel();
        let payload = r.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        loaded.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for (p, t) in model.params_mut().entries_mut().iter_mut().zip(loaded) {
        p.tensor = t;
    }
    Ok(model)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
