//! Model checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "RGCKPT\0\0"
//! version    u32      CKPT_VERSION
//! meta_len   u32
//! meta       meta_len bytes of JSON: {"kind", "seed", "config", "extra"?}
//! count      u32      number of tensors
//! count x tensor:
//!   name_len u32, name (UTF-8), trainable u8, ndim u32, ndim x u64 dims,
//!   prod(dims) x f64 values
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Listener, ModelConfig, Speaker};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"RGCKPT\0\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: String,
    seed: u64,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub config: ModelConfig,
    /// Free-form metadata; `Null` for plain model checkpoints.
    pub extra: serde_json::Value,
    pub params: ParamStore,
}

fn encode(
    kind: &str,
    config: &ModelConfig,
    seed: u64,
    params: &ParamStore,
    extra: serde_json::Value,
) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        kind: kind.to_string(),
        seed,
        config: config.clone(),
        extra,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.requires_grad() as u8);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes to a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, kind: &str, config: &ModelConfig, seed: u64, params: &ParamStore) -> Result<()> {
    save_checkpoint_with(path, kind, config, seed, params, serde_json::Value::Null)
}

pub fn save_checkpoint_with(
    path: &Path,
    kind: &str,
    config: &ModelConfig,
    seed: u64,
    params: &ParamStore,
    extra: serde_json::Value,
) -> Result<()> {
    write_atomic(path, &encode(kind, config, seed, params, extra)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: wanted {n} more bytes")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(r.fail("bad magic"));
    }
    r.pos = 8;
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(r.fail(format!("unsupported version {version}, expected {CKPT_VERSION}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.fail(format!("bad metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let trainable = r.take(1)?[0] != 0;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(trainable);
        params.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(Checkpoint {
        kind: meta.kind,
        seed: meta.seed,
        config: meta.config,
        extra: meta.extra,
        params,
    })
}

/// Copies checkpoint tensors over a freshly built store, name by name.
fn restore(target: &mut ParamStore, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    restore_params(target, &ckpt.params, path)
}

pub(crate) fn restore_params(target: &mut ParamStore, source: &ParamStore, path: &Path) -> Result<()> {
    restore_from(target, source, path, true)
}

/// Copies every tensor of `target` from the same-named tensor of `source`;
/// `source` may hold extra entries only when `strict` is off.
pub(crate) fn restore_from(target: &mut ParamStore, source: &ParamStore, path: &Path, strict: bool) -> Result<()> {
    if strict && target.len() != source.len() {
        return Err(Error::Invalid(format!(
            "{}: checkpoint has {} tensors, model expects {}",
            path.display(),
            source.len(),
            target.len()
        )));
    }
    for (name, t) in target.iter_mut() {
        let src = source
            .by_name(name)
            .ok_or_else(|| Error::Invalid(format!("{}: missing tensor {name}", path.display())))?;
        if src.shape() != t.shape() {
            return Err(Error::Invalid(format!(
                "{}: tensor {name} has shape {:?}, model expects {:?}",
                path.display(),
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

fn expect_kind(ckpt: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::Invalid(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            ckpt.kind
        )));
    }
    Ok(())
}

impl Listener {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "listener", &self.config, self.seed, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        expect_kind(&ckpt, "listener", path)?;
        let mut out = Listener::build(&ckpt.config, ckpt.seed)?;
        restore(&mut out.params, &ckpt, path)?;
        Ok(out)
    }
}

impl Speaker {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "speaker", &self.config, self.seed, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        expect_kind(&ckpt, "speaker", path)?;
        let mut out = Speaker::build(&ckpt.config, ckpt.seed)?;
        restore(&mut out.params, &ckpt, path)?;
        Ok(out)
    }
}
