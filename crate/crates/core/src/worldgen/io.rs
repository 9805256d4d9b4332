//! Dataset split container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "RGSPLIT\0"
//! version      u32       SPLIT_VERSION
//! resolution   u32
//! count        u32       number of games
//! n_images     u32       images per game
//! seed         u64
//! id_len       u32       byte length of split_id
//! split_id     id_len bytes, UTF-8
//! count x game record:
//!   target     u32
//!   cap_len    u32
//!   caption    cap_len x u32   small-vocabulary token ids
//!   n_images x spec:  shape u8, color u8, x f64, y f64, size f64
//!   n_images x pixels: resolution*resolution*3 f64, row-major HWC
//! ```
//!
//! The content hash is SHA-256 over exactly these bytes.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{render, Color, DatasetSplit, Image, ReferenceGame, SceneSpec, Shape};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

pub const SPLIT_MAGIC: &[u8; 8] = b"RGSPLIT\0";
pub const SPLIT_VERSION: u32 = 1;

fn write_split<W: Write>(split: &DatasetSplit, w: &mut W) -> std::io::Result<()> {
    let vocab = Vocab::small();
    let n_images = split.n_images();
    w.write_all(SPLIT_MAGIC)?;
    w.write_all(&SPLIT_VERSION.to_le_bytes())?;
    w.write_all(&(split.resolution as u32).to_le_bytes())?;
    w.write_all(&(split.games.len() as u32).to_le_bytes())?;
    w.write_all(&(n_images as u32).to_le_bytes())?;
    w.write_all(&split.seed.to_le_bytes())?;
    w.write_all(&(split.split_id.len() as u32).to_le_bytes())?;
    w.write_all(split.split_id.as_bytes())?;
    let mut buf = Vec::new();
    for g in &split.games {
        buf.clear();
        buf.extend_from_slice(&(g.target_index as u32).to_le_bytes());
        buf.extend_from_slice(&(g.caption.len() as u32).to_le_bytes());
        for t in &g.caption {
            let id = vocab.id(t).expect("captions use the small vocabulary");
            buf.extend_from_slice(&(id as u32).to_le_bytes());
        }
        for s in &g.specs {
            buf.push(s.shape as u8);
            buf.push(s.color as u8);
            for v in [s.x, s.y, s.size] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for img in &g.images {
            for p in &img.pixels {
                buf.extend_from_slice(&p.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

pub(super) fn content_hash(split: &DatasetSplit) -> String {
    let mut h = HashWriter(Sha256::new());
    write_split(split, &mut h).expect("hashing cannot fail");
    hex::encode(h.0.finalize())
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_split(split, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
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
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_split(&bytes, path)
}

fn parse_split(bytes: &[u8], path: &Path) -> Result<DatasetSplit> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8).map_err(|_| c.fail("bad magic"))? != SPLIT_MAGIC {
        c.pos = 0;
        return Err(c.fail("bad magic"));
    }
    let version = c.u32()?;
    if version != SPLIT_VERSION {
        return Err(c.fail(format!("unsupported version {version}, expected {SPLIT_VERSION}")));
    }
    let resolution = c.u32()? as usize;
    let count = c.u32()? as usize;
    let n_images = c.u32()? as usize;
    let seed = c.u64()?;
    let id_len = c.u32()? as usize;
    let split_id = std::str::from_utf8(c.take(id_len)?)
        .map_err(|_| c.fail("split id is not UTF-8"))?
        .to_string();
    let vocab = Vocab::small();
    let mut games = Vec::with_capacity(count);
    for _ in 0..count {
        let target_index = c.u32()? as usize;
        if target_index >= n_images {
            return Err(c.fail(format!("target {target_index} out of range")));
        }
        let cap_len = c.u32()? as usize;
        let mut caption = Vec::with_capacity(cap_len);
        for _ in 0..cap_len {
            let id = c.u32()? as usize;
            if id >= vocab.size() {
                return Err(c.fail(format!("caption token id {id} out of range")));
            }
            caption.push(vocab.token(id).to_string());
        }
        let mut specs = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let shape = Shape::from_index(c.u8()? as usize).ok_or_else(|| c.fail("bad shape"))?;
            let color = Color::from_index(c.u8()? as usize).ok_or_else(|| c.fail("bad color"))?;
            let (x, y, size) = (c.f64()?, c.f64()?, c.f64()?);
            specs.push(SceneSpec {
                shape,
                color,
                x,
                y,
                size,
            });
        }
        let mut images = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let raw = c.take(resolution * resolution * 3 * 8)?;
            let pixels: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(c.fail("pixel outside [0, 1]"));
            }
            images.push(Image { resolution, pixels });
        }
        games.push(ReferenceGame {
            images,
            specs,
            target_index,
            caption,
        });
    }
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes after last game"));
    }
    Ok(DatasetSplit {
        split_id,
        seed,
        resolution,
        games,
    })
}

/// Re-renders every spec and compares with the stored pixels.
pub fn verify_pixels(split: &DatasetSplit) -> Result<()> {
    for (gi, g) in split.games.iter().enumerate() {
        for (s, img) in g.specs.iter().zip(&g.images) {
            if render(s, split.resolution)? != *img {
                return Err(Error::Invalid(format!("game {gi}: pixels do not match spec")));
            }
        }
    }
    Ok(())
}
