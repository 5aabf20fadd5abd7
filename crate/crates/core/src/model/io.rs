//! Model file: `PSLT` magic, u32 version, config text, parameter records,
//! trailing CRC32 of everything before it. All integers little-endian.
//!
//! ```text
//! "PSLT" | version u32 | cfg_len u32 | cfg bytes | count u32 |
//!   { path_len u32 | path | shape 4 x u32 | data f64 x numel }* | crc32 u32
//! ```

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"PSLT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.cfg.to_text();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (path, t) in model.params.iter() {
        buf.extend_from_slice(&(path.len() as u32).to_le_bytes());
        buf.extend_from_slice(path.as_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config")?;
    let count = r.u32("parameter count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let plen = r.u32("path length")? as usize;
        let path = std::str::from_utf8(r.take(plen, "path")?)
            .map_err(|_| Error::Format(format!("record {i}: path is not UTF-8")))?
            .to_string();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32("shape")? as usize;
        }
        let n = numel(&shape);
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{path}: shape {shape:?} overflows")))?,
            &path,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push((path, Tensor::new(shape, data)?));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            buf.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let cfg = ModelConfig::parse(text)?;
    let mut model = Model::build(cfg)?;
    if records.len() != model.params.len() {
        return Err(Error::Format(format!(
            "file has {} parameters, config builds {}",
            records.len(),
            model.params.len()
        )));
    }
    for (path, t) in records {
        let slot = model
            .params
            .get_mut(&path)
            .ok_or_else(|| Error::Format(format!("unknown parameter {path}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{path}: shape {:?} but config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(model)
}
