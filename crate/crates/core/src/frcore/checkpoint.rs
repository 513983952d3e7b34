//! Model checkpoint layout, all integers little-endian:
//!
//! ```text
//! "P3FM" | u16 version | u16 len, model id | u16 len, arch descriptor
//!        | f64 train accuracy | u32 value count | f64 values | u32 CRC-32
//! ```
//!
//! The CRC covers every byte before it.

use std::fs;
use std::path::Path;

use super::{Arch, EmbeddingModel, FrError};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"P3FM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> FrError {
    FrError::Checkpoint(msg.into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u16).to_le_bytes());
    out.extend(s.as_bytes());
}

pub fn encode_model(m: &EmbeddingModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &m.id);
    put_str(&mut out, &m.arch.to_string());
    out.extend(m.train_accuracy.to_le_bytes());
    let count: usize = m.params.iter().map(Tensor::len).sum();
    out.extend((count as u32).to_le_bytes());
    for t in &m.params {
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FrError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FrError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FrError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, FrError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<EmbeddingModel, FrError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes.len() < 8 {
        return Err(bad("truncated file"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("CRC mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let id = r.string()?;
    let arch: Arch = r.string()?.parse()?;
    let train_accuracy = r.f64()?;
    let count = r.u32()? as usize;
    let shapes = arch.param_shapes();
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if count != expected {
        return Err(bad(format!("{count} values, architecture needs {expected}")));
    }
    let mut params = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n = s.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        params.push(Tensor::new(s, data)?);
    }
    if r.pos != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(EmbeddingModel {
        id,
        arch,
        params,
        train_accuracy,
    })
}

pub fn save_model(m: &EmbeddingModel, path: &Path) -> Result<(), FrError> {
    fs::write(path, encode_model(m)).map_err(|source| FrError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<EmbeddingModel, FrError> {
    let bytes = fs::read(path).map_err(|source| FrError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_model(&bytes)
}
