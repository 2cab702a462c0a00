//! `QDVW` weight container.
//!
//! Layout (all integers little-endian):
//! `"QDVW"`, version `u32 = 1`, entry count `u32`, then per entry the name
//! length `u16`, UTF-8 name bytes, rank `u8`, each dim as `u32`, and the
//! payload as `f64` values.

use std::path::Path;

use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QDVW";
pub const VERSION: u32 = 1;

pub fn encode(params: &Params) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Param(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Param(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Param(format!("dimension too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
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
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            kind: "checkpoint",
            msg: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            kind: "checkpoint",
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format {
                kind: "checkpoint",
                msg: e.to_string(),
            })?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            kind: "checkpoint",
            msg: "trailing bytes".into(),
        });
    }
    Ok(params)
}

pub fn save(path: &Path, params: &Params) -> Result<()> {
    std::fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Params> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
