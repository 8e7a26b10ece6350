//! Binary checkpoint encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FGCK" | version u32 | count u32 |
//!   count x { name_len u32 | name bytes | rank u32 | dims u32 x rank | values f64 x prod(dims) } |
//! FNV-1a u64 of every preceding byte
//! ```
//!
//! Parameters are written in name order, so the checksum doubles as the
//! snapshot fingerprint.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::fnv1a;
use crate::numerics::ParamMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FGCK";
pub const VERSION: u32 = 1;

/// Everything except the trailing checksum.
pub fn encode_body(params: &ParamMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode(params: &ParamMap) -> Vec<u8> {
    let mut out = encode_body(params);
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamMap> {
    if bytes.len() < 4 + 4 + 4 + 8 {
        return Err(Error::Checkpoint(String::from("file too short")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint(String::from("checksum mismatch")));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(String::from("bad magic")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint(String::from("parameter name is not UTF-8")))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= body.len() / 8).ok_or_else(|| Error::Checkpoint(format!("implausible shape {dims:?}")))?;
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(dims, values).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if params.insert(String::from(name), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(String::from("trailing bytes before checksum")));
    }
    Ok(params)
}
