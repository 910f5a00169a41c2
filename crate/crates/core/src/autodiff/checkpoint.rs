//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "ASR1"
//! version      u32       currently 1
//! precision    u8        4 (f32) or 8 (f64)
//! entry count  u32
//! per entry:
//!   name len   u16, then UTF-8 name bytes
//!   trainable  u8 (0 or 1)
//!   ndim       u8, then ndim x u32 extents
//!   offset     u64       element offset into the data section
//! data section: raw little-endian values of every entry, in entry order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamSet, Precision, Real, Tensor};
use crate::error::{AsrError, Result};

pub const MAGIC: &[u8; 4] = b"ASR1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<T: Real>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::PRECISION.byte_width() as u8);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in params.entries() {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::from(e.trainable));
        out.push(e.value.ndim() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += e.value.len() as u64;
    }
    for e in params.entries() {
        out.extend_from_slice(&T::to_le_bytes_vec(e.value.data()));
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AsrError::Checkpoint("truncated header".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a container written at any precision, converting to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(AsrError::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(AsrError::Checkpoint(format!("unsupported format version {version}")));
    }
    let precision = match cur.u8()? {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(AsrError::Checkpoint(format!("unknown precision width {other}"))),
    };
    let count = cur.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| AsrError::Checkpoint("entry name is not UTF-8".into()))?;
        let trainable = cur.u8()? != 0;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = cur.u64()? as usize;
        headers.push((name, trainable, shape, offset));
    }
    let data = &bytes[cur.pos..];
    let width = precision.byte_width();
    let mut params = ParamSet::new();
    for (name, trainable, shape, offset) in headers {
        let n: usize = shape.iter().product();
        let start = offset * width;
        let raw = data
            .get(start..start + n * width)
            .ok_or_else(|| AsrError::Checkpoint(format!("data for `{name}` out of range")))?;
        let values: Vec<T> = match precision {
            Precision::F32 => f32::from_le_bytes_slice(raw).into_iter().map(|v| T::lit(v as f64)).collect(),
            Precision::F64 => f64::from_le_bytes_slice(raw).into_iter().map(T::lit).collect(),
        };
        params.add(name, Tensor::new(shape, values)?, trainable);
    }
    Ok(params)
}

pub fn save<T: Real>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| AsrError::io(path, e))?;
    f.write_all(&encode(params)).map_err(|e| AsrError::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ParamSet<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| AsrError::io(path, e))?;
    decode(&buf)
}
