//! MCKP1 named-tensor checkpoint format.
//!
//! Layout (little-endian): 8-byte magic `MCKP0001`, `u32` tensor count, then
//! per tensor `u16` name length, UTF-8 name, `u8` rank, `rank × u32` dims and
//! the `f32` payload.

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MCKP_MAGIC: &[u8; 8] = b"MCKP0001";

pub fn encode(entries: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MCKP_MAGIC);
    buf.extend_from_slice(&u32::try_from(entries.len()).map_err(too_big)?.to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&u16::try_from(nb.len()).map_err(too_big)?.to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(u8::try_from(t.rank()).map_err(too_big)?);
        for &d in t.shape() {
            buf.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn too_big<E>(_: E) -> Error {
    Error::InvalidArgument("checkpoint field exceeds its on-disk width".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.origin,
                format!("truncated checkpoint at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    if c.take(8)? != MCKP_MAGIC {
        return Err(Error::format(origin, "bad magic; expected MCKP0001"));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = c.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::format(origin, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(origin, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    crate::data::write_atomic(path, &encode(entries)?)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
