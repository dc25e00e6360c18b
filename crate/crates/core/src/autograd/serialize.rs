//! `TFLW1` weight container.
//!
//! Layout: the 5-byte magic `TFLW1`, then one record per tensor until end
//! of file. A record is `name_len: u64`, the UTF-8 name, `rank: u64`,
//! `rank` dimensions as `u64`, then the values as `f32`. All integers and
//! floats are little-endian.

use std::path::Path;

use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TFLW1";

pub fn encode(params: &Params<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + params.num_values() * 4);
    out.extend_from_slice(MAGIC);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            kind: "TFLW1",
            detail: format!("truncated record at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.buf.len() * 8 + 64).ok_or_else(|| Error::Format {
            kind: "TFLW1",
            detail: format!("implausible length {v}"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Params<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format {
            kind: "TFLW1",
            detail: "missing magic header".into(),
        });
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut params = Params::new();
    while r.pos < bytes.len() {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format {
                kind: "TFLW1",
                detail: format!("parameter name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.len()?;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format {
            kind: "TFLW1",
            detail: format!("dimension overflow for {name}"),
        })?;
        let raw = r.take(count.saturating_mul(4))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::new(dims, data)?)?;
    }
    Ok(params)
}

pub fn save(path: &Path, params: &Params<f32>) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Params<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
