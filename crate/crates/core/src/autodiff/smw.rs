//! "SMW1" weight files: magic, u32 entry count, then per entry a name record
//! (u8 length + ASCII), u32 rank, u32 dims and little-endian f32 data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

pub const SMW_MAGIC: &[u8; 4] = b"SMW1";

pub fn encode_weights<T: Scalar>(entries: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SMW_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        write_name(&mut out, name)?;
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader::new(bytes, "SMW1 weights");
    if r.take(4)? != SMW_MAGIC {
        return Err(r.err("bad magic"));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| r.f32().map(|v| T::from_f64_lossy(v as f64)))
            .collect::<Result<Vec<_>>>()?;
        entries.push((name, Tensor::new(shape, data)?));
    }
    if !r.is_done() {
        return Err(r.err("trailing bytes"));
    }
    Ok(entries)
}

pub fn write_weights<T: Scalar>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    let bytes = encode_weights(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

pub(crate) fn write_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    if !name.is_ascii() || name.len() > u8::MAX as usize {
        return Err(Error::Format {
            what: "name record",
            msg: format!("`{name}` must be ASCII and at most 255 bytes"),
        });
    }
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub fn err(&self, msg: &str) -> Error {
        Error::Format {
            what: self.what,
            msg: format!("{msg} at byte {}", self.pos),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn name(&mut self) -> Result<String> {
        let len = self.take(1)?[0] as usize;
        let raw = self.take(len)?;
        if !raw.is_ascii() {
            return Err(self.err("non-ASCII name record"));
        }
        Ok(String::from_utf8_lossy(raw).into_owned())
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
