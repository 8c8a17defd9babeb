//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "DGN1" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 dtype | u8 ndim | ndim × u32 dims | payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! dtype 0 is `f32`; dtype 1 is `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"DGN1";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name = name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        // The trailing CRC is not part of the body.
        if end + 4 > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}

/// Decodes a checkpoint. When `expected` is given, names, order, count and
/// shapes must match it exactly; headers are validated before payloads are
/// read.
pub fn decode<T: Scalar>(
    bytes: &[u8],
    expected: Option<&[(String, Vec<usize>)]>,
) -> Result<Vec<(String, Tensor<T>)>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated);
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = r.u32()? as usize;
    if let Some(exp) = expected {
        if exp.len() != count {
            return Err(Error::CountMismatch {
                expected: exp.len(),
                found: count,
            });
        }
    }
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::invalid("checkpoint: tensor name is not UTF-8"))?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if let Some(exp) = expected {
            let (ename, eshape) = &exp[i];
            if *ename != name {
                return Err(Error::NameMismatch {
                    expected: ename.clone(),
                    found: name,
                });
            }
            if *eshape != dims {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: eshape.clone(),
                    found: dims,
                });
            }
        }
        if dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                name,
                expected: T::DTYPE,
                found: dtype,
            });
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated)?;
        let payload = r.take(numel.checked_mul(T::BYTES).ok_or(Error::Truncated)?)?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos + 4 != bytes.len() {
        return Err(Error::invalid(format!(
            "checkpoint: {} unexpected trailing bytes",
            bytes.len() - r.pos - 4
        )));
    }
    let stored = u32::from_le_bytes(bytes[r.pos..].try_into().expect("4"));
    let computed = crc32fast::hash(&bytes[..r.pos]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(out)
}

pub fn read<T: Scalar>(
    path: impl AsRef<Path>,
    expected: Option<&[(String, Vec<usize>)]>,
) -> Result<Vec<(String, Tensor<T>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}
