//! The `.ctcw` binary weights format.
//!
//! Layout, all integers little-endian: magic `CTCW`, format version `u32`,
//! tensor count `u32`, then per tensor a `u16` name length, the UTF-8 name,
//! a `u8` rank, `u32` dimensions and the row-major `f64` values.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use crate::error::{Error, LoadError, Result};
use crate::net::{ParameterSet, Tensor};

pub const MAGIC: [u8; 4] = *b"CTCW";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(params: &ParameterSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(params.tensors.len(), "tensor count")?.to_le_bytes());
    for t in &params.tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::domain(format!("tensor name {} is too long", t.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(t.shape.len())
            .map_err(|_| Error::domain(format!("tensor {} has too many dimensions", t.name)))?;
        out.push(rank);
        for &d in &t.shape {
            out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
        if t.data.len() != t.shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("tensor {} data does not match its shape", t.name)));
        }
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::domain(format!("{what} {value} does not fit in u32")))
}

pub fn write_weights(path: impl AsRef<Path>, params: &ParameterSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(params)?;
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == ErrorKind::NotFound {
            Error::Load(LoadError::MissingFile {
                path: path.to_path_buf(),
            })
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    decode_weights(&bytes, path).map_err(Error::Load)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(LoadError::Truncated {
                path: self.path.to_path_buf(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], LoadError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

/// Parses `.ctcw` bytes; `path` names the source in errors.
pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<ParameterSet, LoadError> {
    let malformed = |message: String| LoadError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let mut r = Reader { bytes, pos: 0, path };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(LoadError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(LoadError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| malformed(format!("tensor {name} is too large")))?;
        let raw = r.take(len)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ParameterSet { tensors })
}
