//! QTNS binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      "QTNS"            4 bytes
//! version    u32               currently 1
//! count      u32               number of entries
//! per entry:
//!   name_len u32, name         UTF-8 bytes
//!   ndim     u32, dims         ndim x u64
//!   dtype    u8                0 = f32
//!   numel    u64               element count, must equal product(dims)
//!   data                       numel x f32
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{ArchiveError, Error, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"QTNS";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, DenseTensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u32 {
        VERSION
    }

    /// Appends a tensor; the tensor's own name is set to `name`.
    pub fn push(&mut self, name: impl Into<String>, mut tensor: DenseTensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ArchiveError::DuplicateName(name).into());
        }
        tensor.set_name(Some(name.clone()));
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, DenseTensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bitwise equality of names, shapes and data.
    pub fn bit_eq(&self, other: &TensorArchive) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_archive(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_archive(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_archive(archive: &TensorArchive) -> Vec<u8> {
    let payload: usize = archive
        .entries
        .iter()
        .map(|(n, t)| 4 + n.len() + 4 + 8 * t.ndim() + 1 + 8 + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(archive.entries.len() as u32).to_le_bytes());
    for (name, t) in &archive.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ArchiveError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ArchiveError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, ArchiveError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_archive(bytes: &[u8]) -> Result<TensorArchive> {
    read_entries(bytes).map_err(Error::from)
}

fn read_entries(bytes: &[u8]) -> std::result::Result<TensorArchive, ArchiveError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(ArchiveError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let count = r.u32()?;

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ArchiveError::InvalidName)?
            .to_string();
        let ndim = r.u32()? as usize;
        // Bound the allocation by what the buffer can actually hold.
        let mut shape = Vec::with_capacity(ndim.min((bytes.len() - r.pos) / 8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let code = r.u8()?;
        if code != DTYPE_F32 {
            return Err(ArchiveError::UnsupportedDtype { name, code });
        }
        let declared = r.u64()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(ArchiveError::ZeroDimension { name, shape });
        }
        let expected = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .unwrap_or(u64::MAX);
        if expected != declared {
            return Err(ArchiveError::LengthMismatch {
                name,
                shape,
                expected,
                declared,
            });
        }
        let nbytes = usize::try_from(declared)
            .ok()
            .and_then(|n| n.checked_mul(4))
            .ok_or(ArchiveError::Truncated {
                offset: r.pos,
                needed: usize::MAX,
                available: bytes.len() - r.pos,
            })?;
        let raw = r.take(nbytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(ArchiveError::DuplicateName(name));
        }
        let mut tensor = DenseTensor::new(shape, data).expect("validated above");
        tensor.set_name(Some(name.clone()));
        entries.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(ArchiveError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(TensorArchive { entries })
}
