//! The `FOT1` binary tensor format.
//!
//! Layout: magic `FOT1`, one dtype byte (1=f32, 2=f64, 3=c64, 4=c128), one
//! rank byte, six zero bytes, `rank` little-endian `u64` extents, then the
//! row-major little-endian payload with complex values interleaved `re, im`.
//! Single precision files are widened to `f64` on read.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use crate::tensor::{numel, Data, Tensor};

pub const MAGIC: &[u8; 4] = b"FOT1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected FOT1")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("reserved header bytes must be zero")]
    ReservedNonZero,
    #[error("invalid rank or extents: {0}")]
    BadShape(String),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

impl FormatError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic(_) => 1,
            FormatError::UnknownDtype(_) => 2,
            FormatError::ReservedNonZero => 3,
            FormatError::BadShape(_) => 4,
            FormatError::Truncated { .. } => 5,
            FormatError::TrailingBytes(_) => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StorageType {
    F32 = 1,
    F64 = 2,
    C64 = 3,
    C128 = 4,
}

impl StorageType {
    fn from_code(code: u8) -> Result<Self, FormatError> {
        Ok(match code {
            1 => StorageType::F32,
            2 => StorageType::F64,
            3 => StorageType::C64,
            4 => StorageType::C128,
            other => return Err(FormatError::UnknownDtype(other)),
        })
    }

    fn scalar_bytes(self) -> usize {
        match self {
            StorageType::F32 => 4,
            StorageType::F64 | StorageType::C64 => 8,
            StorageType::C128 => 16,
        }
    }

    fn is_complex(self) -> bool {
        matches!(self, StorageType::C64 | StorageType::C128)
    }

    /// Full-precision storage type matching a tensor.
    pub fn native(t: &Tensor) -> Self {
        if t.is_complex() {
            StorageType::C128
        } else {
            StorageType::F64
        }
    }
}

pub fn encode(t: &Tensor, storage: StorageType) -> crate::Result<Vec<u8>> {
    if storage.is_complex() != t.is_complex() {
        return Err(crate::Error::DType(format!(
            "cannot store a {:?} tensor as {storage:?}",
            t.dtype()
        )));
    }
    if t.rank() > u8::MAX as usize {
        return Err(crate::Error::shape("rank does not fit in one byte"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.rank() + t.len() * storage.scalar_bytes());
    out.extend_from_slice(MAGIC);
    out.push(storage as u8);
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0u8; 6]);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match (t.data(), storage) {
        (Data::Real(v), StorageType::F32) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
        (Data::Real(v), _) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        (Data::Complex(v), StorageType::C64) => v.iter().for_each(|z| {
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            out.extend_from_slice(&(z.im as f32).to_le_bytes());
        }),
        (Data::Complex(v), _) => v.iter().for_each(|z| {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }),
    }
    Ok(out)
}

fn need(bytes: &[u8], expected: usize) -> Result<(), FormatError> {
    if bytes.len() < expected {
        Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    need(bytes, HEADER_LEN)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let storage = StorageType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    if bytes[6..12].iter().any(|&b| b != 0) {
        return Err(FormatError::ReservedNonZero);
    }
    if rank == 0 {
        return Err(FormatError::BadShape("rank 0".into()));
    }
    let dims_end = HEADER_LEN + 8 * rank;
    need(bytes, dims_end)?;
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(FormatError::BadShape(format!("{shape:?}")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| FormatError::BadShape(format!("{shape:?} overflows")))?;
    let expected = count
        .checked_mul(storage.scalar_bytes())
        .and_then(|p| p.checked_add(dims_end))
        .ok_or_else(|| FormatError::BadShape(format!("{shape:?} overflows")))?;
    need(bytes, expected)?;
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[dims_end..expected];
    let f32s = || {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
    };
    let f64s = || {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
    };
    let data = match storage {
        StorageType::F32 => Data::Real(f32s().collect()),
        StorageType::F64 => Data::Real(f64s().collect()),
        StorageType::C64 => {
            let v: Vec<f64> = f32s().collect();
            Data::Complex(
                v.chunks_exact(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect(),
            )
        }
        StorageType::C128 => {
            let v: Vec<f64> = f64s().collect();
            Data::Complex(
                v.chunks_exact(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect(),
            )
        }
    };
    debug_assert_eq!(numel(&shape), data.len());
    Tensor::new(&shape, data).map_err(|e| FormatError::BadShape(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> crate::Result<()> {
    write_tensor_as(path, t, StorageType::native(t))
}

pub fn write_tensor_as(
    path: impl AsRef<Path>,
    t: &Tensor,
    storage: StorageType,
) -> crate::Result<()> {
    let bytes = encode(t, storage)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> crate::Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(decode(&bytes)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

/// Single entry point mirroring the read/write pair; `tensor` is required for writes.
pub fn tensor_io(
    path: impl AsRef<Path>,
    tensor: Option<&Tensor>,
    direction: Direction,
) -> crate::Result<Option<Tensor>> {
    match direction {
        Direction::Read => read_tensor(path).map(Some),
        Direction::Write => {
            let t = tensor.ok_or_else(|| crate::Error::invalid("write needs a tensor"))?;
            write_tensor(path, t)?;
            Ok(None)
        }
    }
}
