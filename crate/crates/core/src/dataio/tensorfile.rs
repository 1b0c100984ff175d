//! The GCGT binary tensor format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "GCGT"
//! version    u32      currently 1
//! precision  u32      1 = 32-bit, 2 = 64-bit
//! rank       u32      at most 8
//! extents    rank x u64
//! payload    row-major scalars, f32 or f64 little-endian
//! ```
//!
//! Round-trips are bitwise lossless at both precisions: 32-bit tensors only
//! ever hold values exactly representable as `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Precision, Tensor};

pub const MAGIC: [u8; 4] = *b"GCGT";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(Error::Format(format!(
            "rank {} exceeds the supported maximum of {MAX_RANK}",
            t.rank()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + 8 * t.rank() + t.len() * t.precision().scalar_width());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&t.precision().code().to_le_bytes());
    bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.extents() {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match t.precision() {
        Precision::P32 => {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::P64 => {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Format(format!(
                "truncated tensor file: needed {} bytes at offset {}, have {}",
                n,
                *cursor,
                bytes.len()
            )));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };

    let magic = take(&mut cursor, 4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let precision =
        Precision::from_code(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()))?;
    let rank = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!(
            "rank {rank} exceeds the supported maximum of {MAX_RANK}"
        )));
    }
    let mut extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        extents.push(u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize);
    }
    let count: usize = extents.iter().product();
    let width = precision.scalar_width();
    let expected = count * width;
    if bytes.len() - cursor != expected {
        return Err(Error::Format(format!(
            "payload length {} does not match extents {:?} at {} bytes per scalar (expected {})",
            bytes.len() - cursor,
            extents,
            width,
            expected
        )));
    }
    let mut data = Vec::with_capacity(count);
    match precision {
        Precision::P32 => {
            for chunk in bytes[cursor..].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Precision::P64 => {
            for chunk in bytes[cursor..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Tensor::new(extents, data, precision)
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("tensor file {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    decode_tensor(&bytes)
}

/// Reads only the extents and precision, without decoding the payload.
pub fn read_header(path: &Path) -> Result<(Vec<usize>, Precision)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("tensor file {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let t = decode_tensor(&bytes)?;
    Ok((t.extents().to_vec(), t.precision()))
}
