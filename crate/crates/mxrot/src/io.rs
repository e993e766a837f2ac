//! MXTB tensor files and atomic writes.
//!
//! Layout (little-endian, no padding, no checksum):
//!
//! | offset | size        | field                    |
//! |--------|-------------|--------------------------|
//! | 0      | 4           | magic `b"MXTB"`          |
//! | 4      | 4           | version `u32 = 1`        |
//! | 8      | 8           | rows `u64`               |
//! | 16     | 8           | cols `u64`               |
//! | 24     | 4·rows·cols | `f32` values, row-major  |

use std::fs;
use std::io::Write;
use std::path::Path;

use mxrot_core::Tensor;
use tempfile::NamedTempFile;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MXTB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset 0: expected \"MXTB\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {version} at offset 4 (expected {VERSION})")]
    UnsupportedVersion { version: u32 },
    #[error("truncated at offset {offset}: need {needed} bytes, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("invalid shape {rows}x{cols} at offset 8")]
    InvalidShape { rows: u64, cols: u64 },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("non-finite value at offset {offset} (element {index})")]
    NonFinite { offset: usize, index: usize },
    #[error("{error}")]
    Io { path: String, error: std::io::Error },
}

fn field<const N: usize>(bytes: &[u8], offset: usize) -> Result<[u8; N], FormatError> {
    bytes
        .get(offset..offset + N)
        .map(|s| s.try_into().expect("slice length"))
        .ok_or(FormatError::Truncated {
            offset,
            needed: offset + N,
            len: bytes.len(),
        })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let magic: [u8; 4] = field(bytes, 0).map_err(|_| FormatError::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = u32::from_le_bytes(field(bytes, 4)?);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { version });
    }
    let rows = u64::from_le_bytes(field(bytes, 8)?);
    let cols = u64::from_le_bytes(field(bytes, 16)?);
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .filter(|_| rows > 0 && cols > 0)
        .ok_or(FormatError::InvalidShape { rows, cols })?;
    let end = HEADER_LEN
        .checked_add(payload)
        .ok_or(FormatError::InvalidShape { rows, cols })?;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: end,
            len: bytes.len(),
        });
    }
    if bytes.len() > end {
        return Err(FormatError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    let mut data = Vec::with_capacity(payload / 4);
    for (index, chunk) in bytes[HEADER_LEN..end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                offset: HEADER_LEN + 4 * index,
                index,
            });
        }
        data.push(v);
    }
    Ok(Tensor::new(rows as usize, cols as usize, data).expect("validated shape and values"))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tensor(path: &Path) -> Result<Tensor, FormatError> {
    let bytes = fs::read(path).map_err(|error| FormatError::Io {
        path: path.display().to_string(),
        error,
    })?;
    decode_tensor(&bytes)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> std::io::Result<()> {
    write_atomic(path, &encode_tensor(t))
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
