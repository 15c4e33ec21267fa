//! Binary tensor container shared by corpora, teacher banks, codebooks,
//! checkpoints and probe exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVKD" | version: u16 | num_tensors: u16
//! per tensor: rows: u32 | cols: u32 | rows*cols f64 (IEEE-754 LE, row-major)
//! ```
//!
//! Rank-1 tensors are written as a single row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"AVKD";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

pub fn encode(tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let count = u16::try_from(tensors.len())
        .map_err(|_| Error::ContainerShape(format!("{} tensors exceed u16", tensors.len())))?;
    let payload: usize = tensors.iter().map(|t| 8 + 8 * t.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let rows = u32::try_from(t.rows())
            .map_err(|_| Error::ContainerShape(format!("{} rows exceed u32", t.rows())))?;
        let cols = u32::try_from(t.cols())
            .map_err(|_| Error::ContainerShape(format!("{} cols exceed u32", t.cols())))?;
        buf.extend_from_slice(&rows.to_le_bytes());
        buf.extend_from_slice(&cols.to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::MalformedHeader("bad magic".into()));
        }
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;

    let mut pos = HEADER_LEN;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < pos + 8 {
            return Err(Error::Truncated {
                needed: pos + 8,
                found: bytes.len(),
            });
        }
        let rows = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::MalformedHeader(format!("tensor size {rows}x{cols} overflows")))?;
        let end = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(pos))
            .ok_or_else(|| Error::MalformedHeader(format!("tensor size {rows}x{cols} overflows")))?;
        if bytes.len() < end {
            return Err(Error::Truncated {
                needed: end,
                found: bytes.len(),
            });
        }
        let data = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::matrix(rows, cols, data)?);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Checks a decoded tensor against an expected `[rows x cols]` shape.
pub fn expect_shape(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.rows() != rows || t.cols() != cols {
        return Err(Error::ContainerShape(format!(
            "{what}: expected {rows}x{cols}, found {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    Ok(())
}
