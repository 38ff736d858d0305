//! `EMB1` container: magic, `u32` rows, `u32` cols (little-endian), then
//! row-major little-endian `f32` payload.

use std::path::Path;

use super::FormatError;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_HEADER_LEN: usize = 12;

/// Serializes at 32-bit precision. Values outside the `f32` range are an error.
pub fn encode_emb1(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::invalid("EMB1 rows", format!("{} exceeds u32", m.rows())))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::invalid("EMB1 cols", format!("{} exceeds u32", m.cols())))?;
    let mut out = Vec::with_capacity(EMB1_HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for (i, &v) in m.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(i));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses one EMB1 block from the start of `bytes`, returning the matrix and
/// the number of bytes consumed.
pub(crate) fn decode_emb1_prefix(bytes: &[u8]) -> Result<(Matrix, usize)> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { needed: EMB1_HEADER_LEN, available: bytes.len() }.into());
    }
    if &bytes[..4] != EMB1_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "EMB1".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }
        .into());
    }
    if bytes.len() < EMB1_HEADER_LEN {
        return Err(FormatError::Truncated { needed: EMB1_HEADER_LEN, available: bytes.len() }.into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let overflow = || FormatError::SizeOverflow { rows: rows as u64, cols: cols as u64 };
    let payload = (rows as usize)
        .checked_mul(cols as usize)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(overflow)?;
    let needed = payload.checked_add(EMB1_HEADER_LEN).ok_or_else(overflow)?;
    if bytes.len() < needed {
        return Err(FormatError::Truncated { needed, available: bytes.len() }.into());
    }
    let data: Vec<f64> = bytes[EMB1_HEADER_LEN..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Matrix::new(rows as usize, cols as usize, data)?, needed))
}

/// Parses a complete EMB1 file; extra bytes after the payload are an error.
pub fn decode_emb1(bytes: &[u8]) -> Result<Matrix> {
    let (m, used) = decode_emb1_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::TrailingBytes { count: bytes.len() - used }.into());
    }
    Ok(m)
}

pub fn read_emb1(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_emb1(&std::fs::read(path)?)
}

pub fn write_emb1(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    std::fs::write(path, encode_emb1(m)?)?;
    Ok(())
}
