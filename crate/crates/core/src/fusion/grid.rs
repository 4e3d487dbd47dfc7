//! Binary σ grid: magic `UQDP`, `u16` height, `u16` width (little endian),
//! then `height * width` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SIGMA_GRID_MAGIC: &[u8; 4] = b"UQDP";

pub fn write_sigma_grid(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values for a {height}x{width} grid",
            values.len()
        )));
    }
    let (h, w) = match (u16::try_from(height), u16::try_from(width)) {
        (Ok(h), Ok(w)) => (h, w),
        _ => return Err(Error::InvalidData(format!("grid {height}x{width} exceeds u16"))),
    };
    let mut bytes = Vec::with_capacity(8 + 4 * values.len());
    bytes.extend_from_slice(SIGMA_GRID_MAGIC);
    bytes.extend_from_slice(&h.to_le_bytes());
    bytes.extend_from_slice(&w.to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns `(height, width, values)`.
pub fn read_sigma_grid(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != SIGMA_GRID_MAGIC {
        return Err(Error::InvalidData(format!("{}: not a sigma grid", path.display())));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(Error::InvalidData(format!(
            "{}: header says {h}x{w} but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((h, w, values))
}
