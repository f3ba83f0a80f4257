//! HSIC container: little-endian header `"HSIC"`, version, width, height,
//! bands, then f32 cube values in `(row, col, band)` order and u16 labels in
//! `(row, col)` order.

use std::fs;
use std::path::Path;

use super::{check_pair, HsiCube, LabelMap};
use crate::error::{Error, LoadError, Result};

pub const MAGIC: [u8; 4] = *b"HSIC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_cube(cube: &HsiCube, labels: &LabelMap) -> Result<Vec<u8>> {
    check_pair(cube, labels)?;
    let mut out =
        Vec::with_capacity(HEADER_LEN + cube.data().len() * 4 + labels.labels().len() * 2);
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        cube.width() as u32,
        cube.height() as u32,
        cube.bands() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in cube.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in labels.labels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_cube(bytes: &[u8]) -> Result<(HsiCube, LabelMap)> {
    if bytes.len() < 4 {
        return Err(LoadError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        }
        .into());
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if found != MAGIC {
        return Err(LoadError::BadMagic {
            expected: MAGIC,
            found,
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(LoadError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        }
        .into());
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(LoadError::UnsupportedVersion(version).into());
    }
    let (width, height, bands) = (
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
    );
    if width == 0 || height == 0 || bands == 0 {
        return Err(
            LoadError::InvalidHeader(format!("zero extent {width}x{height}x{bands}")).into(),
        );
    }
    let n_values = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(bands))
        .ok_or_else(|| LoadError::InvalidHeader("extent overflows".into()))?;
    let cube_end = HEADER_LEN + n_values * 4;
    let labels_len = width * height * 2;
    if bytes.len() < cube_end + labels_len {
        return Err(LoadError::Truncated {
            needed: cube_end + labels_len,
            available: bytes.len(),
        }
        .into());
    }
    let tail = bytes.len() - cube_end;
    if tail != labels_len {
        return Err(LoadError::DimensionMismatch {
            width,
            height,
            found: tail / 2,
        }
        .into());
    }
    let data: Vec<f32> = bytes[HEADER_LEN..cube_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    let labels: Vec<u16> = bytes[cube_end..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().expect("2-byte chunk")))
        .collect();
    let cube = HsiCube::new(width, height, bands, data)?;
    let labels = LabelMap::new(width, height, labels)?;
    Ok((cube, labels))
}

pub fn save_cube(path: impl AsRef<Path>, cube: &HsiCube, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cube(cube, labels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<(HsiCube, LabelMap)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}
