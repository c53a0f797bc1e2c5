//! DVOL1 volume files.
//!
//! Layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 6     | magic `DVOL1\0` |
//! | 12    | dims `D, W, H` as `u32` |
//! | 12    | spacing in mm as `f32` |
//! | 1     | dtype code: 0 = `f32`, 1 = `u8` |
//! | ...   | voxels, D-major then W then H |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap, Volume};

pub const DVOL_MAGIC: &[u8; 6] = b"DVOL1\0";
const HEADER_LEN: usize = 6 + 12 + 12 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

/// A decoded DVOL1 file of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    F32(Volume),
    U8(LabelMap),
}

fn header(dims: [usize; 3], spacing: [f32; 3], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(DVOL_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(dtype as u8);
    out
}

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut out = header(vol.dims(), vol.spacing(), DType::F32);
    out.reserve(vol.len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_labels(map: &LabelMap) -> Vec<u8> {
    let mut out = header(map.dims(), map.spacing(), DType::U8);
    out.extend_from_slice(map.data());
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<AnyVolume> {
    if bytes.len() < HEADER_LEN || &bytes[..6] != DVOL_MAGIC {
        return Err(Error::format(path, "missing DVOL1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(6), u32_at(10), u32_at(14)];
    let spacing = [f32_at(18), f32_at(22), f32_at(26)];
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| Error::format(path, "dims overflow"))?;
    let body = &bytes[HEADER_LEN..];
    match bytes[30] {
        0 => {
            if body.len() != n * 4 {
                return Err(Error::format(path, format!("expected {} f32 voxels", n)));
            }
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AnyVolume::F32(Grid::from_vec(dims, spacing, data)?))
        }
        1 => {
            if body.len() != n {
                return Err(Error::format(path, format!("expected {} u8 voxels", n)));
            }
            Ok(AnyVolume::U8(Grid::from_vec(dims, spacing, body.to_vec())?))
        }
        code => Err(Error::format(path, format!("unknown dtype code {code}"))),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_bytes(path, &encode_volume(vol))
}

pub fn write_labels(path: &Path, map: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_labels(map))
}

pub fn read_any(path: &Path) -> Result<AnyVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_any(path)? {
        AnyVolume::F32(v) => Ok(v),
        AnyVolume::U8(_) => Err(Error::format(path, "expected float32 volume, found uint8")),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_any(path)? {
        AnyVolume::U8(v) => Ok(v),
        AnyVolume::F32(_) => Err(Error::format(path, "expected uint8 label map, found float32")),
    }
}
