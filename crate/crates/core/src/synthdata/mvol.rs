//! `.mvol` volume files: 30-byte header then a raw slice-major payload.
//!
//! Header: `MVOL1`, dtype byte (0 = f32, 1 = u8), D/H/W as u32 LE and
//! spacing (sz, sy, sx) as f32 LE.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"MVOL1";
pub const HEADER_LEN: usize = 30;

/// Intensity volume, `data[(z * h + y) * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Millimetres per voxel along (z, y, x).
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

/// Integer label volume; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<u8>,
}

impl Volume {
    pub fn slice(&self, z: usize) -> &[f32] {
        let px = self.dims[1] * self.dims[2];
        &self.data[z * px..(z + 1) * px]
    }
}

impl LabelVolume {
    pub fn slice(&self, z: usize) -> &[u8] {
        let px = self.dims[1] * self.dims[2];
        &self.data[z * px..(z + 1) * px]
    }
}

fn header(dtype: u8, dims: [usize; 3], spacing: [f32; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(0, v.dims, v.spacing);
    out.reserve(4 * v.data.len());
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(v: &LabelVolume) -> Vec<u8> {
    let mut out = header(1, v.dims, v.spacing);
    out.extend_from_slice(&v.data);
    out
}

/// Parsed file contents of either dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum Mvol {
    Intensity(Volume),
    Labels(LabelVolume),
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Mvol, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()));
    }
    if &bytes[..5] != MAGIC {
        return Err(format!("bad magic {:?}, expected \"MVOL1\"", String::from_utf8_lossy(&bytes[..5])));
    }
    let dtype = bytes[5];
    let u = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let f = |i: usize| f32::from_le_bytes(bytes[18 + 4 * i..22 + 4 * i].try_into().unwrap());
    let dims = [u(0), u(1), u(2)];
    let spacing = [f(0), f(1), f(2)];
    if dims.contains(&0) {
        return Err(format!("zero dimension in {dims:?}"));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(format!("spacing {spacing:?} must be positive"));
    }
    let voxels = dims[0] * dims[1] * dims[2];
    let width = match dtype {
        0 => 4,
        1 => 1,
        other => return Err(format!("unknown dtype code {other}")),
    };
    let expected = voxels * width;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(format!("payload has {} bytes, expected {expected} for dims {dims:?}", payload.len()));
    }
    Ok(match dtype {
        0 => Mvol::Intensity(Volume {
            dims,
            spacing,
            data: payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        }),
        _ => Mvol::Labels(LabelVolume { dims, spacing, data: payload.to_vec() }),
    })
}

fn read(path: &Path) -> Result<Mvol> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::Mvol { path: path.into(), detail })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read(path)? {
        Mvol::Intensity(v) => Ok(v),
        Mvol::Labels(_) => Err(Error::Mvol { path: path.into(), detail: "expected intensities, found labels".into() }),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read(path)? {
        Mvol::Labels(v) => Ok(v),
        Mvol::Intensity(_) => Err(Error::Mvol { path: path.into(), detail: "expected labels, found intensities".into() }),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write(path, &encode_volume(v))
}

pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<()> {
    write(path, &encode_labels(v))
}
