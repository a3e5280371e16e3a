//! Dense volumes and the VVOL file format.
//!
//! ```text
//! offset  size  field
//!  0       8    magic "VVOL0001"
//!  8      12    dims dx, dy, dz        (u32 LE each)
//! 20      12    spacing sx, sy, sz mm  (f32 LE each)
//! 32       4    dtype                  (u32 LE: 0 = mask_u8, 1 = gray_f32)
//! 36       …    payload, x fastest, then y, then z (u8 or f32 LE)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VVOL_MAGIC: &[u8; 8] = b"VVOL0001";
pub const VVOL_HEADER_LEN: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    MaskU8,
    GrayF32,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::MaskU8 => 0,
            Dtype::GrayF32 => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Dtype::MaskU8),
            1 => Ok(Dtype::GrayF32),
            other => Err(Error::Malformed {
                what: "VVOL header",
                detail: format!("unknown dtype code {other}"),
            }),
        }
    }

    pub fn voxel_bytes(self) -> usize {
        match self {
            Dtype::MaskU8 => 1,
            Dtype::GrayF32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Mask(Vec<u8>),
    Gray(Vec<f32>),
}

/// 3D grid in x-fastest order. Mask voxels are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: VolumeData,
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!(
            "volume dims must be positive, got {dims:?}"
        )));
    }
    let expected = dims[0] * dims[1] * dims[2];
    if expected != len {
        return Err(Error::Shape(format!(
            "volume dims {dims:?} need {expected} voxels, got {len}"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn mask(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<u8>) -> Result<Self> {
        check_dims(dims, voxels.len())?;
        if let Some(bad) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask voxels must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data: VolumeData::Mask(voxels),
        })
    }

    pub fn gray(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        check_dims(dims, voxels.len())?;
        Ok(Self {
            dims,
            spacing,
            data: VolumeData::Gray(voxels),
        })
    }

    pub fn empty_mask(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        Self::mask(dims, spacing, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            VolumeData::Mask(_) => Dtype::MaskU8,
            VolumeData::Gray(_) => Dtype::GrayF32,
        }
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn as_mask(&self) -> Option<&[u8]> {
        match &self.data {
            VolumeData::Mask(v) => Some(v),
            VolumeData::Gray(_) => None,
        }
    }

    pub fn as_gray(&self) -> Option<&[f32]> {
        match &self.data {
            VolumeData::Gray(v) => Some(v),
            VolumeData::Mask(_) => None,
        }
    }

    pub fn require_mask(&self, what: &str) -> Result<&[u8]> {
        self.as_mask()
            .ok_or_else(|| Error::InvalidArgument(format!("{what} must be a mask_u8 volume")))
    }

    pub fn require_gray(&self, what: &str) -> Result<&[f32]> {
        self.as_gray()
            .ok_or_else(|| Error::InvalidArgument(format!("{what} must be a gray_f32 volume")))
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [dx, dy, _] = self.dims;
        [index % dx, (index / dx) % dy, index / (dx * dy)]
    }

    /// Voxel value widened to f32 regardless of dtype.
    pub fn value(&self, index: usize) -> f32 {
        match &self.data {
            VolumeData::Mask(v) => f32::from(v[index]),
            VolumeData::Gray(v) => v[index],
        }
    }

    pub fn count_positive(&self) -> usize {
        match &self.data {
            VolumeData::Mask(v) => v.iter().filter(|&&b| b == 1).count(),
            VolumeData::Gray(v) => v.iter().filter(|&&b| b > 0.0).count(),
        }
    }

    /// Lowest voxel value; 0 for masks.
    pub fn min_value(&self) -> f32 {
        match &self.data {
            VolumeData::Mask(_) => 0.0,
            VolumeData::Gray(v) => v.iter().copied().fold(f32::INFINITY, f32::min),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VVOL_HEADER_LEN + self.len() * self.dtype().voxel_bytes());
        out.extend_from_slice(VVOL_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.dtype().code().to_le_bytes());
        match &self.data {
            VolumeData::Mask(v) => out.extend_from_slice(v),
            VolumeData::Gray(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VVOL_MAGIC.len() || &bytes[..8] != VVOL_MAGIC {
            return Err(Error::BadMagic {
                what: "VVOL file",
                expected: String::from_utf8_lossy(VVOL_MAGIC).into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into(),
            });
        }
        if bytes.len() < VVOL_HEADER_LEN {
            return Err(Error::Truncated {
                what: "VVOL header",
                expected: VVOL_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let spacing = [f32_at(20), f32_at(24), f32_at(28)];
        let dtype = Dtype::from_code(u32_at(32))?;
        let voxels = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|_| dims.iter().all(|&d| d > 0))
            .ok_or_else(|| Error::Malformed {
                what: "VVOL header",
                detail: format!("invalid dims {dims:?}"),
            })?;
        let payload = &bytes[VVOL_HEADER_LEN..];
        let expected = voxels
            .checked_mul(dtype.voxel_bytes())
            .ok_or_else(|| Error::Malformed {
                what: "VVOL header",
                detail: format!("dims {dims:?} overflow"),
            })?;
        if payload.len() < expected {
            return Err(Error::Truncated {
                what: "VVOL payload",
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Malformed {
                what: "VVOL payload",
                detail: format!(
                    "dims {dims:?} imply {expected} payload bytes but file carries {}",
                    payload.len()
                ),
            });
        }
        match dtype {
            Dtype::MaskU8 => {
                Self::mask(dims, spacing, payload.to_vec()).map_err(|e| Error::Malformed {
                    what: "VVOL payload",
                    detail: e.to_string(),
                })
            }
            Dtype::GrayF32 => Self::gray(
                dims,
                spacing,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, volume.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}
