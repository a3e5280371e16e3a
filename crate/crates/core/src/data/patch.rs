//! Cubic sub-volumes: training-patch sampling, 90° rotations, and disjoint
//! tiling with stitching.

use std::collections::HashSet;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::volume::{Dtype, Volume, VolumeData};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    PositiveCentered,
    AllNegative,
    Tiling,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    #[default]
    None,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [
        Rotation::None,
        Rotation::R90,
        Rotation::R180,
        Rotation::R270,
    ];

    fn quarter_turns(self) -> usize {
        match self {
            Rotation::None => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }
}

/// Rotation axis. The in-plane axes of a rotation about `X` are (y, z).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[default]
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Config(format!(
                "unknown axis {other:?} (expected x, y or z)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub size: usize,
    pub kind: PatchKind,
    pub rotation: Rotation,
    pub axis: Axis,
}

impl PatchSpec {
    pub fn center(&self) -> [usize; 3] {
        self.origin.map(|o| o + self.size / 2)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPatch {
    pub spec: PatchSpec,
    pub image: Volume,
    pub truth: Volume,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub count: usize,
    pub patch_size: usize,
    pub positive_ratio: f64,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            count: 4,
            patch_size: 32,
            positive_ratio: 0.7,
            max_retries: 1000,
        }
    }
}

/// Copies the cube at `origin`; voxels past the volume edge take `pad`.
pub fn extract_patch(volume: &Volume, origin: [usize; 3], size: usize, pad: f32) -> Volume {
    let [dx, dy, dz] = volume.dims();
    let mut index = Vec::with_capacity(size.pow(3));
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let (gx, gy, gz) = (origin[0] + x, origin[1] + y, origin[2] + z);
                index.push((gx < dx && gy < dy && gz < dz).then(|| volume.index(gx, gy, gz)));
            }
        }
    }
    let dims = [size; 3];
    match volume.data() {
        VolumeData::Mask(v) => {
            let pad = u8::from(pad > 0.5);
            let data = index.iter().map(|i| i.map_or(pad, |i| v[i])).collect();
            Volume::mask(dims, volume.spacing(), data).expect("binary source")
        }
        VolumeData::Gray(v) => {
            let data = index.iter().map(|i| i.map_or(pad, |i| v[i])).collect();
            Volume::gray(dims, volume.spacing(), data).expect("consistent dims")
        }
    }
}

/// Draws `config.count` patches; each is positive-centred with probability
/// `positive_ratio`, otherwise all-negative. Patch `i` uses its own
/// sub-stream of `seed`, so results do not depend on extraction order.
pub fn sample_training_patches(
    image: &Volume,
    truth: &Volume,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<TrainingPatch>> {
    if image.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and truth {:?} dims differ",
            image.dims(),
            truth.dims()
        )));
    }
    let mask = truth.require_mask("truth")?;
    let dims = truth.dims();
    let p = config.patch_size;
    if p == 0 || dims.iter().any(|&d| d < p) {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} does not fit in volume {dims:?}"
        )));
    }
    if !(0.0..=1.0).contains(&config.positive_ratio) {
        return Err(Error::InvalidArgument(format!(
            "positive ratio must lie in [0, 1], got {}",
            config.positive_ratio
        )));
    }
    let positives: Vec<[usize; 3]> = mask
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| truth.coords(i))
        .collect();

    let mut out = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = stream(seed, &[i as u64]);
        let mut kind = if rng.random_bool(config.positive_ratio) {
            PatchKind::PositiveCentered
        } else {
            PatchKind::AllNegative
        };
        if kind == PatchKind::PositiveCentered && positives.is_empty() {
            warn!("no positive voxels in truth; drawing an all-negative patch instead");
            kind = PatchKind::AllNegative;
        }
        let origin = match kind {
            PatchKind::PositiveCentered => {
                let v = positives[rng.random_range(0..positives.len())];
                let mut o = [0; 3];
                for a in 0..3 {
                    o[a] = v[a].saturating_sub(p / 2).min(dims[a] - p);
                }
                o
            }
            _ => negative_origin(&positives, dims, p, config.max_retries, &mut rng)?,
        };
        let spec = PatchSpec {
            origin,
            size: p,
            kind,
            rotation: Rotation::None,
            axis: Axis::X,
        };
        out.push(TrainingPatch {
            spec,
            image: extract_patch(image, origin, p, image.min_value()),
            truth: extract_patch(truth, origin, p, 0.0),
        });
    }
    Ok(out)
}

fn negative_origin<R: Rng>(
    positives: &[[usize; 3]],
    dims: [usize; 3],
    p: usize,
    max_retries: usize,
    rng: &mut R,
) -> Result<[usize; 3]> {
    for _ in 0..max_retries.max(1) {
        let o = [
            rng.random_range(0..=dims[0] - p),
            rng.random_range(0..=dims[1] - p),
            rng.random_range(0..=dims[2] - p),
        ];
        let hit = positives
            .iter()
            .any(|v| (0..3).all(|a| v[a] >= o[a] && v[a] < o[a] + p));
        if !hit {
            return Ok(o);
        }
    }
    Err(Error::Sampling(format!(
        "no all-negative {p}^3 patch found in {max_retries} draws"
    )))
}

/// Maps in-plane coordinates `(u, v)` of an `n`-wide cube through `turns`
/// quarter turns: one turn sends `(u, v)` to `(n−1−v, u)`.
fn turn(u: usize, v: usize, n: usize, turns: usize) -> (usize, usize) {
    match turns % 4 {
        0 => (u, v),
        1 => (n - 1 - v, u),
        2 => (n - 1 - u, n - 1 - v),
        _ => (v, n - 1 - u),
    }
}

fn rotate_volume(volume: &Volume, rotation: Rotation, axis: Axis) -> Volume {
    let n = volume.dims()[0];
    let turns = rotation.quarter_turns();
    let mut target = vec![0usize; volume.len()];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let (nx, ny, nz) = match axis {
                    Axis::X => {
                        let (u, v) = turn(y, z, n, turns);
                        (x, u, v)
                    }
                    Axis::Y => {
                        let (u, v) = turn(z, x, n, turns);
                        (v, y, u)
                    }
                    Axis::Z => {
                        let (u, v) = turn(x, y, n, turns);
                        (u, v, z)
                    }
                };
                target[volume.index(x, y, z)] = volume.index(nx, ny, nz);
            }
        }
    }
    match volume.data() {
        VolumeData::Mask(src) => {
            let mut out = vec![0u8; src.len()];
            for (i, &t) in target.iter().enumerate() {
                out[t] = src[i];
            }
            Volume::mask(volume.dims(), volume.spacing(), out).expect("permutation of a mask")
        }
        VolumeData::Gray(src) => {
            let mut out = vec![0f32; src.len()];
            for (i, &t) in target.iter().enumerate() {
                out[t] = src[i];
            }
            Volume::gray(volume.dims(), volume.spacing(), out).expect("same dims")
        }
    }
}

/// Rigid 90°-multiple rotation of an image/truth pair about `axis`.
pub fn rotate_patch(
    image: &Volume,
    truth: &Volume,
    rotation: Rotation,
    axis: Axis,
) -> Result<(Volume, Volume)> {
    for v in [image, truth] {
        let [a, b, c] = v.dims();
        if a != b || b != c {
            return Err(Error::Shape(format!(
                "rotation needs a cubic patch, got {:?}",
                v.dims()
            )));
        }
    }
    if image.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and truth {:?} dims differ",
            image.dims(),
            truth.dims()
        )));
    }
    Ok((
        rotate_volume(image, rotation, axis),
        rotate_volume(truth, rotation, axis),
    ))
}

/// Disjoint `patch_size` tiles covering `dims` zero-padded up to the next
/// multiple of `patch_size` on every axis.
pub fn tile_volume(dims: [usize; 3], patch_size: usize) -> Result<Vec<PatchSpec>> {
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let counts = dims.map(|d| d.div_ceil(patch_size));
    let mut out = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                out.push(PatchSpec {
                    origin: [i * patch_size, j * patch_size, k * patch_size],
                    size: patch_size,
                    kind: PatchKind::Tiling,
                    rotation: Rotation::None,
                    axis: Axis::X,
                });
            }
        }
    }
    Ok(out)
}

/// Writes each tile back into place and crops the padding.
pub fn stitch(
    patches: &[(PatchSpec, Volume)],
    dims: [usize; 3],
    spacing: [f32; 3],
) -> Result<Volume> {
    let Some((first, first_vol)) = patches.first() else {
        return Err(Error::InvalidArgument("no patches to stitch".into()));
    };
    let p = first.size;
    let dtype = first_vol.dtype();
    let expected = tile_volume(dims, p)?;
    if patches.len() != expected.len() {
        return Err(Error::Shape(format!(
            "{} patches cannot tile {dims:?} with size {p} (need {})",
            patches.len(),
            expected.len()
        )));
    }
    let valid: HashSet<[usize; 3]> = expected.iter().map(|s| s.origin).collect();
    let mut seen = HashSet::new();
    for (spec, vol) in patches {
        if spec.size != p || vol.dims() != [p; 3] || vol.dtype() != dtype {
            return Err(Error::Shape(format!(
                "patch at {:?} has size {} / dims {:?} / {:?}, expected {p} / {:?}",
                spec.origin,
                spec.size,
                vol.dims(),
                vol.dtype(),
                dtype
            )));
        }
        if !valid.contains(&spec.origin) || !seen.insert(spec.origin) {
            return Err(Error::Shape(format!(
                "patch origin {:?} is not a distinct tile of {dims:?}",
                spec.origin
            )));
        }
    }

    let n = dims.iter().product();
    let mut gray = vec![0f32; if dtype == Dtype::GrayF32 { n } else { 0 }];
    let mut mask = vec![0u8; if dtype == Dtype::MaskU8 { n } else { 0 }];
    for (spec, vol) in patches {
        let o = spec.origin;
        for z in 0..p.min(dims[2].saturating_sub(o[2])) {
            for y in 0..p.min(dims[1].saturating_sub(o[1])) {
                let w = p.min(dims[0] - o[0]);
                let dst = o[0] + dims[0] * (o[1] + y + dims[1] * (o[2] + z));
                let src = vol.index(0, y, z);
                match vol.data() {
                    VolumeData::Gray(v) => gray[dst..dst + w].copy_from_slice(&v[src..src + w]),
                    VolumeData::Mask(v) => mask[dst..dst + w].copy_from_slice(&v[src..src + w]),
                }
            }
        }
    }
    match dtype {
        Dtype::GrayF32 => Volume::gray(dims, spacing, gray),
        Dtype::MaskU8 => Volume::mask(dims, spacing, mask),
    }
}

/// Tiles a volume and extracts every tile, padding with 0 for masks and
/// the minimum intensity for gray images.
pub fn extract_tiles(volume: &Volume, patch_size: usize) -> Result<Vec<(PatchSpec, Volume)>> {
    let pad = volume.min_value();
    Ok(tile_volume(volume.dims(), patch_size)?
        .into_iter()
        .map(|spec| {
            let v = extract_patch(volume, spec.origin, patch_size, pad);
            (spec, v)
        })
        .collect())
}
