//! Synthetic joint phantom.
//!
//! Two dark "bones" face each other across a curved surface `z = h(x, y)`.
//! Inside two elliptical contact regions the bones touch through a bright
//! sheet `sheet_thickness_vox` thick; outside them the gap widens and fills
//! with soft tissue. Ground truth is the one-voxel central layer of the
//! sheet inside the contact regions, so the two contact patches form the
//! two largest foreground components. Small speckles copying the sheet
//! profile (a bright centre layer between two flank layers, at most 3³
//! voxels) are scattered away from the sheet.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const BACKGROUND: f32 = 0.35;
pub const BONE: f32 = 0.1;
pub const SHEET_CENTER: f32 = 1.0;
pub const SHEET_FLANK: f32 = 0.8;

/// Ring, in voxels, around each contact region where the sheet fades out.
const FADE_MARGIN: f64 = 2.0;
/// Clearance between speckles and the sheet.
const SPECKLE_CLEARANCE: i64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub sheet_thickness_vox: usize,
    pub target_positive_fraction: f64,
    pub noise_sigma: f64,
    pub distractor_count: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing_mm: [0.2; 3],
            sheet_thickness_vox: 3,
            target_positive_fraction: 0.0018,
            noise_sigma: 0.05,
            distractor_count: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub truth: Volume,
    /// Voxels belonging to distractor speckles.
    pub distractors: Volume,
}

/// Random shape parameters of one phantom.
struct Geometry {
    dims: [usize; 3],
    base: f64,
    tilt: [f64; 2],
    curvature: f64,
    centers: [[f64; 2]; 2],
    radii: [f64; 2],
    scale: f64,
}

impl Geometry {
    fn height(&self, x: usize, y: usize) -> f64 {
        let [dx, dy, _] = self.dims;
        let u = x as f64 - dx as f64 / 2.0;
        let v = y as f64 - dy as f64 / 2.0;
        self.base
            + self.tilt[0] * u
            + self.tilt[1] * v
            + self.curvature * (u * u + v * v) / dx as f64
    }

    fn center_z(&self, x: usize, y: usize) -> i64 {
        self.height(x, y).round() as i64
    }

    /// Signed distance (approximate, in voxels) outside the nearest contact
    /// ellipse; negative inside.
    fn contact_distance(&self, x: usize, y: usize) -> f64 {
        self.centers
            .iter()
            .map(|c| {
                let rx = self.radii[0] * self.scale;
                let ry = self.radii[1] * self.scale;
                let ex = (x as f64 - c[0]) / rx;
                let ey = (y as f64 - c[1]) / ry;
                ((ex * ex + ey * ey).sqrt() - 1.0) * rx.min(ry)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn truth_columns(&self) -> usize {
        let [dx, dy, _] = self.dims;
        (0..dy)
            .flat_map(|y| (0..dx).map(move |x| (x, y)))
            .filter(|&(x, y)| self.contact_distance(x, y) <= 0.0)
            .count()
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let min = 16.max(8 * self.sheet_thickness_vox);
        if self.dims.iter().any(|&d| d < min) {
            return Err(Error::InvalidArgument(format!(
                "phantom dims {:?} too small to host a {}-voxel sheet (need every extent >= {min})",
                self.dims, self.sheet_thickness_vox
            )));
        }
        if self.sheet_thickness_vox == 0 {
            return Err(Error::InvalidArgument(
                "sheet thickness must be at least 1".into(),
            ));
        }
        if !(self.target_positive_fraction > 0.0 && self.target_positive_fraction < 0.05) {
            return Err(Error::InvalidArgument(format!(
                "target positive fraction must lie in (0, 0.05), got {}",
                self.target_positive_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.noise_sigma > 0.0 && f64::from(SHEET_CENTER - BACKGROUND) < 3.0 * self.noise_sigma {
            return Err(Error::InvalidArgument(format!(
                "noise sigma {} leaves the sheet less than 3 sigma above background",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    fn geometry(&self) -> Result<Geometry> {
        let mut rng = stream(self.seed, &[0]);
        let [dx, dy, dz] = self.dims.map(|d| d as f64);
        let mut g = Geometry {
            dims: self.dims,
            // Off-centre joint line, so all-negative patches of half the
            // volume edge still exist above or below it.
            base: dz
                * (if rng.random_bool(0.5) { 0.36 } else { 0.64 } + rng.random_range(-0.03..0.03)),
            tilt: [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)],
            curvature: rng.random_range(-0.2..0.2),
            centers: [
                [
                    dx * (0.3 + rng.random_range(-0.03..0.03)),
                    dy * (0.5 + rng.random_range(-0.05..0.05)),
                ],
                [
                    dx * (0.7 + rng.random_range(-0.03..0.03)),
                    dy * (0.5 + rng.random_range(-0.05..0.05)),
                ],
            ],
            radii: [1.0, rng.random_range(1.1..1.5)],
            scale: 1.0,
        };
        // Size the contact regions so the truth hits the requested fraction.
        let target = self.target_positive_fraction * dx * dy * dz;
        let (mut lo, mut hi) = (0.5, dx.min(dy) / 2.0);
        for _ in 0..40 {
            g.scale = 0.5 * (lo + hi);
            if (g.truth_columns() as f64) < target {
                lo = g.scale;
            } else {
                hi = g.scale;
            }
        }
        let separation = (g.centers[1][0] - g.centers[0][0]) / 2.0;
        if g.radii[0] * g.scale + FADE_MARGIN + 1.0 >= separation {
            return Err(Error::InvalidArgument(format!(
                "target positive fraction {} is too large for dims {:?}: contact regions would merge",
                self.target_positive_fraction, self.dims
            )));
        }
        Ok(g)
    }
}

pub fn generate_phantom(config: &PhantomConfig) -> Result<Phantom> {
    config.validate()?;
    let g = config.geometry()?;
    let [dx, dy, dz] = config.dims;
    let n = dx * dy * dz;
    let t = config.sheet_thickness_vox as i64;
    // Sheet occupies [zc − below, zc + above].
    let below = (t - 1) / 2;
    let above = t / 2;
    let bone_depth = (0.35 * dz as f64) as i64;

    let mut image = vec![BACKGROUND; n];
    let mut truth = vec![0u8; n];
    let mut near_sheet = vec![false; n];
    let idx = |x: usize, y: usize, z: i64| x + dx * (y + dy * z as usize);

    for y in 0..dy {
        for x in 0..dx {
            let zc = g.center_z(x, y);
            let dist = g.contact_distance(x, y);
            let gap = if dist <= FADE_MARGIN {
                0
            } else {
                (0.5 * (dist - FADE_MARGIN)).ceil() as i64
            };
            let lower_face = zc - below - gap;
            let upper_face = zc + above + gap;
            for z in 0..dz as i64 {
                let i = idx(x, y, z);
                if z > upper_face && z <= zc + bone_depth {
                    image[i] = BONE;
                } else if z < lower_face && z >= zc - bone_depth {
                    image[i] = BONE;
                }
                if dist <= FADE_MARGIN
                    && (zc - below - SPECKLE_CLEARANCE..=zc + above + SPECKLE_CLEARANCE)
                        .contains(&z)
                {
                    near_sheet[i] = true;
                }
            }
            if dist > FADE_MARGIN {
                continue;
            }
            // Sheet: brightest on the central layer inside the contact region,
            // fading over the margin ring.
            let fade = (dist.max(0.0) / FADE_MARGIN) as f32;
            for z in (zc - below)..=(zc + above) {
                if !(0..dz as i64).contains(&z) {
                    continue;
                }
                let i = idx(x, y, z);
                let level = if z == zc { SHEET_CENTER } else { SHEET_FLANK };
                image[i] = if dist <= 0.0 {
                    level
                } else {
                    // Strictly below SHEET_CENTER so truth voxels stay brightest.
                    level - 0.1 - 0.2 * fade
                };
                if z == zc && dist <= 0.0 {
                    truth[i] = 1;
                }
            }
        }
    }

    let mut distractors = vec![0u8; n];
    let mut rng = stream(config.seed, &[1]);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < config.distractor_count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidArgument(format!(
                "could not place {} distractors in a {:?} phantom",
                config.distractor_count, config.dims
            )));
        }
        let ext = [
            rng.random_range(2..=3usize),
            rng.random_range(2..=3usize),
            3,
        ];
        let o = [
            rng.random_range(1..dx - 4),
            rng.random_range(1..dy - 4),
            rng.random_range(1..dz - 4),
        ];
        let voxels: Vec<usize> = (0..ext[2])
            .flat_map(|k| (0..ext[1]).flat_map(move |j| (0..ext[0]).map(move |i| (i, j, k))))
            .map(|(i, j, k)| idx(o[0] + i, o[1] + j, (o[2] + k) as i64))
            .collect();
        // Keep speckles apart from the sheet and from one another.
        let blocked = voxels.iter().any(|&v| {
            let [x, y, z] = [v % dx, (v / dx) % dy, v / (dx * dy)];
            near_sheet[v] || neighbours(x, y, z, config.dims).any(|w| distractors[w] == 1)
        });
        if blocked {
            continue;
        }
        for &v in &voxels {
            distractors[v] = 1;
            image[v] = if (v / (dx * dy)) == o[2] + 1 {
                SHEET_CENTER
            } else {
                SHEET_FLANK
            };
        }
        placed += 1;
    }

    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        let mut rng = stream(config.seed, &[2]);
        for v in &mut image {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let positives = truth.iter().filter(|&&b| b == 1).count();
    let achieved = positives as f64 / n as f64;
    let target = config.target_positive_fraction;
    if !(0.5 * target..=2.0 * target).contains(&achieved) {
        return Err(Error::InvalidArgument(format!(
            "achieved positive fraction {achieved:.5} outside [0.5, 2] x target {target}"
        )));
    }

    let spacing = config.spacing_mm;
    Ok(Phantom {
        image: Volume::gray(config.dims, spacing, image)?,
        truth: Volume::mask(config.dims, spacing, truth)?,
        distractors: Volume::mask(config.dims, spacing, distractors)?,
    })
}

/// The 26-neighbourhood of a voxel plus the voxel itself, clipped to bounds.
fn neighbours(x: usize, y: usize, z: usize, dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let [dx, dy, dz] = dims;
    (-1i64..=1).flat_map(move |k| {
        (-1i64..=1).flat_map(move |j| {
            (-1i64..=1).filter_map(move |i| {
                let (a, b, c) = (x as i64 + i, y as i64 + j, z as i64 + k);
                if a < 0 || b < 0 || c < 0 || a >= dx as i64 || b >= dy as i64 || c >= dz as i64 {
                    None
                } else {
                    Some(a as usize + dx * (b as usize + dy * c as usize))
                }
            })
        })
    })
}
