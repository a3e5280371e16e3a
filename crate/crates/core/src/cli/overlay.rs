//! Truth/prediction overlays: coded volume and sagittal PNG slices.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::{write_volume, Volume};
use crate::error::{Error, Result};

pub const NONE: f32 = 0.0;
pub const TRUTH_ONLY: f32 = 1.0;
pub const PRED_ONLY: f32 = 2.0;
pub const OVERLAP: f32 = 3.0;

const RED: Rgb<u8> = Rgb([255, 0, 0]);
const BLUE: Rgb<u8> = Rgb([0, 0, 255]);
const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);

/// Per-voxel code: 0 neither, 1 truth only, 2 prediction only, 3 both.
pub fn overlay_codes(truth: &Volume, pred: &Volume) -> Result<Volume> {
    if truth.dims() != pred.dims() {
        return Err(Error::Shape(format!(
            "truth {:?} and prediction {:?} dims differ",
            truth.dims(),
            pred.dims()
        )));
    }
    let t = truth.require_mask("truth")?;
    let p = pred.require_mask("prediction")?;
    let codes = t
        .iter()
        .zip(p)
        .map(|(&t, &p)| match (t, p) {
            (1, 1) => OVERLAP,
            (1, _) => TRUTH_ONLY,
            (_, 1) => PRED_ONLY,
            _ => NONE,
        })
        .collect();
    Volume::gray(truth.dims(), truth.spacing(), codes)
}

/// Sagittal slice `x` (y across, z up) of `image` with `codes` painted over it.
pub fn render_slice(image: &Volume, codes: &Volume, x: usize) -> Result<RgbImage> {
    let img = image.require_gray("overlay image")?;
    let [_, dy, dz] = image.dims();
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::new(dy as u32, dz as u32);
    for z in 0..dz {
        for y in 0..dy {
            let i = image.index(x, y, z);
            let px = match codes.value(i) {
                c if c == TRUTH_ONLY => RED,
                c if c == PRED_ONLY => BLUE,
                c if c == OVERLAP => YELLOW,
                _ => {
                    let g = (((img[i] - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
                    Rgb([g, g, g])
                }
            };
            out.put_pixel(y as u32, (dz - 1 - z) as u32, px);
        }
    }
    Ok(out)
}

/// Writes `overlay.vvol` and one `sagittal_XXX.png` per x slice (only
/// slices with any labelled voxel when `labeled_only`). Returns the number
/// of PNGs written.
pub fn write_overlay(
    image: &Volume,
    truth: &Volume,
    pred: &Volume,
    dir: impl AsRef<Path>,
    labeled_only: bool,
) -> Result<usize> {
    if image.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and truth {:?} dims differ",
            image.dims(),
            truth.dims()
        )));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let codes = overlay_codes(truth, pred)?;
    write_volume(&codes, dir.join("overlay.vvol"))?;
    let [dx, dy, dz] = image.dims();
    let mut written = 0;
    for x in 0..dx {
        let labeled = (0..dz).any(|z| (0..dy).any(|y| codes.value(image.index(x, y, z)) != NONE));
        if labeled_only && !labeled {
            continue;
        }
        render_slice(image, &codes, x)?.save(dir.join(format!("sagittal_{x:03}.png")))?;
        written += 1;
    }
    Ok(written)
}
