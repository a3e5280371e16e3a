//! Tiled whole-volume inference.

use rayon::prelude::*;

use crate::data::{extract_tiles, stitch, PatchSpec, Volume};
use crate::error::Result;
use crate::vnet::NetworkParameters;

/// Probability map of `image`: disjoint tiles of the network's patch size,
/// each predicted on its own, stitched and cropped back to `image.dims()`.
pub fn predict_volume(net: &NetworkParameters<f32>, image: &Volume) -> Result<Volume> {
    image.require_gray("prediction input")?;
    let p = net.config().input_patch_size;
    let tiles = extract_tiles(image, p)?;
    let spacing = [1.0; 3];
    let predicted: Vec<Result<(PatchSpec, Volume)>> = tiles
        .par_iter()
        .map(|(spec, tile)| {
            let out = net.predict(tile.as_gray().expect("gray tile"), 1)?;
            Ok((*spec, Volume::gray([p; 3], spacing, out)?))
        })
        .collect();
    let predicted = predicted.into_iter().collect::<Result<Vec<_>>>()?;
    stitch(&predicted, image.dims(), image.spacing())
}
