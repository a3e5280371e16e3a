//! Volumes, phantoms, patch sampling, tiling and dataset splits.

mod patch;
mod phantom;
mod split;
mod volume;

pub use patch::{
    extract_patch, extract_tiles, rotate_patch, sample_training_patches, stitch, tile_volume, Axis,
    PatchKind, PatchSpec, Rotation, SamplerConfig, TrainingPatch,
};
pub use phantom::{generate_phantom, Phantom, PhantomConfig};
pub use split::{assign_splits, Split, SplitFractions};
pub use volume::{
    read_volume, write_volume, Dtype, Volume, VolumeData, VVOL_HEADER_LEN, VVOL_MAGIC,
};
