//! Phantom datasets on disk: VVOL pairs plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::Labeled;
use crate::data::{
    assign_splits, generate_phantom, read_volume, write_volume, PhantomConfig, Split,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const MANIFEST: &str = "manifest.json";
const GEN: u64 = 0x6e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub name: String,
    pub subject: u64,
    pub split: Split,
    pub phantom_seed: u64,
    pub image: String,
    pub truth: String,
    pub distractors: String,
    pub positive_voxels: usize,
    pub positive_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: serde_json::Value,
    pub counts: SplitCounts,
    pub volumes: Vec<VolumeEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &VolumeEntry> {
        self.volumes.iter().filter(move |v| v.split == split)
    }

    /// Reads every volume of `split` from `dir`.
    pub fn load_split(&self, dir: impl AsRef<Path>, split: Split) -> Result<Vec<Labeled>> {
        let dir = dir.as_ref();
        self.entries(split)
            .map(|e| {
                Ok(Labeled {
                    name: e.name.clone(),
                    image: read_volume(dir.join(&e.image))?,
                    truth: read_volume(dir.join(&e.truth))?,
                })
            })
            .collect()
    }
}

/// Writes `cfg.volumes` phantoms and the manifest into `dir`.
pub fn generate_dataset(cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let dir: PathBuf = dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let subjects: Vec<u64> = (0..cfg.volumes as u64).collect();
    let splits = assign_splits(&subjects, &cfg.split, cfg.seed)?;

    let entries: Vec<Result<VolumeEntry>> = (0..cfg.volumes)
        .into_par_iter()
        .map(|i| {
            let name = format!("vol{i:03}");
            let phantom_seed = derive_seed(cfg.seed, &[GEN, i as u64]);
            let phantom = generate_phantom(&PhantomConfig {
                seed: phantom_seed,
                ..cfg.phantom
            })?;
            let entry = VolumeEntry {
                image: format!("{name}_image.vvol"),
                truth: format!("{name}_truth.vvol"),
                distractors: format!("{name}_distractors.vvol"),
                positive_voxels: phantom.truth.count_positive(),
                positive_fraction: phantom.truth.count_positive() as f64
                    / phantom.truth.len() as f64,
                subject: subjects[i],
                split: splits[i],
                phantom_seed,
                name,
            };
            write_volume(&phantom.image, dir.join(&entry.image))?;
            write_volume(&phantom.truth, dir.join(&entry.truth))?;
            write_volume(&phantom.distractors, dir.join(&entry.distractors))?;
            Ok(entry)
        })
        .collect();
    let volumes = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let count = |s| splits.iter().filter(|&&x| x == s).count();
    let mut config = cfg.to_json();
    if let Some(map) = config.as_object_mut() {
        for k in ["data_dir", "run_dir", "workers"] {
            map.remove(k);
        }
    }
    let manifest = Manifest {
        seed: cfg.seed,
        config,
        counts: SplitCounts {
            train: count(Split::Train),
            validation: count(Split::Validation),
            test: count(Split::Test),
        },
        volumes,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
