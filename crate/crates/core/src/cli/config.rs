//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! `RunConfig::keys()` lists every key with its default and meaning.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::data::{Axis, PhantomConfig, SamplerConfig, SplitFractions};
use crate::error::{Error, Result};
use crate::losses::TverskyParams;
use crate::optim::AmsgradConfig;
use crate::postproc::{Connectivity, PostprocConfig};
use crate::vnet::NetworkConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub volumes: usize,
    pub phantom: PhantomConfig,
    pub split: SplitFractions,
    pub network: NetworkConfig,
    pub loss: TverskyParams,
    pub optimizer: AmsgradConfig,
    pub sampler: SamplerConfig,
    pub rotate: bool,
    pub rotation_axis: Axis,
    pub epochs: usize,
    pub batch_size: usize,
    pub postproc: PostprocConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
            volumes: 40,
            phantom: PhantomConfig::default(),
            split: SplitFractions::default(),
            network: NetworkConfig::default(),
            loss: TverskyParams::default(),
            optimizer: AmsgradConfig::default(),
            sampler: SamplerConfig::default(),
            rotate: true,
            rotation_axis: Axis::X,
            epochs: 50,
            batch_size: 2,
            postproc: PostprocConfig::default(),
        }
    }
}

/// One documented configuration key.
#[derive(Clone, Debug, Serialize)]
pub struct KeyDoc {
    pub key: &'static str,
    pub value: String,
    pub doc: &'static str,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected a boolean, got {other:?}"
        ))),
    }
}

fn parse_triple<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [one] => Ok([parse(key, one)?; 3]),
        [a, b, c] => Ok([parse(key, a)?, parse(key, b)?, parse(key, c)?]),
        _ => Err(Error::Config(format!(
            "{key}: expected 1 or 3 comma-separated values, got {value:?}"
        ))),
    }
}

fn triple<T: ToString + PartialEq>(v: [T; 3]) -> String {
    if v[0] == v[1] && v[1] == v[2] {
        v[0].to_string()
    } else {
        v.map(|x| x.to_string()).join(",")
    }
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::X => "x",
        Axis::Y => "y",
        Axis::Z => "z",
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "run_dir" => self.run_dir = PathBuf::from(value),
            "volumes" => self.volumes = parse(key, value)?,
            "phantom.dims" => self.phantom.dims = parse_triple(key, value)?,
            "phantom.spacing_mm" => self.phantom.spacing_mm = parse_triple(key, value)?,
            "phantom.sheet_thickness_vox" => self.phantom.sheet_thickness_vox = parse(key, value)?,
            "phantom.positive_fraction" => {
                self.phantom.target_positive_fraction = parse(key, value)?
            }
            "phantom.noise_sigma" => self.phantom.noise_sigma = parse(key, value)?,
            "phantom.distractors" => self.phantom.distractor_count = parse(key, value)?,
            "split.train" => self.split.train = parse(key, value)?,
            "split.validation" => self.split.validation = parse(key, value)?,
            "split.test" => self.split.test = parse(key, value)?,
            "net.stages" => self.network.stages = parse(key, value)?,
            "net.base_channels" => self.network.base_channels = parse(key, value)?,
            "net.convs_per_stage" => self.network.convs_per_stage = parse(key, value)?,
            "net.kernel_size" => self.network.kernel_size = parse(key, value)?,
            "net.dropout_rate" => self.network.dropout_rate = parse(key, value)?,
            "net.patch_size" => self.network.input_patch_size = parse(key, value)?,
            "loss.alpha" => self.loss.alpha = parse(key, value)?,
            "loss.beta" => self.loss.beta = parse(key, value)?,
            "loss.epsilon" => self.loss.epsilon = parse(key, value)?,
            "optim.learning_rate" => self.optimizer.learning_rate = parse(key, value)?,
            "optim.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "optim.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "optim.eps" => self.optimizer.eps = parse(key, value)?,
            "sampler.patches_per_volume" => self.sampler.count = parse(key, value)?,
            "sampler.positive_ratio" => self.sampler.positive_ratio = parse(key, value)?,
            "sampler.max_retries" => self.sampler.max_retries = parse(key, value)?,
            "augment.rotate" => self.rotate = parse_bool(key, value)?,
            "augment.rotation_axis" => self.rotation_axis = value.parse()?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "postproc.keep" => self.postproc.keep = parse(key, value)?,
            "postproc.connectivity" => {
                self.postproc.connectivity = value.parse::<Connectivity>()?
            }
            "postproc.threshold" => self.postproc.threshold = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// The sampler settings with the network's patch edge.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            patch_size: self.network.input_patch_size,
            ..self.sampler
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.split.validate()?;
        let p = PhantomConfig {
            seed: self.seed,
            ..self.phantom
        };
        p.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.volumes == 0 || self.batch_size == 0 || self.sampler.count == 0 {
            return Err(Error::Config(
                "volumes, train.batch_size and sampler.patches_per_volume must be positive".into(),
            ));
        }
        if self.postproc.keep == 0 {
            return Err(Error::Config("postproc.keep must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sampler.positive_ratio) {
            return Err(Error::Config(
                "sampler.positive_ratio must lie in [0, 1]".into(),
            ));
        }
        let patch = self.network.input_patch_size;
        if self.phantom.dims.iter().any(|&d| d < patch) {
            return Err(Error::Config(format!(
                "phantom.dims {:?} smaller than net.patch_size {patch}",
                self.phantom.dims
            )));
        }
        Ok(())
    }

    /// Every key, its current value, and what it controls.
    pub fn keys(&self) -> Vec<KeyDoc> {
        let d = |key, value: String, doc| KeyDoc { key, value, doc };
        vec![
            d(
                "seed",
                self.seed.to_string(),
                "global seed; every random stream derives from it",
            ),
            d(
                "workers",
                self.workers.to_string(),
                "threads for data preparation and tiled inference",
            ),
            d(
                "data_dir",
                self.data_dir.display().to_string(),
                "dataset directory written by gen",
            ),
            d(
                "run_dir",
                self.run_dir.display().to_string(),
                "checkpoints and logs written by train",
            ),
            d(
                "volumes",
                self.volumes.to_string(),
                "number of phantom volumes generated",
            ),
            d(
                "phantom.dims",
                triple(self.phantom.dims),
                "volume extent in voxels (x,y,z)",
            ),
            d(
                "phantom.spacing_mm",
                triple(self.phantom.spacing_mm),
                "voxel spacing in mm",
            ),
            d(
                "phantom.sheet_thickness_vox",
                self.phantom.sheet_thickness_vox.to_string(),
                "bright sheet thickness",
            ),
            d(
                "phantom.positive_fraction",
                self.phantom.target_positive_fraction.to_string(),
                "target foreground fraction",
            ),
            d(
                "phantom.noise_sigma",
                self.phantom.noise_sigma.to_string(),
                "Gaussian noise standard deviation",
            ),
            d(
                "phantom.distractors",
                self.phantom.distractor_count.to_string(),
                "bright speckles away from the sheet",
            ),
            d(
                "split.train",
                self.split.train.to_string(),
                "fraction of volumes for training",
            ),
            d(
                "split.validation",
                self.split.validation.to_string(),
                "fraction of volumes for validation",
            ),
            d(
                "split.test",
                self.split.test.to_string(),
                "fraction of volumes for testing",
            ),
            d(
                "net.stages",
                self.network.stages.to_string(),
                "encoder levels before the bottleneck",
            ),
            d(
                "net.base_channels",
                self.network.base_channels.to_string(),
                "channels at the first level",
            ),
            d(
                "net.convs_per_stage",
                self.network.convs_per_stage.to_string(),
                "convolutions per residual block",
            ),
            d(
                "net.kernel_size",
                self.network.kernel_size.to_string(),
                "odd convolution kernel edge",
            ),
            d(
                "net.dropout_rate",
                self.network.dropout_rate.to_string(),
                "dropout after bottleneck and decoder levels",
            ),
            d(
                "net.patch_size",
                self.network.input_patch_size.to_string(),
                "cubic patch edge for training and tiling",
            ),
            d(
                "loss.alpha",
                self.loss.alpha.to_string(),
                "Tversky weight on false negatives",
            ),
            d(
                "loss.beta",
                self.loss.beta.to_string(),
                "Tversky weight on false positives",
            ),
            d(
                "loss.epsilon",
                self.loss.epsilon.to_string(),
                "Tversky smoothing term",
            ),
            d(
                "optim.learning_rate",
                self.optimizer.learning_rate.to_string(),
                "AMSGrad step size",
            ),
            d(
                "optim.beta1",
                self.optimizer.beta1.to_string(),
                "first-moment decay",
            ),
            d(
                "optim.beta2",
                self.optimizer.beta2.to_string(),
                "second-moment decay",
            ),
            d(
                "optim.eps",
                self.optimizer.eps.to_string(),
                "denominator offset",
            ),
            d(
                "sampler.patches_per_volume",
                self.sampler.count.to_string(),
                "training patches drawn per volume per epoch",
            ),
            d(
                "sampler.positive_ratio",
                self.sampler.positive_ratio.to_string(),
                "probability a patch is centred on foreground",
            ),
            d(
                "sampler.max_retries",
                self.sampler.max_retries.to_string(),
                "draw limit for all-negative patches",
            ),
            d(
                "augment.rotate",
                self.rotate.to_string(),
                "random 90-degree rotations of training patches",
            ),
            d(
                "augment.rotation_axis",
                axis_name(self.rotation_axis).to_string(),
                "rotation axis (x, y or z)",
            ),
            d("train.epochs", self.epochs.to_string(), "training epochs"),
            d(
                "train.batch_size",
                self.batch_size.to_string(),
                "patches per optimizer step",
            ),
            d(
                "postproc.keep",
                self.postproc.keep.to_string(),
                "largest components kept",
            ),
            d(
                "postproc.connectivity",
                self.postproc.connectivity.neighbours().to_string(),
                "voxel adjacency: 6, 18 or 26",
            ),
            d(
                "postproc.threshold",
                self.postproc.threshold.to_string(),
                "probability threshold for the binary map",
            ),
        ]
    }

    /// The configuration as `key = value` text that `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in self.keys() {
            s.push_str(&format!("# {}\n{} = {}\n", k.doc, k.key, k.value));
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.keys()
                .into_iter()
                .map(|k| (k.key.to_string(), serde_json::Value::String(k.value)))
                .collect(),
        )
    }
}
