//! V-Net style encoder–decoder.
//!
//! Layout for `stages = S`, channel width `c_s = base·2^s`:
//!
//! ```text
//! enc s  (s < S):  conv(k³)+SeLU × convs_per_stage, + residual (1³ projection if widths differ)
//! down s:          conv(2³, stride 2)+SeLU            c_s → c_{s+1}
//! bottleneck:      residual block at c_S, dropout
//! up s:            transposed conv(2³, stride 2)+SeLU  c_{s+1} → c_s
//! dec s:           concat(up s, enc s) → residual block (1³ projection 2c_s → c_s), dropout
//! head:            conv(1³) c_0 → 1, sigmoid
//! ```

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{DiffTensor, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub convs_per_stage: usize,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub input_patch_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            base_channels: 8,
            convs_per_stage: 2,
            kernel_size: 3,
            dropout_rate: 0.6,
            input_patch_size: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stages == 0 || self.base_channels == 0 || self.convs_per_stage == 0 {
            return bad(format!(
                "stages, base_channels and convs_per_stage must be positive: {self:?}"
            ));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        let factor = 1usize << self.stages;
        if self.input_patch_size == 0 || !self.input_patch_size.is_multiple_of(factor) {
            return bad(format!(
                "input_patch_size {} must be a positive multiple of 2^stages = {factor}",
                self.input_patch_size
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Ordered layer list; parameter shapes are a pure function of it.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let k = self.kernel_size;
        let mut out = Vec::new();
        let conv = |name: String, cin, cout, kernel, stride| LayerSpec {
            name,
            kind: LayerKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
            },
        };
        for s in 0..self.stages {
            let cin = if s == 0 { 1 } else { self.channels(s) };
            let c = self.channels(s);
            for j in 0..self.convs_per_stage {
                out.push(conv(
                    format!("enc{s}.conv{j}"),
                    if j == 0 { cin } else { c },
                    c,
                    k,
                    1,
                ));
            }
            if cin != c {
                out.push(conv(format!("enc{s}.proj"), cin, c, 1, 1));
            }
            out.push(conv(format!("down{s}"), c, self.channels(s + 1), 2, 2));
        }
        let cb = self.channels(self.stages);
        for j in 0..self.convs_per_stage {
            out.push(conv(format!("bottleneck.conv{j}"), cb, cb, k, 1));
        }
        for s in (0..self.stages).rev() {
            let c = self.channels(s);
            out.push(LayerSpec {
                name: format!("up{s}"),
                kind: LayerKind::Up {
                    in_channels: self.channels(s + 1),
                    out_channels: c,
                    stride: 2,
                },
            });
            for j in 0..self.convs_per_stage {
                out.push(conv(
                    format!("dec{s}.conv{j}"),
                    if j == 0 { 2 * c } else { c },
                    c,
                    k,
                    1,
                ));
            }
            out.push(conv(format!("dec{s}.proj"), 2 * c, c, 1, 1));
        }
        out.push(conv("head".into(), self.channels(0), 1, 1, 1));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .flat_map(|l| l.parameter_shapes())
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Up {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    /// `(name, shape)` of each tensor owned by the layer.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    format!("{}.weight", self.name),
                    vec![out_channels, in_channels, kernel, kernel, kernel],
                ),
                (format!("{}.bias", self.name), vec![out_channels]),
            ],
            LayerKind::Up {
                in_channels,
                out_channels,
                stride,
            } => vec![(
                format!("{}.weight", self.name),
                vec![in_channels, out_channels, stride, stride, stride],
            )],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel.pow(3),
            LayerKind::Up {
                in_channels,
                stride,
                ..
            } => in_channels * stride.pow(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub tensor: DiffTensor<T>,
}

/// Tape handles of the parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters<T> {
    config: NetworkConfig,
    params: Vec<NamedParam<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> NetworkParameters<T> {
    /// Fresh parameters: kernels ~ N(0, 1/fan_in), biases zero.
    pub fn build<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for layer in config.layers() {
            let std = (1.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for (name, shape) in layer.parameter_shapes() {
                let len = shape.iter().product();
                let values = if name.ends_with(".bias") {
                    vec![T::zero(); len]
                } else {
                    (0..len).map(|_| T::of(normal.sample(rng))).collect()
                };
                params.push(NamedParam {
                    name,
                    tensor: DiffTensor::new(shape, values)?.with_grad(),
                });
            }
        }
        Self::from_parts(config, params)
    }

    /// Reassembles parameters, checking names and shapes against `config`.
    pub fn from_parts(config: NetworkConfig, params: Vec<NamedParam<T>>) -> Result<Self> {
        config.validate()?;
        let expected: Vec<(String, Vec<usize>)> = config
            .layers()
            .iter()
            .flat_map(|l| l.parameter_shapes())
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "config expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter mismatch: expected {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Self {
            config,
            params,
            index,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&DiffTensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.tensor.values().iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParameters<U> {
        NetworkParameters {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter onto `tape`. With `with_grad == false` they
    /// enter as constants and no parameter gradients are computed.
    pub fn bind(&self, tape: &mut Tape<T>, with_grad: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| {
                    let mut t =
                        DiffTensor::new(p.tensor.shape().to_vec(), p.tensor.values().to_vec())
                            .expect("parameter shape is consistent");
                    t.set_requires_grad(with_grad);
                    tape.leaf(t)
                })
                .collect(),
        )
    }

    /// Adds the tape gradients of the bound copies into the parameter buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Var {
        bound.0[self.index[name]]
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
        layer: &str,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let w = self.var(bound, &format!("{layer}.weight"));
        let b = self.var(bound, &format!("{layer}.bias"));
        tape.conv3d(x, w, b, stride, padding)
    }

    fn residual_block(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
        prefix: &str,
    ) -> Result<Var> {
        let pad = self.config.kernel_size / 2;
        let mut h = x;
        for j in 0..self.config.convs_per_stage {
            let y = self.conv(tape, bound, h, &format!("{prefix}.conv{j}"), 1, pad)?;
            h = tape.selu(y);
        }
        let proj = format!("{prefix}.proj.weight");
        let skip = if self.index.contains_key(&proj) {
            self.conv(tape, bound, x, &format!("{prefix}.proj"), 1, 0)?
        } else {
            x
        };
        tape.add(h, skip)
    }

    /// Per-voxel foreground probabilities for a `[N,1,P,P,P]` batch.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let p = self.config.input_patch_size;
        let shape = tape.shape(input);
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [p, p, p] {
            return Err(Error::Shape(format!(
                "network expects [N, 1, {p}, {p}, {p}] input, got {shape:?}"
            )));
        }
        let rate = self.config.dropout_rate;
        let mut skips = Vec::with_capacity(self.config.stages);
        let mut x = input;
        for s in 0..self.config.stages {
            let e = self.residual_block(tape, bound, x, &format!("enc{s}"))?;
            skips.push(e);
            let d = self.conv(tape, bound, e, &format!("down{s}"), 2, 0)?;
            x = tape.selu(d);
        }
        x = self.residual_block(tape, bound, x, "bottleneck")?;
        x = tape.dropout(x, rate, training, rng)?;
        for s in (0..self.config.stages).rev() {
            let w = self.var(bound, &format!("up{s}.weight"));
            let u = tape.conv3d_transposed(x, w, 2)?;
            let u = tape.selu(u);
            let c = tape.concat_channels(u, skips[s])?;
            x = self.residual_block(tape, bound, c, &format!("dec{s}"))?;
            x = tape.dropout(x, rate, training, rng)?;
        }
        let logits = self.conv(tape, bound, x, "head", 1, 0)?;
        Ok(tape.sigmoid(logits))
    }

    /// Inference on a batch of cubic patches (dropout off).
    pub fn predict(&self, patches: &[T], batch: usize) -> Result<Vec<T>> {
        let p = self.config.input_patch_size;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let input = tape.constant(vec![batch, 1, p, p, p], patches.to_vec())?;
        // Never sampled with training = false.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, input, false, &mut rng)?;
        Ok(tape.value(out).to_vec())
    }
}
