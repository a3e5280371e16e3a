//! Patch-based training with per-epoch validation.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::infer::predict_volume;
use crate::data::{rotate_patch, sample_training_patches, Rotation, TrainingPatch, Volume};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::losses::{tversky_loss, TverskyParams};
use crate::optim::OptimizerState;
use crate::rng::{derive_seed, stream};
use crate::vnet::{Checkpoint, NetworkParameters};

const INIT: u64 = 1;
const PATCHES: u64 = 2;
const ROTATE: u64 = 3;
const SHUFFLE: u64 = 4;
const DROPOUT: u64 = 5;

/// An image volume and its binary truth.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub name: String,
    pub image: Volume,
    pub truth: Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_tversky: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub records: Vec<EpochRecord>,
}

/// Soft Tversky index of a probability map against a binary mask.
pub fn tversky_of_maps(prob: &[f32], truth: &[u8], params: &TverskyParams) -> f64 {
    let (mut tp, mut ps, mut gs) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in prob.iter().zip(truth) {
        let p = f64::from(p);
        let g = f64::from(g);
        tp += p * g;
        ps += p;
        gs += g;
    }
    let fn_ = gs - tp;
    let fp = ps - tp;
    (tp + params.epsilon) / (tp + params.alpha * fn_ + params.beta * fp + params.epsilon)
}

fn epoch_patches(cfg: &RunConfig, volumes: &[Labeled], epoch: usize) -> Result<Vec<TrainingPatch>> {
    let sampler = cfg.sampler_config();
    let per_volume: Vec<Result<Vec<TrainingPatch>>> = volumes
        .par_iter()
        .enumerate()
        .map(|(v, vol)| {
            let seed = derive_seed(cfg.seed, &[PATCHES, epoch as u64, v as u64]);
            let mut patches = sample_training_patches(&vol.image, &vol.truth, &sampler, seed)?;
            if cfg.rotate {
                for (i, p) in patches.iter_mut().enumerate() {
                    let mut rng = stream(cfg.seed, &[ROTATE, epoch as u64, v as u64, i as u64]);
                    let rotation = Rotation::ALL[rng.random_range(0..4)];
                    let (image, truth) =
                        rotate_patch(&p.image, &p.truth, rotation, cfg.rotation_axis)?;
                    p.image = image;
                    p.truth = truth;
                    p.spec.rotation = rotation;
                    p.spec.axis = cfg.rotation_axis;
                }
            }
            Ok(patches)
        })
        .collect();
    let mut all = Vec::new();
    for p in per_volume {
        all.extend(p?);
    }
    Ok(all)
}

fn batch_tensors(patches: &[&TrainingPatch]) -> (Vec<f32>, Vec<f32>) {
    let mut x = Vec::new();
    let mut g = Vec::new();
    for p in patches {
        x.extend_from_slice(p.image.as_gray().expect("gray patch"));
        g.extend(
            p.truth
                .as_mask()
                .expect("mask patch")
                .iter()
                .map(|&v| f32::from(v)),
        );
    }
    (x, g)
}

/// Loss of one batch; with `optimizer` the gradients are applied.
fn run_batch(
    cfg: &RunConfig,
    net: &mut NetworkParameters<f32>,
    optimizer: Option<&mut OptimizerState<f32>>,
    batch: &[&TrainingPatch],
    dropout_seed: u64,
) -> Result<f64> {
    let p = cfg.network.input_patch_size;
    let (x, g) = batch_tensors(batch);
    let shape = vec![batch.len(), 1, p, p, p];
    let mut tape = Tape::new();
    let learn = optimizer.is_some();
    let bound = net.bind(&mut tape, learn);
    let input = tape.constant(shape.clone(), x)?;
    let truth = tape.constant(shape, g)?;
    let mut rng = stream(dropout_seed, &[]);
    let pred = net.forward(&mut tape, &bound, input, true, &mut rng)?;
    let loss = tversky_loss(&mut tape, pred, truth, &cfg.loss)?;
    let value = f64::from(tape.value(loss)[0]);
    if let Some(opt) = optimizer {
        if value.is_finite() {
            tape.backward(loss)?;
            net.accumulate_grads(&tape, &bound)?;
            opt.step(net.params_mut())?;
        }
    }
    Ok(value)
}

fn validation_tversky(
    cfg: &RunConfig,
    net: &NetworkParameters<f32>,
    volumes: &[Labeled],
) -> Result<Option<f64>> {
    if volumes.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for v in volumes {
        let prob = predict_volume(net, &v.image)?;
        let truth = v.truth.require_mask("validation truth")?;
        total += tversky_of_maps(prob.as_gray().expect("gray"), truth, &cfg.loss);
    }
    Ok(Some(total / volumes.len() as f64))
}

/// Trains from a seeded initialisation. `on_epoch` sees every record as
/// soon as it exists, starting with the untrained epoch 0, together with
/// the new best checkpoint whenever the record is marked best.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Labeled],
    validation: &[Labeled],
    mut on_epoch: impl FnMut(&EpochRecord, Option<&Checkpoint>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("no training volumes".into()));
    }
    let mut net = NetworkParameters::<f32>::build(cfg.network, &mut stream(cfg.seed, &[INIT]))?;
    let mut opt = OptimizerState::new(cfg.optimizer)?;
    let mut records = Vec::with_capacity(cfg.epochs + 1);

    let mut next = epoch_patches(cfg, train_set, 1)?;
    let mut loss0 = 0.0;
    let mut batches0 = 0usize;
    for (b, chunk) in next.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&TrainingPatch> = chunk.iter().collect();
        let l = run_batch(
            cfg,
            &mut net,
            None,
            &batch,
            derive_seed(cfg.seed, &[DROPOUT, 0, b as u64]),
        )?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: b });
        }
        loss0 += l;
        batches0 += 1;
    }
    let val0 = validation_tversky(cfg, &net, validation)?;
    let first = EpochRecord {
        epoch: 0,
        train_loss: loss0 / batches0 as f64,
        val_tversky: val0,
        best: true,
    };
    let mut best = Checkpoint {
        params: net.clone(),
        optimizer: Some(opt.clone()),
    };
    on_epoch(&first, Some(&best))?;
    records.push(first);
    let mut best_epoch = 0;
    let mut best_score = val0.unwrap_or(f64::NEG_INFINITY);

    for epoch in 1..=cfg.epochs {
        let patches = std::mem::take(&mut next);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let mut sum = 0.0;
        let mut count = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingPatch> = idx.iter().map(|&i| &patches[i]).collect();
            let seed = derive_seed(cfg.seed, &[DROPOUT, epoch as u64, b as u64]);
            let l = run_batch(cfg, &mut net, Some(&mut opt), &batch, seed)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sum += l;
            count += 1;
        }
        if epoch < cfg.epochs {
            next = epoch_patches(cfg, train_set, epoch + 1)?;
        }
        let val = validation_tversky(cfg, &net, validation)?;
        let score = val.unwrap_or(-(sum / count as f64));
        let improved = score > best_score;
        if improved {
            best_score = score;
            best_epoch = epoch;
            best = Checkpoint {
                params: net.clone(),
                optimizer: Some(opt.clone()),
            };
        }
        let rec = EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            val_tversky: val,
            best: improved,
        };
        info!(
            "epoch {epoch}: train loss {:.5}, validation Tversky {}",
            rec.train_loss,
            val.map_or("n/a".into(), |v| format!("{v:.5}"))
        );
        on_epoch(&rec, improved.then_some(&best))?;
        records.push(rec);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: Checkpoint {
            params: net,
            optimizer: Some(opt),
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_tversky_hand_case() {
        let prob = [1.0f32; 8];
        let mut truth = [0u8; 8];
        truth[0] = 1;
        let t = tversky_of_maps(&prob, &truth, &TverskyParams::new(0.4, 0.6, 1e-12).unwrap());
        assert!((t - 1.0 / 5.2).abs() < 1e-9);
    }
}
