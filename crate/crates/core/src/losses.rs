//! Tversky overlap index and loss.
//!
//! Soft counts over a probability map `p` and binary truth `g`:
//!
//! ```text
//! TP = Σ p·g        FN = Σ (1−p)·g        FP = Σ p·(1−g)
//! T  = (TP + ε) / (TP + α·FN + β·FP + ε)
//! ```
//!
//! `α` weighs missed foreground and `β` weighs spurious foreground, so
//! `β > α` penalises false positives harder. `α = β = ½` recovers soft Dice.

use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.6,
            epsilon: 1e-6,
        }
    }
}

impl TverskyParams {
    pub fn new(alpha: f64, beta: f64, epsilon: f64) -> Result<Self> {
        let p = Self {
            alpha,
            beta,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tversky weights need alpha, beta >= 0 and alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tversky epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Builds `T` from the per-sample soft counts `TP`, `Σp`, `Σg`.
fn index_from_sums<T: Real>(
    tape: &mut Tape<T>,
    tp: Var,
    pred_sum: Var,
    truth_sum: Var,
    params: &TverskyParams,
) -> Result<Var> {
    // FN = Σg − TP,  FP = Σp − TP
    let fn_ = tape.sub(truth_sum, tp)?;
    let fp = tape.sub(pred_sum, tp)?;
    let wfn = tape.scale(fn_, params.alpha);
    let wfp = tape.scale(fp, params.beta);
    let numer = tape.add_scalar(tp, params.epsilon);
    let errors = tape.add(wfn, wfp)?;
    let denom = tape.add(numer, errors)?;
    tape.div(numer, denom)
}

fn check_operands<T: Real>(tape: &Tape<T>, pred: Var, truth: Var) -> Result<()> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(Error::Shape(format!(
            "tversky: prediction {:?} vs truth {:?}",
            tape.shape(pred),
            tape.shape(truth)
        )));
    }
    Ok(())
}

/// Tversky index over every voxel of `pred`, as a `[1]` tensor.
pub fn tversky_index<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: Var,
    params: &TverskyParams,
) -> Result<Var> {
    params.validate()?;
    check_operands(tape, pred, truth)?;
    let overlap = tape.mul(pred, truth)?;
    let tp = tape.sum(overlap);
    let pred_sum = tape.sum(pred);
    let truth_sum = tape.sum(truth);
    index_from_sums(tape, tp, pred_sum, truth_sum, params)
}

/// Per-sample Tversky indices of a `[N, ...]` batch, as an `[N]` tensor.
pub fn tversky_index_per_sample<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: Var,
    params: &TverskyParams,
) -> Result<Var> {
    params.validate()?;
    check_operands(tape, pred, truth)?;
    let overlap = tape.mul(pred, truth)?;
    let tp = tape.sample_sums(overlap);
    let pred_sum = tape.sample_sums(pred);
    let truth_sum = tape.sample_sums(truth);
    index_from_sums(tape, tp, pred_sum, truth_sum, params)
}

/// `mean_n (1 − T_n)` over the batch axis.
pub fn tversky_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: Var,
    params: &TverskyParams,
) -> Result<Var> {
    let index = tversky_index_per_sample(tape, pred, truth, params)?;
    let negated = tape.scale(index, -1.0);
    let losses = tape.add_scalar(negated, 1.0);
    Ok(tape.mean(losses))
}

/// Soft Dice `2TP / (2TP + FN + FP)`, computed directly; reference for the
/// `α = β = ½` case.
pub fn soft_dice(pred: &[f64], truth: &[f64]) -> f64 {
    let tp: f64 = pred.iter().zip(truth).map(|(p, g)| p * g).sum();
    let fn_: f64 = pred.iter().zip(truth).map(|(p, g)| (1.0 - p) * g).sum();
    let fp: f64 = pred.iter().zip(truth).map(|(p, g)| p * (1.0 - g)).sum();
    2.0 * tp / (2.0 * tp + fn_ + fp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index_of(pred: &[f64], truth: &[f64], params: &TverskyParams) -> f64 {
        let mut t = Tape::<f64>::new();
        let p = t.constant(vec![pred.len()], pred.to_vec()).unwrap();
        let g = t.constant(vec![truth.len()], truth.to_vec()).unwrap();
        let idx = tversky_index(&mut t, p, g, params).unwrap();
        t.value(idx)[0]
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let t = index_of(&truth, &truth, &TverskyParams::default());
        assert!((t - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_counted_case() {
        // TP=1, FN=0, FP=7 → 1/(1 + 0.6·7)
        let mut truth = [0.0; 8];
        truth[3] = 1.0;
        let t = index_of(&[1.0; 8], &truth, &TverskyParams::default());
        assert!((t - 1.0 / 5.2).abs() < 1e-6, "{t}");
    }

    #[test]
    fn empty_truth_and_prediction_is_one() {
        let t = index_of(&[0.0; 16], &[0.0; 16], &TverskyParams::default());
        assert_eq!(t, 1.0);
    }

    #[test]
    fn inverted_prediction_loses_everything() {
        let truth = [1.0, 0.0, 0.0, 1.0, 0.0];
        let pred: Vec<f64> = truth.iter().map(|g| 1.0 - g).collect();
        let mut t = Tape::<f64>::new();
        let p = t.constant(vec![1, 5], pred).unwrap();
        let g = t.constant(vec![1, 5], truth.to_vec()).unwrap();
        let loss = tversky_loss(&mut t, p, g, &TverskyParams::default()).unwrap();
        assert!((t.value(loss)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_weights_match_soft_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = TverskyParams::new(0.5, 0.5, 1e-300).unwrap();
        for _ in 0..20 {
            let pred: Vec<f64> = (0..50).map(|_| rng.random()).collect();
            let truth: Vec<f64> = (0..50).map(|_| f64::from(rng.random_bool(0.3))).collect();
            let t = index_of(&pred, &truth, &params);
            assert!((t - soft_dice(&pred, &truth)).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_params_and_shapes() {
        assert!(TverskyParams::new(0.0, 0.0, 1e-6).is_err());
        assert!(TverskyParams::new(0.4, 0.6, 0.0).is_err());
        let mut t = Tape::<f64>::new();
        let p = t.constant(vec![4], vec![0.5; 4]).unwrap();
        let g = t.constant(vec![5], vec![0.0; 5]).unwrap();
        assert!(matches!(
            tversky_index(&mut t, p, g, &TverskyParams::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn batch_loss_averages_per_sample() {
        let mut t = Tape::<f64>::new();
        // sample 0 perfect, sample 1 fully inverted
        let p = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = t.constant(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = tversky_loss(&mut t, p, g, &TverskyParams::default()).unwrap();
        assert!((t.value(loss)[0] - 0.5).abs() < 1e-6);
    }
}
