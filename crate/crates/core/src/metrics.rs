//! Voxel-wise confusion counts and overlap scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Metrics are `None` when their denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub counts: Confusion,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub dice: Option<f64>,
    /// Entries skipped per metric when averaging (accuracy, precision, recall, dice).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined: Option<[usize; 4]>,
}

impl EvalReport {
    pub fn from_counts(c: Confusion) -> Self {
        Self {
            counts: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            undefined: None,
        }
    }
}

pub fn confusion(pred: &Volume, truth: &Volume) -> Result<Confusion> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and truth {:?} dims differ",
            pred.dims(),
            truth.dims()
        )));
    }
    let p = pred.require_mask("prediction")?;
    let t = truth.require_mask("truth")?;
    let mut c = Confusion::default();
    for (&a, &b) in p.iter().zip(t) {
        match (a, b) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn evaluate(pred: &Volume, truth: &Volume) -> Result<EvalReport> {
    Ok(EvalReport::from_counts(confusion(pred, truth)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

/// Combines per-volume reports. Both modes carry the summed counts;
/// macro averages each defined metric, micro recomputes from the sums.
pub fn aggregate(reports: &[EvalReport], mode: Averaging) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate zero reports".into(),
        ));
    }
    let mut sum = Confusion::default();
    for r in reports {
        sum.tp += r.counts.tp;
        sum.fp += r.counts.fp;
        sum.fn_ += r.counts.fn_;
        sum.tn += r.counts.tn;
    }
    match mode {
        Averaging::Micro => Ok(EvalReport::from_counts(sum)),
        Averaging::Macro => {
            let (accuracy, sa) = mean(reports.iter().map(|r| r.accuracy));
            let (precision, sp) = mean(reports.iter().map(|r| r.precision));
            let (recall, sr) = mean(reports.iter().map(|r| r.recall));
            let (dice, sd) = mean(reports.iter().map(|r| r.dice));
            Ok(EvalReport {
                counts: sum,
                accuracy,
                precision,
                recall,
                dice,
                undefined: Some([sa, sp, sr, sd]),
            })
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"))
}

/// Fixed-width table, one row per named report.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$} {:>9} {:>9} {:>9} {:>10} {:>9} {:>9} {:>9} {:>9}",
        "volume", "tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "dice"
    );
    for (name, r) in rows {
        let c = r.counts;
        let _ = writeln!(
            s,
            "{:<width$} {:>9} {:>9} {:>9} {:>10} {:>9} {:>9} {:>9} {:>9}",
            name,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            cell(r.accuracy),
            cell(r.precision),
            cell(r.recall),
            cell(r.dice)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> EvalReport {
        EvalReport::from_counts(Confusion { tp, fp, fn_, tn })
    }

    #[test]
    fn hand_counts() {
        let r = counts(1, 7, 0, 504);
        assert_eq!(r.precision, Some(0.125));
        assert_eq!(r.recall, Some(1.0));
        assert!((r.dice.unwrap() - 2.0 / 9.0).abs() < 1e-15);
        assert_eq!(r.accuracy, Some(505.0 / 512.0));
    }

    #[test]
    fn undefined_is_not_nan() {
        let r = counts(0, 0, 0, 10);
        assert_eq!((r.precision, r.recall, r.dice), (None, None, None));
        assert_eq!(r.accuracy, Some(1.0));
    }

    #[test]
    fn evaluate_on_volumes() {
        let t = Volume::mask([2, 2, 1], [1.0; 3], vec![1, 1, 0, 0]).unwrap();
        let p = Volume::mask([2, 2, 1], [1.0; 3], vec![1, 0, 1, 0]).unwrap();
        let c = confusion(&p, &t).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        let wrong = Volume::empty_mask([2, 1, 1], [1.0; 3]).unwrap();
        assert!(evaluate(&wrong, &t).is_err());
    }

    #[test]
    fn macro_skips_undefined() {
        let a = counts(1, 1, 0, 8);
        let b = counts(0, 0, 0, 10);
        let m = aggregate(&[a, b], Averaging::Macro).unwrap();
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.undefined, Some([0, 1, 1, 1]));
        assert!(aggregate(&[], Averaging::Micro).is_err());
    }

    #[test]
    fn table_marks_undefined() {
        let t = format_table(&[("v0".into(), counts(0, 0, 0, 4))]);
        assert!(t.contains("undef") && t.lines().count() == 2);
    }

    #[test]
    fn json_uses_fn_key() {
        let j = serde_json::to_value(counts(1, 2, 3, 4)).unwrap();
        assert_eq!(j["fn"], 3);
        assert!(j["dice"].is_number());
    }
}
