//! Volume-level train/validation/test assignment with subject grouping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be nonnegative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Assigns each volume a split so that no subject spans two splits.
///
/// Subjects are shuffled with `seed`, then handed out in order: train
/// until it holds `round(n·train)` volumes, then validation until the
/// running total reaches `round(n·(train+validation))`, then test.
pub fn assign_splits(
    subjects: &[u64],
    fractions: &SplitFractions,
    seed: u64,
) -> Result<Vec<Split>> {
    fractions.validate()?;
    let n = subjects.len();
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &s) in subjects.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut order: Vec<u64> = groups.keys().copied().collect();
    order.shuffle(&mut stream(seed, &[0x5717]));

    let train_target = (n as f64 * fractions.train).round() as usize;
    let val_target = (n as f64 * (fractions.train + fractions.validation)).round() as usize;
    let mut out = vec![Split::Test; n];
    let mut assigned = 0;
    for s in order {
        let members = &groups[&s];
        let split = if assigned < train_target {
            Split::Train
        } else if assigned < val_target {
            Split::Validation
        } else {
            Split::Test
        };
        for &i in members {
            out[i] = split;
        }
        assigned += members.len();
    }
    Ok(out)
}
