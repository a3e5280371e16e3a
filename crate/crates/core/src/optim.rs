//! AMSGrad.
//!
//! Per element, with gradient `g` at step `t`:
//!
//! ```text
//! m     ← β₁·m + (1−β₁)·g
//! v     ← β₂·v + (1−β₂)·g²
//! v̂     ← max(v̂, v)
//! θ     ← θ − lr · (m / (1−β₁ᵗ)) / (√v̂ + eps)
//! ```
//!
//! Only the first moment is bias-corrected. `v̂` never decreases, so the
//! effective per-element step size never grows.

use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::vnet::NamedParam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmsgradConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AmsgradConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AmsgradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Which second-moment estimate divides the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SecondMoment {
    /// `v̂ = max(v̂, v)`: AMSGrad.
    #[default]
    RunningMax,
    /// `v̂ = v`: Adam without second-moment bias correction.
    Current,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub v_hat: Vec<T>,
}

impl<T: Real> Moments<T> {
    fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            v_hat: vec![T::zero(); len],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AmsgradConfig,
    pub rule: SecondMoment,
    pub step_count: u64,
    /// Lazily sized on the first step to match the parameter list.
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AmsgradConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rule: SecondMoment::RunningMax,
            step_count: 0,
            moments: Vec::new(),
        })
    }

    pub fn with_rule(mut self, rule: SecondMoment) -> Self {
        self.rule = rule;
        self
    }

    /// Applies one update from the populated grads, then zeroes them.
    ///
    /// Every gradient is checked before anything is modified, so a rejected
    /// step leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [NamedParam<T>]) -> Result<()> {
        for p in params.iter() {
            let g = p.tensor.grad().ok_or_else(|| Error::MissingGradient {
                name: p.name.clone(),
            })?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments::zeros(p.tensor.len()))
                .collect();
        }
        if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.m.len() != p.tensor.len())
        {
            return Err(Error::Shape(
                "optimizer state does not match the parameter list".into(),
            ));
        }

        self.step_count += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let correction = T::of(1.0 - c.beta1.powi(self.step_count.min(i32::MAX as u64) as i32));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.eps);

        for (p, mom) in params.iter_mut().zip(&mut self.moments) {
            let (theta, grad) = p.tensor.values_and_grad_mut();
            let grad = grad.expect("checked above");
            for i in 0..theta.len() {
                let g = grad[i];
                mom.m[i] = b1 * mom.m[i] + one_b1 * g;
                mom.v[i] = b2 * mom.v[i] + one_b2 * g * g;
                mom.v_hat[i] = match self.rule {
                    SecondMoment::RunningMax => mom.v_hat[i].max(mom.v[i]),
                    SecondMoment::Current => mom.v[i],
                };
                let m_hat = mom.m[i] / correction;
                theta[i] -= lr * m_hat / (mom.v_hat[i].sqrt() + eps);
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}

/// Sets every gradient buffer to zero.
pub fn zero_grads<T: Real>(params: &mut [NamedParam<T>]) {
    for p in params {
        p.tensor.zero_grad();
    }
}
