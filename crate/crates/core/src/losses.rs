//! Training objectives: interval regression on lobe-wise fractions, interval
//! calibration, equivariant consistency, and the bootstrapped refinement loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Tolerance added around the candidate fraction during calibration.
pub const CALIBRATION_TOLERANCE: f64 = 0.05;

/// Probabilities are clamped to this floor before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-8;

/// Closed fraction range `[lower, upper] ⊆ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let iv = Self { lower, upper };
        iv.validate()?;
        Ok(iv)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lower && self.lower <= self.upper && self.upper <= 1.0) {
            return Err(Error::Domain(format!(
                "invalid interval ({}, {})",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }
}

/// Weights of the total objective and the bootstrapping blend factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_regression: f64,
    pub w_equivariance: f64,
    pub w_refinement: f64,
    pub bootstrap_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_regression: 2.0,
            w_equivariance: 1.0,
            w_refinement: 1.0,
            bootstrap_beta: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_regression, self.w_equivariance, self.w_refinement];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.bootstrap_beta) {
            return Err(Error::Config("bootstrap_beta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Squared-hinge interval loss `max(0, (p − m)² − K)` with `m` the midpoint
/// and `K` the squared half-width, and its derivative in `p`.
///
/// `(p − m)² − K` factors as `(p − lower)(p − upper)`, which is evaluated
/// directly so the loss is exactly zero on the closed interval. The
/// derivative is zero inside and on the boundary, `2(p − m)` outside.
pub fn interval_regression_loss(p: f64, interval: &Interval) -> Result<(f64, f64)> {
    interval.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("predicted fraction {p} outside [0, 1]")));
    }
    if interval.contains(p) {
        return Ok((0.0, 0.0));
    }
    let loss = (p - interval.lower) * (p - interval.upper);
    Ok((loss.max(0.0), 2.0 * (p - interval.midpoint())))
}

/// Tightens a score-derived interval around the candidate fraction `p_star`:
/// `lower = max(min(lower*, p* − 0.05), 0)`, `upper = min(upper*, p* + 0.05)`.
/// `lower` is additionally clamped to `upper`; for valid inputs the formula
/// already guarantees `lower <= upper`.
pub fn calibrate_interval(initial: &Interval, p_star: f64) -> Interval {
    let upper = initial.upper.min(p_star + CALIBRATION_TOLERANCE).clamp(0.0, 1.0);
    let lower = initial.lower.min(p_star - CALIBRATION_TOLERANCE).max(0.0);
    Interval {
        lower: lower.min(upper),
        upper,
    }
}

/// Mean absolute difference over all entries.
pub fn equivariance_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.ensure_shape(b, "equivariance loss")?;
    let n = a.data().len().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .sum();
    Ok(sum / n)
}

/// [`equivariance_loss`] with its gradient in `a` (the gradient in `b` is
/// the negation). The subgradient at zero difference is zero.
pub fn equivariance_loss_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let loss = equivariance_loss(a, b)?;
    let inv = T::from_f64(1.0 / a.data().len().max(1) as f64);
    let mut g = Tensor::zeros(a.channels(), a.dims());
    for ((gv, &x), &y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *gv = if x > y {
            inv
        } else if x < y {
            -inv
        } else {
            T::ZERO
        };
    }
    Ok((loss, g))
}

/// Channel holding the per-voxel maximum, ties resolved to the lowest index.
#[inline]
pub fn argmax_channel<T: Real>(q: &Tensor<T>, voxel: usize) -> usize {
    let n = q.voxels();
    let data = q.data();
    let mut best = 0;
    for c in 1..q.channels() {
        if data[c * n + voxel] > data[best * n + voxel] {
            best = c;
        }
    }
    best
}

fn validate_one_hot<T: Real>(t_star: &Tensor<T>) -> Result<()> {
    let n = t_star.voxels();
    let data = t_star.data();
    for i in 0..n {
        let mut ones = 0;
        for c in 0..t_star.channels() {
            let v = data[c * n + i];
            if v == T::ONE {
                ones += 1;
            } else if v != T::ZERO {
                return Err(Error::Domain(format!("pseudo label value {v} is not 0/1")));
            }
        }
        if ones != 1 {
            return Err(Error::Domain(format!("voxel {i} has {ones} active pseudo labels")));
        }
    }
    Ok(())
}

/// Bootstrapped cross-entropy against `β·t* + (1 − β)·onehot(argmax q)`,
/// averaged over voxels, with its gradient in `q`.
pub fn bootstrap_loss_grad<T: Real>(q: &Tensor<T>, t_star: &Tensor<T>, beta: f64) -> Result<(f64, Tensor<T>)> {
    q.ensure_shape(t_star, "bootstrap loss")?;
    validate_one_hot(t_star)?;
    let n = q.voxels();
    let c = q.channels();
    let inv_n = 1.0 / n.max(1) as f64;
    let qs = q.data();
    let ts = t_star.data();
    let mut grad = Tensor::zeros(c, q.dims());
    let gs = grad.data_mut();
    let mut total = 0.0;
    for i in 0..n {
        let z = argmax_channel(q, i);
        for k in 0..c {
            let coef = beta * ts[k * n + i].to_f64() + if k == z { 1.0 - beta } else { 0.0 };
            if coef == 0.0 {
                continue;
            }
            let qv = qs[k * n + i].to_f64();
            if qv >= LOG_FLOOR {
                total -= coef * qv.ln();
                gs[k * n + i] = T::from_f64(-coef / qv * inv_n);
            } else {
                total -= coef * LOG_FLOOR.ln();
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn bootstrap_loss<T: Real>(q: &Tensor<T>, t_star: &Tensor<T>, beta: f64) -> Result<f64> {
    bootstrap_loss_grad(q, t_star, beta).map(|(l, _)| l)
}

/// Weighted sum of the three objective components.
pub fn total_loss(regression: f64, equivariance: f64, refinement: f64, weights: &LossWeights) -> f64 {
    weights.w_regression * regression + weights.w_equivariance * equivariance + weights.w_refinement * refinement
}

/// Two-class-or-more softmax cross-entropy on raw logits with its gradient.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / s).collect();
    let loss = -(probs[label].max(LOG_FLOOR)).ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| p - if k == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}
