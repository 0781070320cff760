//! Comparison weighters: uniform (ERM) and global-budget KL-DRO.
//!
//! The KL-DRO adversary maximizes `sum q_i l_i` over the ball
//! `KL(q || uniform) <= rho`. Its solution is an exponential tilt
//! `q_i ∝ exp(l_i / lambda)`, and `KL(q(lambda) || u)` decreases monotonically
//! in `lambda`, so the binding temperature is found by bisection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inner_solver::{LossVector, SolverError, WeightVector};

pub const DEFAULT_RHO: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("batch size must be >= 1")]
    EmptyBatch,
    #[error("KL radius must be finite and >= 0, got {0}")]
    InvalidRho(f64),
    #[error("bisection tolerance must be > 0, got {0}")]
    InvalidTolerance(f64),
    #[error(
        "KL bisection did not converge after {iterations} iterations (KL = {kl}, target {rho})"
    )]
    NoConvergence {
        iterations: usize,
        kl: f64,
        rho: f64,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlBudget {
    pub rho: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl KlBudget {
    pub fn new(rho: f64) -> Result<Self, BaselineError> {
        let b = Self {
            rho,
            ..Self::default()
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(BaselineError::InvalidRho(self.rho));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(BaselineError::InvalidTolerance(self.tolerance));
        }
        Ok(())
    }
}

impl Default for KlBudget {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }
}

pub fn uniform_weights(batch_size: usize) -> Result<WeightVector, BaselineError> {
    if batch_size == 0 {
        return Err(BaselineError::EmptyBatch);
    }
    Ok(WeightVector::new(vec![
        1.0 / batch_size as f64;
        batch_size
    ])?)
}

/// `KL(q || uniform) = sum q_i ln(B q_i)`, with `0 ln 0 = 0`.
pub fn kl_to_uniform(q: &[f64]) -> f64 {
    let n = q.len() as f64;
    q.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (n * p).ln())
        .sum()
}

/// The tilt `q_i ∝ exp(l_i / lambda)` and its KL to uniform.
fn tilt(losses: &[f64], max_loss: f64, lambda: f64) -> (Vec<f64>, f64) {
    let s: Vec<f64> = losses.iter().map(|l| (l - max_loss) / lambda).collect();
    let log_z = s.iter().map(|v| v.exp()).sum::<f64>().ln();
    let q: Vec<f64> = s.iter().map(|v| (v - log_z).exp()).collect();
    // sum q_i (s_i - log Z) + ln B, clamped against rounding below zero
    let kl =
        s.iter().zip(&q).map(|(v, p)| p * (v - log_z)).sum::<f64>() + (losses.len() as f64).ln();
    (q, kl.max(0.0))
}

fn renormalized(mut q: Vec<f64>) -> Vec<f64> {
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|p| *p /= s);
    q
}

pub fn kl_dro_weights(
    losses: &LossVector,
    budget: &KlBudget,
) -> Result<WeightVector, BaselineError> {
    budget.validate()?;
    let l = losses.as_slice();
    let n = l.len();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = l.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    if budget.rho == 0.0 || spread == 0.0 {
        return uniform_weights(n);
    }

    // point mass split over the maximal losses: the lambda -> 0 limit
    let top = l.iter().filter(|&&v| v == max).count();
    if budget.rho >= (n as f64 / top as f64).ln() {
        let q = l
            .iter()
            .map(|&v| if v == max { 1.0 / top as f64 } else { 0.0 })
            .collect();
        return Ok(WeightVector::new(renormalized(q))?);
    }

    let (mut lo, mut hi) = (1e-6 * spread, 1e6 * spread);
    let (q_lo, kl_lo) = tilt(l, max, lo);
    if kl_lo <= budget.rho {
        // most concentrated tilt is still inside the ball
        return Ok(WeightVector::new(renormalized(q_lo))?);
    }
    let (q_hi, kl_hi) = tilt(l, max, hi);
    if kl_hi >= budget.rho {
        return Ok(WeightVector::new(renormalized(q_hi))?);
    }

    let mut last_kl = kl_hi;
    for _ in 0..budget.max_iterations {
        // geometric midpoint: the bracket spans twelve decades
        let mid = (lo * hi).sqrt();
        let (q, kl) = tilt(l, max, mid);
        last_kl = kl;
        if (kl - budget.rho).abs() <= budget.tolerance {
            return Ok(WeightVector::new(renormalized(q))?);
        }
        if kl > budget.rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Err(BaselineError::NoConvergence {
        iterations: budget.max_iterations,
        kl: last_kl,
        rho: budget.rho,
    })
}
