//! Per-sample EMA loss statistics and the variance-to-budget mapping.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inner_solver::{BudgetVector, LossVector};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_GUARD: f64 = 1e-8;
pub const DEFAULT_EPS_MIN: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("smoothing rate must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("loss {0} is not finite")]
    NonFiniteLoss(f64),
    #[error("sample id {0} appears more than once in the batch")]
    DuplicateId(u64),
    #[error("{ids} ids but {losses} losses")]
    LengthMismatch { ids: usize, losses: usize },
    #[error("variance {value} at index {index} is negative or not finite")]
    InvalidVariance { index: usize, value: f64 },
    #[error("empty variance batch")]
    Empty,
    #[error("normalization guard must be positive, got {0}")]
    InvalidGuard(f64),
    #[error("eps_min must be > 0, got {0}")]
    InvalidEpsMin(f64),
    #[error("eps_cap {cap} is below eps_min {min}")]
    CapBelowMin { min: f64, cap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: f64,
    pub variance: f64,
    pub observed: bool,
}

impl SampleStats {
    /// One EMA step. The variance term uses the mean from *before* this step.
    pub fn ema_update(self, loss: f64, alpha: f64) -> Result<Self, TrackerError> {
        if !loss.is_finite() {
            return Err(TrackerError::NonFiniteLoss(loss));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(TrackerError::InvalidAlpha(alpha));
        }
        if !self.observed {
            return Ok(Self {
                mean: loss,
                variance: 0.0,
                observed: true,
            });
        }
        let dev = loss - self.mean;
        Ok(Self {
            mean: (1.0 - alpha) * self.mean + alpha * loss,
            variance: (1.0 - alpha) * self.variance + alpha * dev * dev,
            observed: true,
        })
    }
}

/// EMA statistics keyed by stable sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStatsStore {
    alpha: f64,
    stats: BTreeMap<u64, SampleStats>,
}

impl SampleStatsStore {
    pub fn new(alpha: f64) -> Result<Self, TrackerError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(TrackerError::InvalidAlpha(alpha));
        }
        Ok(Self {
            alpha,
            stats: BTreeMap::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn get(&self, id: u64) -> SampleStats {
        self.stats.get(&id).copied().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Updates every id in the batch and returns the post-update variances in
    /// batch order. Nothing is written if any id repeats or any loss is bad.
    pub fn observe_batch(
        &mut self,
        ids: &[u64],
        losses: &LossVector,
    ) -> Result<Vec<f64>, TrackerError> {
        if ids.len() != losses.len() {
            return Err(TrackerError::LengthMismatch {
                ids: ids.len(),
                losses: losses.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(&dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(TrackerError::DuplicateId(dup));
        }
        let updated = ids
            .iter()
            .zip(losses.as_slice())
            .map(|(&id, &l)| self.get(id).ema_update(l, self.alpha))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ids
            .iter()
            .zip(updated)
            .map(|(&id, s)| {
                self.stats.insert(id, s);
                s.variance
            })
            .collect())
    }

    pub fn to_snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            alpha: self.alpha,
            stats: self
                .stats
                .iter()
                .filter(|(_, s)| s.observed)
                .map(|(&id, s)| StatEntry {
                    id,
                    mu: s.mean,
                    v: s.variance,
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snapshot: &StoreSnapshot) -> Result<Self, TrackerError> {
        let mut store = Self::new(snapshot.alpha)?;
        for (index, e) in snapshot.stats.iter().enumerate() {
            if !e.mu.is_finite() {
                return Err(TrackerError::NonFiniteLoss(e.mu));
            }
            if !(e.v.is_finite() && e.v >= 0.0) {
                return Err(TrackerError::InvalidVariance { index, value: e.v });
            }
            let fresh = SampleStats {
                mean: e.mu,
                variance: e.v,
                observed: true,
            };
            if store.stats.insert(e.id, fresh).is_some() {
                return Err(TrackerError::DuplicateId(e.id));
            }
        }
        Ok(store)
    }
}

/// JSON checkpoint form: `{"alpha": .., "stats": [{"id", "mu", "v"}, ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub alpha: f64,
    pub stats: Vec<StatEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub id: u64,
    pub mu: f64,
    pub v: f64,
}

/// Batch variances min-max scaled into `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedVariances {
    values: Vec<f64>,
    pub guard: f64,
}

impl NormalizedVariances {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

pub fn normalize_variances(
    variances: &[f64],
    guard: f64,
) -> Result<NormalizedVariances, TrackerError> {
    if variances.is_empty() {
        return Err(TrackerError::Empty);
    }
    if !(guard > 0.0 && guard.is_finite()) {
        return Err(TrackerError::InvalidGuard(guard));
    }
    if let Some((index, &value)) = variances
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(TrackerError::InvalidVariance { index, value });
    }
    let lo = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = hi - lo + guard;
    Ok(NormalizedVariances {
        values: variances.iter().map(|v| (v - lo) / denom).collect(),
        guard,
    })
}

/// `eps_i = eps_min + (eps_cap - eps_min) * vbar_i`.
pub fn assign_budgets(
    normalized: &NormalizedVariances,
    eps_min: f64,
    eps_cap: f64,
) -> Result<BudgetVector, TrackerError> {
    if !(eps_min > 0.0 && eps_min.is_finite()) {
        return Err(TrackerError::InvalidEpsMin(eps_min));
    }
    if !(eps_cap >= eps_min && eps_cap.is_finite()) {
        return Err(TrackerError::CapBelowMin {
            min: eps_min,
            cap: eps_cap,
        });
    }
    let span = eps_cap - eps_min;
    let eps = normalized
        .values
        .iter()
        .map(|v| (eps_min + span * v).clamp(eps_min, eps_cap))
        .collect();
    Ok(BudgetVector::new(eps).expect("budgets are positive and finite"))
}
