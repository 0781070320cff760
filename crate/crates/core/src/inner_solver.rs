//! Exact inner maximization over the per-sample KL box.
//!
//! For a mini-batch of `B` losses and per-sample radii `eps`, the adversary
//! picks weights `q` on the simplex subject to
//!
//! ```text
//! exp(-eps_i) / B  <=  q_i  <=  exp(eps_i) / B
//! ```
//!
//! and maximizes `sum_i q_i * loss_i`. This is a linear program over the
//! intersection of the simplex and a box. Its optimum has a threshold shape:
//! high-loss samples sit at their upper bound, low-loss samples at their lower
//! bound, and at most one pivot sample sits in between. [`water_fill`] builds
//! that vertex greedily in `O(B log B)`. [`lp_oracle`] enumerates every
//! candidate vertex and is only meant for verification on small batches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|sum q - 1|` for any weight vector produced here.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Slack allowed on box membership checks.
pub const BOX_TOL: f64 = 1e-12;

/// Largest batch the enumeration oracle accepts.
pub const ORACLE_MAX_BATCH: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("loss at index {index} is not finite ({value})")]
    NonFiniteLoss { index: usize, value: f64 },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("oracle batch size {0} exceeds the enumeration limit of {ORACLE_MAX_BATCH}")]
    OracleTooLarge(usize),
    #[error("box is infeasible: sum of lower bounds {lower_sum}, sum of upper bounds {upper_sum}")]
    Infeasible { lower_sum: f64, upper_sum: f64 },
    #[error("weights drifted off the simplex: sum = {0}")]
    SimplexDrift(f64),
}

/// Per-sample losses for one batch. Entries are finite; sign is unrestricted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SolverError> {
        if values.is_empty() {
            return Err(SolverError::EmptyBatch);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SolverError::NonFiniteLoss { index, value });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for LossVector {
    type Error = SolverError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LossVector> for Vec<f64> {
    fn from(v: LossVector) -> Self {
        v.0
    }
}

/// Per-sample radii `eps_i >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BudgetVector(Vec<f64>);

impl BudgetVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SolverError> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(SolverError::InvalidBudget(format!(
                "eps[{i}] = {v} must be finite and >= 0"
            )));
        }
        Ok(Self(values))
    }

    /// All-zero budgets: the box collapses to the uniform distribution.
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for BudgetVector {
    type Error = SolverError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BudgetVector> for Vec<f64> {
    fn from(v: BudgetVector) -> Self {
        v.0
    }
}

/// Lower and upper bounds on each weight around the base measure `1/B`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub base: f64,
}

impl WeightBox {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// True when `q` lies in the box (with [`BOX_TOL`] slack) and on the simplex.
    pub fn contains(&self, q: &[f64]) -> bool {
        q.len() == self.len()
            && (q.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
            && q.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&qi, (&a, &b))| qi >= a - BOX_TOL && qi <= b + BOX_TOL)
    }
}

/// Adversarial weights over one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Wraps `values` after checking they form a distribution.
    pub fn new(values: Vec<f64>) -> Result<Self, SolverError> {
        if values.is_empty() {
            return Err(SolverError::EmptyBatch);
        }
        let sum: f64 = values.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > SIMPLEX_TOL || values.iter().any(|&q| q < 0.0) {
            return Err(SolverError::SimplexDrift(sum));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Box bounds `a_i = exp(-eps_i)/B`, `b_i = exp(eps_i)/B`.
pub fn box_bounds(budgets: &BudgetVector, batch_size: usize) -> Result<WeightBox, SolverError> {
    if batch_size == 0 {
        return Err(SolverError::EmptyBatch);
    }
    if budgets.len() != batch_size {
        return Err(SolverError::InvalidBudget(format!(
            "{} budgets for a batch of {batch_size}",
            budgets.len()
        )));
    }
    let base = 1.0 / batch_size as f64;
    let lower = budgets.0.iter().map(|&e| (-e).exp() * base).collect();
    let upper = budgets.0.iter().map(|&e| e.exp() * base).collect();
    Ok(WeightBox { lower, upper, base })
}

/// Sample indices ordered by descending loss; ties keep ascending index order.
pub fn fill_order(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    // sort_by is stable
    order.sort_by(|&i, &j| losses[j].total_cmp(&losses[i]));
    order
}

/// Solves the inner maximization exactly by greedy water-filling.
///
/// Every weight starts at its lower bound. The leftover mass `1 - sum a` is
/// then poured into samples in descending-loss order, each one raised by at
/// most `b_i - a_i`, until nothing is left.
pub fn water_fill(
    losses: &LossVector,
    budgets: &BudgetVector,
) -> Result<WeightVector, SolverError> {
    if budgets.len() != losses.len() {
        return Err(SolverError::InvalidBudget(format!(
            "{} budgets for {} losses",
            budgets.len(),
            losses.len()
        )));
    }
    let bounds = box_bounds(budgets, losses.len())?;
    Ok(WeightVector(fill_box(losses.as_slice(), &bounds)?))
}

fn fill_box(losses: &[f64], bounds: &WeightBox) -> Result<Vec<f64>, SolverError> {
    let mut q = bounds.lower.clone();
    let mut residual = 1.0 - q.iter().sum::<f64>();
    let order = fill_order(losses);
    let mut pivot = order[0];

    for &i in &order {
        if residual <= 0.0 {
            break;
        }
        let room = bounds.upper[i] - bounds.lower[i];
        pivot = i;
        if room <= residual {
            // saturate on the exact bound so the coordinate is not left one ulp inside
            q[i] = bounds.upper[i];
            residual -= room;
        } else {
            q[i] += residual;
            residual = 0.0;
        }
    }

    let drift = 1.0 - q.iter().sum::<f64>();
    if drift != 0.0 {
        q[pivot] = (q[pivot] + drift).clamp(bounds.lower[pivot], bounds.upper[pivot]);
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(SolverError::SimplexDrift(sum));
    }
    Ok(q)
}

/// `sum_i q_i * loss_i`.
pub fn robust_objective(losses: &LossVector, weights: &WeightVector) -> Result<f64, SolverError> {
    if losses.len() != weights.len() {
        return Err(SolverError::LengthMismatch {
            what: "weights",
            got: weights.len(),
            expected: losses.len(),
        });
    }
    Ok(losses
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .map(|(l, q)| l * q)
        .sum())
}

/// Number of coordinates strictly inside their box (neither bound attained).
pub fn interior_count(weights: &WeightVector, bounds: &WeightBox) -> usize {
    weights
        .as_slice()
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .filter(|(&q, (&a, &b))| q > a && q < b)
        .count()
}

/// Exhaustive vertex enumeration for the box-constrained simplex LP.
///
/// Each non-pivot coordinate is pinned to its lower or upper bound and at
/// most one pivot coordinate absorbs the remaining mass. An optimal vertex of
/// simplex ∩ box always has this shape, so the search is exact. Ties in
/// objective are broken toward the candidate that is lexicographically larger
/// in [`fill_order`], which reproduces the greedy's tie-break.
pub fn lp_oracle(losses: &LossVector, bounds: &WeightBox) -> Result<WeightVector, SolverError> {
    let n = losses.len();
    if bounds.len() != n {
        return Err(SolverError::LengthMismatch {
            what: "box",
            got: bounds.len(),
            expected: n,
        });
    }
    if n > ORACLE_MAX_BATCH {
        return Err(SolverError::OracleTooLarge(n));
    }
    let lower_sum: f64 = bounds.lower.iter().sum();
    let upper_sum: f64 = bounds.upper.iter().sum();
    if lower_sum > 1.0 + SIMPLEX_TOL || upper_sum < 1.0 - SIMPLEX_TOL {
        return Err(SolverError::Infeasible {
            lower_sum,
            upper_sum,
        });
    }

    let l = losses.as_slice();
    let order = fill_order(l);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut candidate = vec![0.0; n];

    // pivot == n means "no pivot": all coordinates at a bound
    for pivot in 0..=n {
        let free: Vec<usize> = (0..n).filter(|&i| i != pivot).collect();
        for mask in 0u32..(1u32 << free.len()) {
            for (bit, &i) in free.iter().enumerate() {
                candidate[i] = if mask >> bit & 1 == 1 {
                    bounds.upper[i]
                } else {
                    bounds.lower[i]
                };
            }
            let pinned: f64 = free.iter().map(|&i| candidate[i]).sum();
            if pivot < n {
                let rest = 1.0 - pinned;
                if rest < bounds.lower[pivot] - BOX_TOL || rest > bounds.upper[pivot] + BOX_TOL {
                    continue;
                }
                candidate[pivot] = rest.clamp(bounds.lower[pivot], bounds.upper[pivot]);
            } else if (pinned - 1.0).abs() > SIMPLEX_TOL {
                continue;
            }
            let value: f64 = candidate.iter().zip(l).map(|(q, l)| q * l).sum();
            let better = match &best {
                None => true,
                Some((bv, bq)) => {
                    if value > bv + 1e-12 {
                        true
                    } else if value < bv - 1e-12 {
                        false
                    } else {
                        lex_greater(&candidate, bq, &order)
                    }
                }
            };
            if better {
                best = Some((value, candidate.clone()));
            }
        }
    }

    // a feasible box always admits at least one vertex
    let (_, q) = best.ok_or(SolverError::Infeasible {
        lower_sum,
        upper_sum,
    })?;
    Ok(WeightVector(q))
}

fn lex_greater(a: &[f64], b: &[f64], order: &[usize]) -> bool {
    for &i in order {
        if (a[i] - b[i]).abs() > 1e-15 {
            return a[i] > b[i];
        }
    }
    false
}
