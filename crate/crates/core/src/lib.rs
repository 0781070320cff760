//! Variance-driven per-sample distributionally robust training.
//!
//! Each mini-batch is reweighted by an adversary constrained to a per-sample
//! box `exp(-eps_i)/B <= q_i <= exp(eps_i)/B`. The radii come from an online
//! EMA of each sample's loss variance, capped by a warmup-then-ramp schedule.
//! The reweighting itself is an exact water-filling solve.
//!
//! * [`inner_solver`]: box bounds, water-filling, enumeration oracle
//! * [`variance_tracker`]: EMA statistics and the variance-to-budget map
//! * [`schedule`]: the global cap over time
//! * [`model_kit`]: linear / MLP classifiers with per-sample gradients
//! * [`baselines`]: ERM and global KL-DRO weights
//! * [`harness`]: synthetic data, the training loop, experiments

pub mod baselines;
pub mod harness;
pub mod inner_solver;
pub mod model_kit;
pub mod schedule;
pub mod variance_tracker;

pub use baselines::{kl_dro_weights, uniform_weights, KlBudget};
pub use inner_solver::{
    box_bounds, lp_oracle, robust_objective, water_fill, BudgetVector, LossVector, WeightBox,
    WeightVector,
};
pub use schedule::RampSchedule;
pub use variance_tracker::{assign_budgets, normalize_variances, SampleStats, SampleStatsStore};
