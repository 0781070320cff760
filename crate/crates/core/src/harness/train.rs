//! The min-max training loop.
//!
//! Per batch: losses and per-sample gradients, EMA variance update, batch
//! normalization of the variances, budgets under the current cap, then the
//! method's weights and one weighted SGD step. The loop only ever sees
//! [`LabeledSamples`], so group tags cannot reach the weighting path.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig, Method, ScheduleUnit};
use super::data::{seeded_rng, LabeledSamples};
use super::HarnessError;
use crate::baselines::{kl_dro_weights, uniform_weights, KlBudget};
use crate::inner_solver::{box_bounds, robust_objective, water_fill, BudgetVector, WeightVector};
use crate::model_kit::{losses_and_gradients, smooth_labels, ModelParams, Sgd, SmoothedLabel};
use crate::schedule::RampSchedule;
use crate::variance_tracker::{assign_budgets, normalize_variances, SampleStatsStore};

/// Resolved training settings.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub guard: f64,
    pub eps_min: f64,
    pub schedule: RampSchedule,
    pub schedule_unit: ScheduleUnit,
    pub label_smoothing: f64,
    pub kl: KlBudget,
    pub seed: u64,
    /// Replaces every assigned budget with this value. Test hook only.
    #[doc(hidden)]
    pub budget_override: Option<f64>,
    /// Keep a per-batch trace in the outcome.
    pub trace_batches: bool,
}

impl TrainSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        Ok(Self {
            method: cfg.method,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            alpha: cfg.alpha,
            guard: cfg.guard,
            eps_min: cfg.eps_min,
            schedule: cfg.schedule()?,
            schedule_unit: cfg.schedule_unit,
            label_smoothing: cfg.label_smoothing,
            kl: cfg.kl_budget(),
            seed: cfg.seed,
            budget_override: None,
            trace_batches: false,
        })
    }
}

/// Training-side diagnostics for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Schedule time of the epoch's first batch.
    pub t: u64,
    pub cap: f64,
    pub mean_loss: f64,
    pub mean_robust_objective: f64,
    /// Budget statistics; only meaningful for `var_dro`.
    pub mean_eps: Option<f64>,
    pub max_eps: Option<f64>,
    /// Largest cap used by any batch in the epoch.
    pub max_cap: f64,
    pub upper_hit_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTrace {
    pub epoch: usize,
    pub batch: usize,
    pub t: u64,
    pub cap: f64,
    pub mean_loss: f64,
    pub robust_objective: f64,
    pub min_eps: f64,
    pub max_eps: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub epochs: Vec<EpochDiagnostics>,
    pub trace: Vec<BatchTrace>,
    pub store: SampleStatsStore,
}

fn labels_for(
    samples: &LabeledSamples,
    rows: &[usize],
    smoothing: f64,
) -> Result<Vec<SmoothedLabel>, HarnessError> {
    rows.iter()
        .map(|&i| {
            smooth_labels(samples.labels[i], samples.classes, smoothing).map_err(HarnessError::from)
        })
        .collect()
}

/// Runs the full loop. `on_epoch` is called after every epoch with the
/// current model, so callers can evaluate without the loop knowing about
/// evaluation data.
pub fn train(
    settings: &TrainSettings,
    model: ModelParams,
    samples: &LabeledSamples,
    mut on_epoch: impl FnMut(&EpochDiagnostics, &ModelParams) -> Result<(), HarnessError>,
) -> Result<TrainOutcome, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::config("dataset", "training split is empty"));
    }
    if settings.batch_size == 0 {
        return Err(HarnessError::config("batch_size", "must be >= 1"));
    }
    let mut model = model;
    let mut store = SampleStatsStore::new(settings.alpha)?;
    let mut sgd = Sgd::new(settings.lr, settings.momentum, settings.weight_decay);
    let mut shuffle_rng = seeded_rng(derive_seed(settings.seed, 7), 0);
    let mut rows: Vec<usize> = (0..samples.len()).collect();
    let batches_per_epoch = samples.len().div_ceil(settings.batch_size);
    let mut diagnostics = Vec::with_capacity(settings.epochs);
    let mut trace = Vec::new();

    for epoch in 0..settings.epochs {
        rows.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut robust_sum = 0.0;
        let mut eps_sum = 0.0;
        let mut eps_count = 0usize;
        let mut eps_max: f64 = 0.0;
        let mut max_cap: f64 = 0.0;
        let mut hits = 0usize;
        let epoch_t = match settings.schedule_unit {
            ScheduleUnit::Epoch => epoch as u64,
            ScheduleUnit::Iteration => (epoch * batches_per_epoch) as u64,
        };
        let epoch_cap = settings.schedule.cap_at(epoch_t)?;

        for (batch, chunk) in rows.chunks(settings.batch_size).enumerate() {
            let t = match settings.schedule_unit {
                ScheduleUnit::Epoch => epoch as u64,
                ScheduleUnit::Iteration => (epoch * batches_per_epoch + batch) as u64,
            };
            let cap = settings.schedule.cap_at(t)?;
            max_cap = max_cap.max(cap);
            let inputs = samples.features.select(chunk);
            let labels = labels_for(samples, chunk, settings.label_smoothing)?;
            let ids: Vec<u64> = chunk.iter().map(|&i| samples.ids[i]).collect();

            let (losses, grads) = losses_and_gradients(&model, &inputs, &labels).map_err(|_| {
                HarnessError::Divergence {
                    epoch: epoch + 1,
                    batch,
                }
            })?;

            let variances = store.observe_batch(&ids, &losses)?;
            if variances.iter().any(|v| !v.is_finite()) {
                return Err(HarnessError::Divergence {
                    epoch: epoch + 1,
                    batch,
                });
            }
            let normalized = normalize_variances(&variances, settings.guard)?;
            let budgets = match settings.budget_override {
                Some(e) => BudgetVector::new(vec![e; chunk.len()])?,
                None => assign_budgets(&normalized, settings.eps_min, cap)?,
            };

            let weights: WeightVector = match settings.method {
                Method::Erm => uniform_weights(chunk.len())?,
                Method::KlDro => kl_dro_weights(&losses, &settings.kl)?,
                Method::VarDro => water_fill(&losses, &budgets)?,
            };

            let mean_loss = losses.mean();
            let robust = robust_objective(&losses, &weights)?;
            loss_sum += mean_loss;
            robust_sum += robust;

            let (mut bmin, mut bmax) = (f64::INFINITY, 0.0f64);
            for &e in budgets.as_slice() {
                bmin = bmin.min(e);
                bmax = bmax.max(e);
            }
            if settings.method == Method::VarDro {
                eps_sum += budgets.as_slice().iter().sum::<f64>();
                eps_count += chunk.len();
                eps_max = eps_max.max(bmax);
                let bounds = box_bounds(&budgets, chunk.len())?;
                let hit = weights
                    .as_slice()
                    .iter()
                    .zip(bounds.lower.iter().zip(&bounds.upper))
                    .any(|(&q, (&a, &b))| b > a && q >= b);
                hits += usize::from(hit);
            }
            if settings.trace_batches {
                trace.push(BatchTrace {
                    epoch: epoch + 1,
                    batch,
                    t,
                    cap,
                    mean_loss,
                    robust_objective: robust,
                    min_eps: bmin,
                    max_eps: bmax,
                    weights: weights.as_slice().to_vec(),
                });
            }

            model = sgd
                .step(&model, &grads, &weights)
                .map_err(|_| HarnessError::Divergence {
                    epoch: epoch + 1,
                    batch,
                })?;
        }

        let nb = batches_per_epoch as f64;
        let var_dro = settings.method == Method::VarDro;
        let diag = EpochDiagnostics {
            epoch: epoch + 1,
            t: epoch_t,
            cap: epoch_cap,
            mean_loss: loss_sum / nb,
            mean_robust_objective: robust_sum / nb,
            mean_eps: var_dro.then(|| eps_sum / eps_count as f64),
            max_eps: var_dro.then_some(eps_max),
            max_cap,
            upper_hit_fraction: var_dro.then(|| hits as f64 / nb),
        };
        on_epoch(&diag, &model)?;
        diagnostics.push(diag);
    }

    Ok(TrainOutcome {
        model,
        epochs: diagnostics,
        trace,
        store,
    })
}

/// Seeded initial parameters for a config.
pub fn init_model(cfg: &ExperimentConfig) -> Result<ModelParams, HarnessError> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, 8), 0);
    Ok(ModelParams::init(cfg.architecture(), &mut rng)?)
}
