//! Experiment configuration: a single JSON document, validated up front.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{
    gen_blobs, gen_spurious, mix_outliers, BlobSpec, CorruptionKind, Dataset, OutlierSpec,
    SpuriousSpec, MIN_OUTLIER_FACTOR,
};
use super::HarnessError;
use crate::baselines::KlBudget;
use crate::model_kit::{Activation, Architecture};
use crate::schedule::RampSchedule;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "VARDRO_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    KlDro,
    VarDro,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Erm, Method::KlDro, Method::VarDro];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::KlDro => "kl_dro",
            Method::VarDro => "var_dro",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    #[default]
    Epoch,
    Iteration,
}

/// Either one count shared by every class or an explicit per-class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassCounts {
    Same(usize),
    PerClass(Vec<usize>),
}

impl ClassCounts {
    pub fn resolve(&self, classes: usize) -> Vec<usize> {
        match self {
            ClassCounts::Same(n) => vec![*n; classes],
            ClassCounts::PerClass(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        #[serde(default = "d_classes")]
        classes: usize,
        #[serde(default = "d_per_class")]
        per_class: ClassCounts,
        #[serde(default = "d_test_per_class")]
        test_per_class: ClassCounts,
        #[serde(default = "d_dim")]
        dim: usize,
        #[serde(default = "d_separation")]
        separation: f64,
        #[serde(default = "d_spread")]
        spread: f64,
        #[serde(default)]
        outlier_fraction: f64,
        #[serde(default = "d_outlier_factor")]
        outlier_distance_factor: f64,
    },
    Spurious {
        #[serde(default = "d_train_samples")]
        samples: usize,
        #[serde(default = "d_test_samples")]
        test_samples: usize,
        #[serde(default = "d_correlation")]
        correlation: f64,
        #[serde(default = "d_core")]
        core_strength: f64,
        #[serde(default = "d_spurious")]
        spurious_strength: f64,
        #[serde(default = "d_noise_dims")]
        noise_dims: usize,
        #[serde(default = "d_noise")]
        noise: f64,
    },
}

fn d_classes() -> usize {
    3
}
fn d_per_class() -> ClassCounts {
    ClassCounts::Same(100)
}
fn d_test_per_class() -> ClassCounts {
    ClassCounts::Same(200)
}
fn d_dim() -> usize {
    4
}
fn d_separation() -> f64 {
    4.0
}
fn d_spread() -> f64 {
    1.0
}
fn d_outlier_factor() -> f64 {
    4.0
}
fn d_train_samples() -> usize {
    600
}
fn d_test_samples() -> usize {
    2000
}
fn d_correlation() -> f64 {
    0.95
}
fn d_core() -> f64 {
    1.0
}
fn d_spurious() -> f64 {
    3.0
}
fn d_noise_dims() -> usize {
    2
}
fn d_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: Activation::Tanh,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: DatasetConfig,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_eps_min")]
    pub eps_min: f64,
    #[serde(default = "d_eps_start")]
    pub eps_start: f64,
    #[serde(default = "d_eps_end")]
    pub eps_end: f64,
    /// Warmup length in schedule units; defaults to a tenth of `total_steps`.
    #[serde(default)]
    pub warmup: Option<u64>,
    /// Schedule horizon; defaults to the run length in schedule units.
    #[serde(default)]
    pub total_steps: Option<u64>,
    #[serde(default)]
    pub schedule_unit: ScheduleUnit,
    #[serde(default = "d_guard")]
    pub guard: f64,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_corruptions")]
    pub corruptions: Vec<CorruptionKind>,
    #[serde(default = "d_scale")]
    pub corruption_scale: f64,
    /// Extra epochs (1-based) at which the full evaluation is snapshotted.
    #[serde(default)]
    pub eval_at_epochs: Vec<usize>,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
}

fn d_lr() -> f64 {
    0.1
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    30
}
fn d_alpha() -> f64 {
    crate::variance_tracker::DEFAULT_ALPHA
}
fn d_eps_min() -> f64 {
    crate::variance_tracker::DEFAULT_EPS_MIN
}
fn d_eps_start() -> f64 {
    crate::schedule::DEFAULT_EPS_START
}
fn d_eps_end() -> f64 {
    crate::schedule::DEFAULT_EPS_END
}
fn d_guard() -> f64 {
    crate::variance_tracker::DEFAULT_GUARD
}
fn d_smoothing() -> f64 {
    crate::model_kit::DEFAULT_LABEL_SMOOTHING
}
fn d_rho() -> f64 {
    crate::baselines::DEFAULT_RHO
}
fn d_corruptions() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}
fn d_scale() -> f64 {
    1.0
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Train and test splits built from a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// splitmix64 finalizer; derives independent seeds from the run seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| HarnessError::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Minimal config with every optional field at its default.
    pub fn with_defaults(method: Method, dataset: DatasetConfig, seed: u64) -> Self {
        let json = serde_json::json!({ "method": method, "dataset": dataset, "seed": seed });
        serde_json::from_value(json).expect("defaults deserialize")
    }

    pub fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs { dim, .. } => *dim,
            DatasetConfig::Spurious { noise_dims, .. } => 2 + noise_dims,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs { classes, .. } => *classes,
            DatasetConfig::Spurious { .. } => 2,
        }
    }

    pub fn train_len(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs {
                classes, per_class, ..
            } => per_class.resolve(*classes).iter().sum(),
            DatasetConfig::Spurious { samples, .. } => *samples,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.model.hidden,
            activation: self.model.activation,
            classes: self.classes(),
            bias: self.model.bias,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_len().div_ceil(self.batch_size.max(1))
    }

    /// Schedule horizon `T` in the configured unit.
    pub fn horizon(&self) -> u64 {
        self.total_steps.unwrap_or(match self.schedule_unit {
            ScheduleUnit::Epoch => self.epochs as u64,
            ScheduleUnit::Iteration => (self.epochs * self.batches_per_epoch()) as u64,
        })
    }

    pub fn schedule(&self) -> Result<RampSchedule, HarnessError> {
        let total = self.horizon();
        let warmup = self
            .warmup
            .unwrap_or_else(|| RampSchedule::default_warmup(total));
        RampSchedule::new(self.eps_start, self.eps_end, warmup, total).map_err(|e| {
            HarnessError::config("eps_start/eps_end/warmup/total_steps", e.to_string())
        })
    }

    pub fn kl_budget(&self) -> KlBudget {
        KlBudget {
            rho: self.rho,
            ..KlBudget::default()
        }
    }

    /// Output root after applying the environment override.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn run_name(&self) -> String {
        format!("{}_seed{}", self.method, self.seed)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(HarnessError::config(
                    field,
                    format!("must be finite and > 0, got {v}"),
                ))
            }
        };
        positive("lr", self.lr)?;
        positive("guard", self.guard)?;
        positive("eps_min", self.eps_min)?;
        positive("corruption_scale", self.corruption_scale)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HarnessError::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(HarnessError::config(
                "weight_decay",
                "must be finite and >= 0",
            ));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::config("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(HarnessError::config("epochs", "must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(HarnessError::config("alpha", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(HarnessError::config(
                "label_smoothing",
                "must lie in [0, 1)",
            ));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(HarnessError::config("rho", "must be finite and >= 0"));
        }
        let schedule = self.schedule()?;
        if self.eps_min > schedule.eps_start() {
            return Err(HarnessError::config(
                "eps_min",
                format!(
                    "{} exceeds eps_start {}",
                    self.eps_min,
                    schedule.eps_start()
                ),
            ));
        }
        let last_t = match self.schedule_unit {
            ScheduleUnit::Epoch => self.epochs as u64 - 1,
            ScheduleUnit::Iteration => (self.epochs * self.batches_per_epoch()) as u64 - 1,
        };
        if last_t > schedule.total_steps() {
            return Err(HarnessError::config(
                "total_steps",
                format!(
                    "{} is shorter than the run ({} steps)",
                    schedule.total_steps(),
                    last_t + 1
                ),
            ));
        }
        if let Some(&e) = self
            .eval_at_epochs
            .iter()
            .find(|&&e| e == 0 || e > self.epochs)
        {
            return Err(HarnessError::config(
                "eval_at_epochs",
                format!("epoch {e} is outside 1..={}", self.epochs),
            ));
        }
        if let Some(h) = self.model.hidden {
            if h == 0 {
                return Err(HarnessError::config("model.hidden", "must be >= 1"));
            }
        }
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                test_per_class,
                dim,
                separation,
                spread,
                outlier_fraction,
                outlier_distance_factor,
            } => {
                if *classes < 2 {
                    return Err(HarnessError::config("dataset.classes", "must be >= 2"));
                }
                for (field, counts) in [
                    ("dataset.per_class", per_class),
                    ("dataset.test_per_class", test_per_class),
                ] {
                    let counts = counts.resolve(*classes);
                    if counts.len() != *classes {
                        return Err(HarnessError::config(
                            field,
                            format!("{} counts for {classes} classes", counts.len()),
                        ));
                    }
                    if counts.contains(&0) {
                        return Err(HarnessError::config(field, "counts must be >= 1"));
                    }
                }
                if dim < classes {
                    return Err(HarnessError::config("dataset.dim", "must be >= classes"));
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return Err(HarnessError::config(
                        "dataset.separation",
                        "must be finite and >= 0",
                    ));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(HarnessError::config(
                        "dataset.spread",
                        "must be finite and >= 0",
                    ));
                }
                if !(0.0..1.0).contains(outlier_fraction) {
                    return Err(HarnessError::config(
                        "dataset.outlier_fraction",
                        "must lie in [0, 1)",
                    ));
                }
                if !(*outlier_distance_factor >= MIN_OUTLIER_FACTOR
                    && outlier_distance_factor.is_finite())
                {
                    return Err(HarnessError::config(
                        "dataset.outlier_distance_factor",
                        format!("must be >= {MIN_OUTLIER_FACTOR}"),
                    ));
                }
            }
            DatasetConfig::Spurious {
                samples,
                test_samples,
                correlation,
                core_strength,
                spurious_strength,
                noise,
                ..
            } => {
                if *samples == 0 || *test_samples == 0 {
                    return Err(HarnessError::config(
                        "dataset.samples",
                        "counts must be >= 1",
                    ));
                }
                if !(0.5..=1.0).contains(correlation) {
                    return Err(HarnessError::config(
                        "dataset.correlation",
                        "must lie in [0.5, 1]",
                    ));
                }
                for (f, v) in [
                    ("dataset.core_strength", core_strength),
                    ("dataset.spurious_strength", spurious_strength),
                    ("dataset.noise", noise),
                ] {
                    if !(*v >= 0.0 && v.is_finite()) {
                        return Err(HarnessError::config(f, "must be finite and >= 0"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds the seeded train/test pair.
    pub fn build_splits(&self) -> Result<Splits, HarnessError> {
        let train_seed = derive_seed(self.seed, 1);
        let test_seed = derive_seed(self.seed, 2);
        let splits = match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                test_per_class,
                dim,
                separation,
                spread,
                outlier_fraction,
                outlier_distance_factor,
            } => {
                let spec = |counts: &ClassCounts, seed| BlobSpec {
                    classes: *classes,
                    counts: counts.resolve(*classes),
                    dim: *dim,
                    separation: *separation,
                    spread: *spread,
                    seed,
                };
                let mut train = gen_blobs(&spec(per_class, train_seed))?;
                let mut test = gen_blobs(&spec(test_per_class, test_seed))?;
                if *outlier_fraction > 0.0 {
                    let direction_seed = derive_seed(self.seed, 3);
                    let out = |seed| OutlierSpec {
                        distance_factor: *outlier_distance_factor,
                        direction_seed,
                        seed,
                    };
                    train =
                        mix_outliers(&train, *outlier_fraction, &out(derive_seed(self.seed, 4)))?;
                    test = mix_outliers(&test, *outlier_fraction, &out(derive_seed(self.seed, 5)))?;
                }
                Splits { train, test }
            }
            DatasetConfig::Spurious {
                samples,
                test_samples,
                correlation,
                core_strength,
                spurious_strength,
                noise_dims,
                noise,
            } => {
                let spec = |samples, correlation, seed| SpuriousSpec {
                    samples,
                    correlation,
                    core_strength: *core_strength,
                    spurious_strength: *spurious_strength,
                    noise_dims: *noise_dims,
                    noise: *noise,
                    seed,
                };
                Splits {
                    train: gen_spurious(&spec(*samples, *correlation, train_seed))?,
                    // the nuisance feature is uninformative at test time
                    test: gen_spurious(&spec(*test_samples, 0.5, test_seed))?,
                }
            }
        };
        Ok(splits)
    }

    pub fn corruption_seed(&self) -> u64 {
        derive_seed(self.seed, 6)
    }
}
