//! Result bundles: config echo, per-epoch CSV, summary JSON, checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::data::{corrupt, CorruptionKind, Dataset, MAX_SEVERITY, OUTLIER_TAG};
use super::metrics::{evaluate, Evaluation, MetricsRecord};
use super::train::{init_model, train, EpochDiagnostics, TrainSettings};
use super::HarnessError;
use crate::model_kit::ModelParams;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.json";
pub const SWEEP_FILE: &str = "sweep_summary.json";
pub const CORRUPTION_TABLE_FILE: &str = "corruption_table.csv";

/// Accuracy per severity for one corruption family, and its mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub severities: Vec<f64>,
    pub mean: f64,
}

/// Per-family severity means and their grand mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionTable {
    pub families: BTreeMap<String, CorruptionRow>,
    pub grand_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train: Evaluation,
    pub test: Evaluation,
    pub corruption: Option<CorruptionTable>,
}

impl SplitReport {
    pub fn outlier_accuracy(&self) -> Option<f64> {
        self.test.group_accuracies.get(OUTLIER_TAG).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub final_report: SplitReport,
    /// Snapshots at the configured `eval_at_epochs`, keyed by epoch.
    pub checkpoints: BTreeMap<usize, SplitReport>,
    /// Defaults worth flagging when reading the numbers.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: ModelParams,
    pub records: Vec<MetricsRecord>,
    pub diagnostics: Vec<EpochDiagnostics>,
    pub summary: RunSummary,
}

/// Accuracy on every (family, severity) corruption of `test`.
pub fn corruption_table(
    model: &ModelParams,
    test: &Dataset,
    kinds: &[CorruptionKind],
    scale: f64,
    seed: u64,
) -> Result<Option<CorruptionTable>, HarnessError> {
    if kinds.is_empty() {
        return Ok(None);
    }
    let mut families = BTreeMap::new();
    for &kind in kinds {
        let severities = (1..=MAX_SEVERITY)
            .map(|s| Ok(evaluate(model, &corrupt(test, kind, s, scale, seed)?)?.accuracy))
            .collect::<Result<Vec<f64>, HarnessError>>()?;
        let mean = severities.iter().sum::<f64>() / severities.len() as f64;
        families.insert(kind.name().to_string(), CorruptionRow { severities, mean });
    }
    let grand_mean = families.values().map(|r| r.mean).sum::<f64>() / families.len() as f64;
    Ok(Some(CorruptionTable {
        families,
        grand_mean,
    }))
}

fn report(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    train: &Dataset,
    test: &Dataset,
) -> Result<SplitReport, HarnessError> {
    Ok(SplitReport {
        train: evaluate(model, train)?,
        test: evaluate(model, test)?,
        corruption: corruption_table(
            model,
            test,
            &cfg.corruptions,
            cfg.corruption_scale,
            cfg.corruption_seed(),
        )?,
    })
}

fn notes(cfg: &ExperimentConfig) -> Vec<String> {
    let mut notes = Vec::new();
    if cfg.method == Method::KlDro && cfg.rho == crate::baselines::DEFAULT_RHO {
        notes.push(format!(
            "kl_dro radius rho = {} is the default, not a tuned value",
            cfg.rho
        ));
    }
    notes
}

/// Trains and evaluates one config without touching the filesystem.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    run_with_settings(cfg, TrainSettings::from_config(cfg)?)
}

/// Like [`run_in_memory`] but with explicit (possibly hooked) settings.
pub fn run_with_settings(
    cfg: &ExperimentConfig,
    settings: TrainSettings,
) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let splits = cfg.build_splits()?;
    let model = init_model(cfg)?;
    let mut records = Vec::new();
    let mut checkpoints = BTreeMap::new();

    let outcome = train(&settings, model, &splits.train.samples, |diag, model| {
        let train_eval = evaluate(model, &splits.train)?;
        let test_eval = evaluate(model, &splits.test)?;
        records.push(MetricsRecord::new("train", &train_eval, diag));
        records.push(MetricsRecord::new("test", &test_eval, diag));
        if cfg.eval_at_epochs.contains(&diag.epoch) {
            checkpoints.insert(diag.epoch, report(cfg, model, &splits.train, &splits.test)?);
        }
        Ok(())
    })?;

    let final_report = report(cfg, &outcome.model, &splits.train, &splits.test)?;
    Ok(RunResult {
        summary: RunSummary {
            method: cfg.method,
            seed: cfg.seed,
            epochs: cfg.epochs,
            final_report,
            checkpoints,
            notes: notes(cfg),
        },
        model: outcome.model,
        records,
        diagnostics: outcome.epochs,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable");
    s.push(b'\n');
    s
}

pub fn metrics_csv(records: &[MetricsRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

/// Runs one config and writes its bundle under `root/<method>_seed<seed>/`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    root: &Path,
) -> Result<(PathBuf, RunSummary), HarnessError> {
    let dir = root.join(cfg.run_name());
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    write(&dir.join(CONFIG_FILE), &to_json(cfg))?;
    let result = run_in_memory(cfg)?;
    write(&dir.join(METRICS_FILE), &metrics_csv(&result.records))?;
    write(&dir.join(SUMMARY_FILE), &to_json(&result.summary))?;
    write(&dir.join(MODEL_FILE), &to_json(&result.model))?;
    Ok((dir, result.summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub seed: u64,
    pub test_accuracy: f64,
    pub worst_group_accuracy: Option<f64>,
    pub outlier_accuracy: Option<f64>,
    pub corruption_grand_mean: Option<f64>,
}

/// Medians over seeds for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub runs: usize,
    pub test_accuracy: f64,
    pub worst_group_accuracy: Option<f64>,
    pub outlier_accuracy: Option<f64>,
    pub corruption: Option<CorruptionTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub by_method: Vec<MethodRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn median_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.and_then(|v| median(&v))
}

fn median_table(tables: &[&CorruptionTable]) -> Option<CorruptionTable> {
    let first = tables.first()?;
    let mut families = BTreeMap::new();
    for (name, row) in &first.families {
        let severities = (0..row.severities.len())
            .map(|s| {
                median(
                    &tables
                        .iter()
                        .map(|t| t.families[name].severities[s])
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        let mean = median(
            &tables
                .iter()
                .map(|t| t.families[name].mean)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        families.insert(name.clone(), CorruptionRow { severities, mean });
    }
    let grand_mean = median(&tables.iter().map(|t| t.grand_mean).collect::<Vec<_>>()).unwrap();
    Some(CorruptionTable {
        families,
        grand_mean,
    })
}

/// Aggregates finished runs into one row per run and one median row per method.
pub fn summarize(summaries: &[RunSummary]) -> SweepSummary {
    let rows: Vec<SweepRow> = summaries
        .iter()
        .map(|s| SweepRow {
            method: s.method,
            seed: s.seed,
            test_accuracy: s.final_report.test.accuracy,
            worst_group_accuracy: s.final_report.test.worst_group_accuracy,
            outlier_accuracy: s.final_report.outlier_accuracy(),
            corruption_grand_mean: s.final_report.corruption.as_ref().map(|c| c.grand_mean),
        })
        .collect();
    let mut methods: Vec<Method> = summaries.iter().map(|s| s.method).collect();
    methods.sort();
    methods.dedup();
    let by_method = methods
        .into_iter()
        .map(|m| {
            let runs: Vec<&RunSummary> = summaries.iter().filter(|s| s.method == m).collect();
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.method == m).collect();
            let tables: Option<Vec<&CorruptionTable>> = runs
                .iter()
                .map(|s| s.final_report.corruption.as_ref())
                .collect();
            MethodRow {
                method: m,
                runs: runs.len(),
                test_accuracy: median(&mine.iter().map(|r| r.test_accuracy).collect::<Vec<_>>())
                    .unwrap(),
                worst_group_accuracy: median_of(mine.iter().map(|r| r.worst_group_accuracy)),
                outlier_accuracy: median_of(mine.iter().map(|r| r.outlier_accuracy)),
                corruption: tables.and_then(|t| median_table(&t)),
            }
        })
        .collect();
    SweepSummary { rows, by_method }
}

/// Family-by-method table of severity-mean accuracies plus the grand mean.
pub fn corruption_table_csv(summary: &SweepSummary) -> Option<Vec<u8>> {
    let methods: Vec<(&MethodRow, &CorruptionTable)> = summary
        .by_method
        .iter()
        .filter_map(|m| m.corruption.as_ref().map(|c| (m, c)))
        .collect();
    let (_, first) = methods.first()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["corruption".to_string()];
    header.extend(methods.iter().map(|(m, _)| m.method.to_string()));
    w.write_record(&header).ok()?;
    for family in first.families.keys() {
        let mut row = vec![family.clone()];
        row.extend(
            methods
                .iter()
                .map(|(_, t)| t.families[family].mean.to_string()),
        );
        w.write_record(&row).ok()?;
    }
    let mut row = vec!["overall_mean".to_string()];
    row.extend(methods.iter().map(|(_, t)| t.grand_mean.to_string()));
    w.write_record(&row).ok()?;
    w.into_inner().ok()
}

/// Runs the cross-product of `methods` x `seeds` in parallel, each run in its
/// own directory, then writes the aggregate summary under `root`.
pub fn sweep(
    base: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    root: &Path,
) -> Result<SweepSummary, HarnessError> {
    let configs: Vec<ExperimentConfig> = methods
        .iter()
        .flat_map(|&method| {
            seeds.iter().map(move |&seed| ExperimentConfig {
                method,
                seed,
                ..base.clone()
            })
        })
        .collect();
    let summaries = configs
        .par_iter()
        .map(|cfg| run_experiment(cfg, root).map(|(_, s)| s))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&summaries);
    fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
    write(&root.join(SWEEP_FILE), &to_json(&summary))?;
    if let Some(table) = corruption_table_csv(&summary) {
        write(&root.join(CORRUPTION_TABLE_FILE), &table)?;
    }
    Ok(summary)
}

/// Loads a checkpoint written by [`run_experiment`].
pub fn load_model(path: &Path) -> Result<ModelParams, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let raw: ModelParams = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(ModelParams::new(raw.architecture, raw.params)?)
}
