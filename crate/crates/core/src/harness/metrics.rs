use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::train::EpochDiagnostics;
use super::HarnessError;
use crate::model_kit::{log_probabilities, predict, ModelParams};

/// Accuracy and loss of a model on one labeled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub accuracy: f64,
    /// Plain (unsmoothed) cross-entropy.
    pub mean_loss: f64,
    pub group_accuracies: BTreeMap<String, f64>,
    pub worst_group_accuracy: Option<f64>,
}

pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<Evaluation, HarnessError> {
    let samples = &dataset.samples;
    if samples.is_empty() {
        return Err(HarnessError::config(
            "dataset",
            "cannot evaluate on an empty split",
        ));
    }
    if samples.dim() != model.architecture.input_dim
        || samples.classes != model.architecture.classes
    {
        return Err(HarnessError::config(
            "checkpoint",
            format!(
                "model expects {} features / {} classes, dataset has {} / {}",
                model.architecture.input_dim,
                model.architecture.classes,
                samples.dim(),
                samples.classes
            ),
        ));
    }
    let mut correct = vec![false; samples.len()];
    let mut loss_sum = 0.0;
    for (i, ok) in correct.iter_mut().enumerate() {
        let x = samples.features.row(i);
        let y = samples.labels[i];
        *ok = predict(model, x) == y;
        loss_sum -= log_probabilities(model, x)[y];
    }
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64;
    let mut group_accuracies = BTreeMap::new();
    if let Some(groups) = &dataset.groups {
        let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (g, &ok) in groups.iter().zip(&correct) {
            let e = tally.entry(g.as_str()).or_default();
            e.0 += usize::from(ok);
            e.1 += 1;
        }
        group_accuracies = tally
            .into_iter()
            .map(|(g, (c, n))| (g.to_string(), c as f64 / n as f64))
            .collect();
    }
    let worst_group_accuracy = group_accuracies.values().copied().reduce(f64::min);
    Ok(Evaluation {
        samples: samples.len(),
        accuracy,
        mean_loss: loss_sum / samples.len() as f64,
        group_accuracies,
        worst_group_accuracy,
    })
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub worst_group_accuracy: Option<f64>,
    /// `group=acc` pairs joined by `;`, sorted by group name.
    pub group_accuracies: String,
    pub mean_loss: f64,
    pub mean_eps: Option<f64>,
    pub max_eps: Option<f64>,
    pub cap: f64,
    pub upper_hit_fraction: Option<f64>,
}

impl MetricsRecord {
    pub fn new(split: &str, eval: &Evaluation, diag: &EpochDiagnostics) -> Self {
        Self {
            epoch: diag.epoch,
            split: split.to_string(),
            accuracy: eval.accuracy,
            worst_group_accuracy: eval.worst_group_accuracy,
            group_accuracies: eval
                .group_accuracies
                .iter()
                .map(|(g, a)| format!("{g}={a}"))
                .collect::<Vec<_>>()
                .join(";"),
            mean_loss: eval.mean_loss,
            mean_eps: diag.mean_eps,
            max_eps: diag.max_eps,
            cap: diag.cap,
            upper_hit_fraction: diag.upper_hit_fraction,
        }
    }
}
