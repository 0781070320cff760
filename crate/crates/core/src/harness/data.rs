//! Seeded synthetic datasets: Gaussian blobs, a spurious-feature task,
//! test-time corruptions and an outlier mixture.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_kit::FeatureMatrix;

pub const OUTLIER_TAG: &str = "outlier";
pub const INLIER_TAG: &str = "inlier";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid dataset parameter `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Deterministic RNG for a (seed, purpose) pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything the training loop may see: features, labels and stable ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSamples {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub classes: usize,
}

impl LabeledSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Samples plus optional evaluation-only group tags (one per row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: LabeledSamples,
    pub groups: Option<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rows carrying `tag`, as a new dataset with the same tags.
    pub fn filter_group(&self, tag: &str) -> Option<Dataset> {
        let groups = self.groups.as_ref()?;
        let keep: Vec<usize> = (0..self.len()).filter(|&i| groups[i] == tag).collect();
        if keep.is_empty() {
            return None;
        }
        Some(Dataset {
            samples: LabeledSamples {
                features: self.samples.features.select(&keep),
                labels: keep.iter().map(|&i| self.samples.labels[i]).collect(),
                ids: keep.iter().map(|&i| self.samples.ids[i]).collect(),
                classes: self.samples.classes,
            },
            groups: Some(keep.iter().map(|&i| groups[i].clone()).collect()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    /// Samples per class, one entry per class.
    pub counts: Vec<usize>,
    pub dim: usize,
    /// Pairwise distance between class means.
    pub separation: f64,
    /// Per-coordinate standard deviation inside each cluster.
    pub spread: f64,
    pub seed: u64,
}

/// Class means at `separation / sqrt(2)` along the first `K` axes, centered.
pub fn blob_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let r = separation / std::f64::consts::SQRT_2;
    let centroid = r / classes as f64;
    (0..classes)
        .map(|k| {
            (0..dim)
                .map(|j| {
                    let on_axis = if j == k { r } else { 0.0 };
                    if j < classes {
                        on_axis - centroid
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 {
        return Err(invalid("classes", "need at least 2 classes"));
    }
    if spec.counts.len() != spec.classes {
        return Err(invalid(
            "per_class",
            format!("{} counts for {} classes", spec.counts.len(), spec.classes),
        ));
    }
    if spec.counts.contains(&0) {
        return Err(invalid(
            "per_class",
            "every class needs at least one sample",
        ));
    }
    if spec.dim < spec.classes {
        return Err(invalid(
            "dim",
            format!("must be >= classes ({})", spec.classes),
        ));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(invalid("separation", "must be finite and >= 0"));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(invalid("spread", "must be finite and >= 0"));
    }
    let means = blob_means(spec.classes, spec.dim, spec.separation);
    let mut rng = seeded_rng(spec.seed, 1);
    let n: usize = spec.counts.iter().sum();
    let rounds = spec.counts.iter().copied().max().unwrap_or(0);
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    // round-robin over classes until each one has its count
    for round in 0..rounds {
        for (k, mean) in means.iter().enumerate() {
            if round >= spec.counts[k] {
                continue;
            }
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spec.spread * z);
            }
            labels.push(k);
        }
    }
    Ok(Dataset {
        samples: LabeledSamples {
            features: FeatureMatrix::new(n, spec.dim, data).expect("shape by construction"),
            labels,
            ids: (0..n as u64).collect(),
            classes: spec.classes,
        },
        groups: None,
    })
}

/// Binary task where a strong nuisance feature tracks the label with
/// probability `correlation` and a weaker core feature always does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub samples: usize,
    pub correlation: f64,
    pub core_strength: f64,
    pub spurious_strength: f64,
    /// Extra pure-noise coordinates appended after the two informative ones.
    pub noise_dims: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Group tag for the spurious task: label and sign of the nuisance feature.
pub fn spurious_group(label: usize, positive: bool) -> String {
    format!("y{label}_s{}", if positive { '+' } else { '-' })
}

pub fn gen_spurious(spec: &SpuriousSpec) -> Result<Dataset, DataError> {
    if !(0.5..=1.0).contains(&spec.correlation) {
        return Err(invalid(
            "correlation",
            format!("{} is outside [0.5, 1]", spec.correlation),
        ));
    }
    if spec.samples == 0 {
        return Err(invalid("samples", "must be >= 1"));
    }
    for (field, v) in [
        ("core_strength", spec.core_strength),
        ("spurious_strength", spec.spurious_strength),
        ("noise", spec.noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(invalid(field, "must be finite and >= 0"));
        }
    }
    let dim = 2 + spec.noise_dims;
    let mut rng = seeded_rng(spec.seed, 2);
    let mut data = Vec::with_capacity(spec.samples * dim);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut groups = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let label = usize::from(rng.random_bool(0.5));
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let agrees = rng.random::<f64>() < spec.correlation;
        let nuisance = if agrees { sign } else { -sign };
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        data.push(spec.core_strength * sign + spec.noise * z0);
        data.push(spec.spurious_strength * nuisance + spec.noise * z1);
        for _ in 0..spec.noise_dims {
            let z: f64 = rng.sample(StandardNormal);
            data.push(spec.noise * z);
        }
        labels.push(label);
        groups.push(spurious_group(label, nuisance > 0.0));
    }
    Ok(Dataset {
        samples: LabeledSamples {
            features: FeatureMatrix::new(spec.samples, dim, data).expect("shape by construction"),
            labels,
            ids: (0..spec.samples as u64).collect(),
            classes: 2,
        },
        groups: Some(groups),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    FeatureDropout,
    AffineShift,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureDropout,
        CorruptionKind::AffineShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::FeatureDropout => "feature_dropout",
            CorruptionKind::AffineShift => "affine_shift",
        }
    }

    fn stream(self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 10,
            CorruptionKind::FeatureDropout => 11,
            CorruptionKind::AffineShift => 12,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownCorruption(s.to_string()))
    }
}

pub const MAX_SEVERITY: u8 = 5;

/// Returns a corrupted copy of `dataset`; labels, ids and tags are kept.
///
/// The random draws depend on `(seed, kind)` only, so raising the severity
/// scales the same perturbation instead of resampling it:
///
/// * `gaussian_noise`: add `0.5 * s * scale * z`, `z ~ N(0, I)`
/// * `feature_dropout`: zero coordinate `j` when `u_j < 0.1 * s`
/// * `affine_shift`: shrink by `1 - 0.05 * s`, then shift `0.5 * s * scale`
///   along a fixed random unit direction
pub fn corrupt(
    dataset: &Dataset,
    kind: CorruptionKind,
    severity: u8,
    scale: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(invalid(
            "severity",
            format!("{severity} is outside 1..={MAX_SEVERITY}"),
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid("scale", "must be finite and > 0"));
    }
    let s = f64::from(severity);
    let mut out = dataset.clone();
    let features = &mut out.samples.features;
    let (rows, cols) = (features.rows(), features.cols());
    let mut rng = seeded_rng(seed, kind.stream());
    match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = 0.5 * s * scale;
            for i in 0..rows {
                for x in features.row_mut(i) {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += sigma * z;
                }
            }
        }
        CorruptionKind::FeatureDropout => {
            let p = 0.1 * s;
            for i in 0..rows {
                for x in features.row_mut(i) {
                    if rng.random::<f64>() < p {
                        *x = 0.0;
                    }
                }
            }
        }
        CorruptionKind::AffineShift => {
            let dir = random_unit(&mut rng, cols);
            let shrink = 1.0 - 0.05 * s;
            let shift = 0.5 * s * scale;
            for i in 0..rows {
                for (x, d) in features.row_mut(i).iter_mut().zip(&dir) {
                    *x = shrink * *x + shift * d;
                }
            }
        }
    }
    Ok(out)
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    /// Offset of each class's outlier cluster from its class mean, in units of
    /// the inlier spread. Must be at least 3.
    pub distance_factor: f64,
    /// Seed for the per-class offset directions; share it between splits so
    /// train and test outliers come from the same shifted clusters.
    pub direction_seed: u64,
    /// Seed for which rows are replaced and for the outlier draws.
    pub seed: u64,
}

pub const MIN_OUTLIER_FACTOR: f64 = 3.0;

/// Per-class empirical means and the pooled per-coordinate standard deviation.
pub fn class_geometry(samples: &LabeledSamples) -> (Vec<Vec<f64>>, f64) {
    let d = samples.dim();
    let mut sums = vec![vec![0.0; d]; samples.classes];
    let mut counts = vec![0usize; samples.classes];
    for (i, &y) in samples.labels.iter().enumerate() {
        counts[y] += 1;
        for (s, x) in sums[y].iter_mut().zip(samples.features.row(i)) {
            *s += x;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    let mut ss = 0.0;
    for (i, &y) in samples.labels.iter().enumerate() {
        for (m, x) in means[y].iter().zip(samples.features.row(i)) {
            ss += (x - m) * (x - m);
        }
    }
    let spread = (ss / (samples.len() * d).max(1) as f64).sqrt();
    (means, spread)
}

/// Replaces `round(fraction * n)` rows with draws from shifted clusters.
///
/// The outlier cluster of class `k` is centered at `mean_k + D * u_k` with
/// `D = distance_factor * spread` and `u_k` a seeded random unit vector; its
/// points scatter with the inlier spread. Labels and ids are kept; replaced
/// rows are tagged [`OUTLIER_TAG`], untagged rows become [`INLIER_TAG`].
pub fn mix_outliers(
    dataset: &Dataset,
    fraction: f64,
    spec: &OutlierSpec,
) -> Result<Dataset, DataError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid(
            "outlier_fraction",
            format!("{fraction} is outside [0, 1)"),
        ));
    }
    if !(spec.distance_factor >= MIN_OUTLIER_FACTOR && spec.distance_factor.is_finite()) {
        return Err(invalid(
            "outlier_distance_factor",
            format!("must be >= {MIN_OUTLIER_FACTOR}"),
        ));
    }
    if fraction == 0.0 {
        return Ok(dataset.clone());
    }
    let n = dataset.len();
    let count = (fraction * n as f64).round() as usize;
    let (means, spread) = class_geometry(&dataset.samples);
    let d = dataset.samples.dim();

    let mut dir_rng = seeded_rng(spec.direction_seed, 20);
    let centers: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let u = random_unit(&mut dir_rng, d);
            m.iter()
                .zip(&u)
                .map(|(a, b)| a + spec.distance_factor * spread * b)
                .collect()
        })
        .collect();

    let mut rng = seeded_rng(spec.seed, 21);
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let mut chosen = rows[..count].to_vec();
    chosen.sort_unstable();

    let mut out = dataset.clone();
    let mut groups = out
        .groups
        .take()
        .unwrap_or_else(|| vec![INLIER_TAG.to_string(); n]);
    for &i in &chosen {
        let y = out.samples.labels[i];
        for (x, c) in out.samples.features.row_mut(i).iter_mut().zip(&centers[y]) {
            let z: f64 = rng.sample(StandardNormal);
            *x = c + spread * z;
        }
        groups[i] = OUTLIER_TAG.to_string();
    }
    out.groups = Some(groups);
    Ok(out)
}
