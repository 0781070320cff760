use std::collections::BTreeMap;

use vardro::harness::config::{DatasetConfig, ExperimentConfig, Method};
use vardro::harness::data::{
    corrupt, gen_blobs, gen_spurious, mix_outliers, BlobSpec, CorruptionKind, Dataset, OutlierSpec,
    SpuriousSpec, OUTLIER_TAG,
};
use vardro::harness::experiment::{
    median, metrics_csv, run_experiment, run_with_settings, sweep, RunSummary,
};
use vardro::harness::train::init_model;
use vardro::harness::{evaluate, run_in_memory, train, HarnessError, TrainSettings};
use vardro::model_kit::{Architecture, FeatureMatrix, ModelParams};

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn blob_spec(counts: Vec<usize>, separation: f64, spread: f64, seed: u64) -> BlobSpec {
    BlobSpec {
        classes: counts.len(),
        counts,
        dim: 4,
        separation,
        spread,
        seed,
    }
}

#[test]
fn separated_blobs_are_learned_quickly() {
    let cfg = config(
        r#"{"method": "erm", "seed": 4, "epochs": 50, "corruptions": [],
            "dataset": {"generator": "blobs", "classes": 2, "per_class": 100, "separation": 6.0}}"#,
    );
    let run = run_in_memory(&cfg).unwrap();
    let best = run
        .records
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.accuracy)
        .fold(0.0, f64::max);
    assert!(best >= 0.99, "best train accuracy {best}");
}

#[test]
fn blobs_are_reproducible_and_degenerate_spread_is_exact() {
    let a = gen_blobs(&blob_spec(vec![30, 20], 6.0, 1.0, 8)).unwrap();
    assert_eq!(a, gen_blobs(&blob_spec(vec![30, 20], 6.0, 1.0, 8)).unwrap());
    assert_ne!(a, gen_blobs(&blob_spec(vec![30, 20], 6.0, 1.0, 9)).unwrap());

    let flat = gen_blobs(&blob_spec(vec![10, 10, 10], 5.0, 0.0, 1)).unwrap();
    let mut means: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..flat.len() {
        let x = flat.samples.features.row(i).to_vec();
        let m = means
            .entry(flat.samples.labels[i])
            .or_insert_with(|| x.clone());
        assert_eq!(*m, x);
    }
    assert!(gen_blobs(&blob_spec(vec![10, 0], 5.0, 1.0, 1)).is_err());
}

fn spurious(correlation: f64, seed: u64) -> Dataset {
    gen_spurious(&SpuriousSpec {
        samples: 2000,
        correlation,
        core_strength: 1.0,
        spurious_strength: 3.0,
        noise_dims: 2,
        noise: 1.0,
        seed,
    })
    .unwrap()
}

#[test]
fn spurious_groups_partition_the_data() {
    let d = spurious(0.95, 1);
    let groups = d.groups.as_ref().unwrap();
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *sizes.entry(g.as_str()).or_default() += 1;
    }
    assert_eq!(sizes.len(), 4);
    assert_eq!(sizes.values().sum::<usize>(), d.len());
    assert!(gen_spurious(&SpuriousSpec {
        correlation: 0.4,
        ..spec_of(&d)
    })
    .is_err());
}

fn spec_of(_: &Dataset) -> SpuriousSpec {
    SpuriousSpec {
        samples: 100,
        correlation: 0.9,
        core_strength: 1.0,
        spurious_strength: 3.0,
        noise_dims: 0,
        noise: 1.0,
        seed: 0,
    }
}

#[test]
fn erm_leans_on_the_spurious_feature() {
    let gaps: Vec<f64> = (1..=5)
        .map(|seed| {
            let cfg = config(&format!(
                r#"{{"method": "erm", "seed": {seed}, "corruptions": [], "dataset": {{"generator": "spurious"}}}}"#
            ));
            let test = run_in_memory(&cfg).unwrap().summary.final_report.test;
            test.accuracy - test.worst_group_accuracy.unwrap()
        })
        .collect();
    let gap = median(&gaps).unwrap();
    assert!(
        gap >= 0.10,
        "median overall - worst-group gap {gap}: {gaps:?}"
    );
}

#[test]
fn balanced_spurious_feature_gives_similar_groups() {
    let cfg = config(
        r#"{"method": "erm", "seed": 2, "corruptions": [],
            "dataset": {"generator": "spurious", "correlation": 0.5, "samples": 2000, "test_samples": 4000}}"#,
    );
    let test = run_in_memory(&cfg).unwrap().summary.final_report.test;
    let accs: Vec<f64> = test.group_accuracies.values().copied().collect();
    let spread =
        accs.iter().copied().fold(0.0, f64::max) - accs.iter().copied().fold(1.0, f64::min);
    assert!(spread < 0.1, "{:?}", test.group_accuracies);
}

#[test]
fn corruption_contract() {
    let clean = gen_blobs(&blob_spec(vec![20, 20], 4.0, 1.0, 2)).unwrap();
    let copy = clean.clone();
    for kind in CorruptionKind::ALL {
        assert!(corrupt(&clean, kind, 0, 1.0, 1).is_err());
        assert!(corrupt(&clean, kind, 6, 1.0, 1).is_err());
        let c = corrupt(&clean, kind, 3, 1.0, 1).unwrap();
        assert_eq!(c.samples.labels, clean.samples.labels);
        assert_eq!(c.samples.ids, clean.samples.ids);
        assert_ne!(c.samples.features, clean.samples.features);
        assert_eq!(c, corrupt(&clean, kind, 3, 1.0, 1).unwrap());
    }
    assert_eq!(clean, copy);
    assert!("motion_blur".parse::<CorruptionKind>().is_err());
}

#[test]
fn noise_severity_degrades_erm() {
    let mut s1 = Vec::new();
    let mut s5 = Vec::new();
    for seed in 1..=5 {
        let cfg = config(&format!(
            r#"{{"method": "erm", "seed": {seed}, "corruptions": ["gaussian_noise"], "dataset": {{"generator": "blobs"}}}}"#
        ));
        let table = run_in_memory(&cfg)
            .unwrap()
            .summary
            .final_report
            .corruption
            .unwrap();
        let row = &table.families["gaussian_noise"];
        s1.push(row.severities[0]);
        s5.push(row.severities[4]);
    }
    assert!(median(&s5).unwrap() <= median(&s1).unwrap());
}

#[test]
fn outlier_mixing_contract() {
    let clean = gen_blobs(&blob_spec(vec![50, 50], 4.0, 1.0, 3)).unwrap();
    let spec = OutlierSpec {
        distance_factor: 4.0,
        direction_seed: 1,
        seed: 2,
    };
    assert_eq!(mix_outliers(&clean, 0.0, &spec).unwrap(), clean);
    assert!(mix_outliers(&clean, 1.0, &spec).is_err());
    assert!(mix_outliers(
        &clean,
        0.3,
        &OutlierSpec {
            distance_factor: 2.0,
            ..spec
        }
    )
    .is_err());

    let mixed = mix_outliers(&clean, 0.3, &spec).unwrap();
    let groups = mixed.groups.as_ref().unwrap();
    let outliers: Vec<usize> = (0..mixed.len())
        .filter(|&i| groups[i] == OUTLIER_TAG)
        .collect();
    assert_eq!(outliers.len(), 30);
    assert_eq!(mixed.samples.labels, clean.samples.labels);
    assert_eq!(mixed.samples.ids, clean.samples.ids);

    // the outlier cluster means sit far from the inlier means of their class
    for k in 0..2 {
        let centroid = |rows: &[usize], src: &Dataset| -> Vec<f64> {
            let mut c = vec![0.0; 4];
            for &i in rows {
                for (a, x) in c.iter_mut().zip(src.samples.features.row(i)) {
                    *a += x / rows.len() as f64;
                }
            }
            c
        };
        let out_k: Vec<usize> = outliers
            .iter()
            .copied()
            .filter(|&i| mixed.samples.labels[i] == k)
            .collect();
        let in_k: Vec<usize> = (0..clean.len())
            .filter(|&i| clean.samples.labels[i] == k)
            .collect();
        let (a, b) = (centroid(&out_k, &mixed), centroid(&in_k, &clean));
        let dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist >= 3.0, "class {k}: outlier mean {dist} from inliers");
    }
}

fn settings(cfg: &ExperimentConfig) -> TrainSettings {
    TrainSettings::from_config(cfg).unwrap()
}

#[test]
fn zero_budgets_reproduce_erm_bitwise() {
    let base = r#""seed": 6, "epochs": 3, "corruptions": [], "dataset": {"generator": "blobs"}, "model": {"hidden": 8}"#;
    let erm = config(&format!(r#"{{"method": "erm", {base}}}"#));
    let var = config(&format!(r#"{{"method": "var_dro", {base}}}"#));
    let data = erm.build_splits().unwrap().train.samples;
    let a = train(&settings(&erm), init_model(&erm).unwrap(), &data, |_, _| {
        Ok(())
    })
    .unwrap();
    let mut s = settings(&var);
    s.budget_override = Some(0.0);
    let b = train(&s, init_model(&var).unwrap(), &data, |_, _| Ok(())).unwrap();
    assert_eq!(a.model.params, b.model.params);
    let bits = |m: &ModelParams| m.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
}

#[test]
fn var_dro_defaults_fit_blobs() {
    let cfg = config(
        r#"{"method": "var_dro", "seed": 1, "corruptions": [], "dataset": {"generator": "blobs"}}"#,
    );
    assert_eq!(cfg.epochs, 30);
    let run = run_in_memory(&cfg).unwrap();
    let acc = run.summary.final_report.train.accuracy;
    assert!(acc >= 0.90, "train accuracy {acc}");
}

#[test]
fn budgets_respect_the_schedule() {
    for unit in ["epoch", "iteration"] {
        let cfg = config(&format!(
            r#"{{"method": "var_dro", "seed": 3, "epochs": 12, "schedule_unit": "{unit}", "eps_end": 0.6,
                "corruptions": [], "dataset": {{"generator": "blobs"}}}}"#
        ));
        let mut s = settings(&cfg);
        s.trace_batches = true;
        let data = cfg.build_splits().unwrap().train.samples;
        let out = train(&s, init_model(&cfg).unwrap(), &data, |_, _| Ok(())).unwrap();
        let sched = cfg.schedule().unwrap();
        for b in &out.trace {
            assert_eq!(b.cap, sched.cap_at(b.t).unwrap());
            if b.t < sched.warmup() {
                assert_eq!(b.cap, sched.eps_start());
            }
            assert!(b.min_eps >= cfg.eps_min && b.max_eps <= b.cap + 1e-12);
            assert!(b.robust_objective >= b.mean_loss - 1e-12);
        }
        for e in &out.epochs {
            assert!(e.max_eps.unwrap() <= e.max_cap + 1e-12);
            assert!(e.mean_eps.unwrap() <= e.max_cap + 1e-12);
        }
    }
}

#[test]
fn kl_dro_robust_risk_dominates_mean() {
    let cfg = config(
        r#"{"method": "kl_dro", "seed": 2, "epochs": 3, "corruptions": [], "dataset": {"generator": "blobs"}}"#,
    );
    let mut s = settings(&cfg);
    s.trace_batches = true;
    let data = cfg.build_splits().unwrap().train.samples;
    let out = train(&s, init_model(&cfg).unwrap(), &data, |_, _| Ok(())).unwrap();
    assert!(out
        .trace
        .iter()
        .all(|b| b.robust_objective >= b.mean_loss - 1e-12));
}

#[test]
fn group_tags_do_not_reach_the_trainer() {
    let cfg = config(
        r#"{"method": "var_dro", "seed": 5, "epochs": 3, "corruptions": [], "dataset": {"generator": "spurious", "samples": 200}}"#,
    );
    let mut split = cfg.build_splits().unwrap().train;
    let run = |d: &Dataset| {
        train(
            &settings(&cfg),
            init_model(&cfg).unwrap(),
            &d.samples,
            |_, _| Ok(()),
        )
        .unwrap()
    };
    let before = run(&split).model;
    split.groups = Some(vec!["scrambled".into(); split.len()]);
    assert_eq!(run(&split).model, before);
}

#[test]
fn divergence_is_reported_with_position() {
    let cfg = config(
        r#"{"method": "erm", "seed": 1, "lr": 1e300, "corruptions": [], "dataset": {"generator": "blobs"}}"#,
    );
    match run_in_memory(&cfg) {
        Err(e @ HarnessError::Divergence { .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn constant_model() -> ModelParams {
    ModelParams::new(Architecture::linear(1, 2), vec![0.0, 0.0, 1.0, 0.0]).unwrap()
}

fn dataset(xs: Vec<f64>, labels: Vec<usize>, groups: Option<Vec<&str>>) -> Dataset {
    let n = xs.len();
    Dataset {
        samples: vardro::harness::LabeledSamples {
            features: FeatureMatrix::new(n, 1, xs).unwrap(),
            labels,
            ids: (0..n as u64).collect(),
            classes: 2,
        },
        groups: groups.map(|g| g.into_iter().map(String::from).collect()),
    }
}

#[test]
fn evaluation_examples() {
    let balanced = dataset(vec![0.0; 10], [0, 1].repeat(5), None);
    let e = evaluate(&constant_model(), &balanced).unwrap();
    assert_eq!(e.accuracy, 0.5);
    assert!(e.worst_group_accuracy.is_none());

    // logit_1 = x, logit_0 = -x: predicts the sign of x
    let sign = ModelParams::new(Architecture::linear(1, 2), vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
    let xs: Vec<f64> = (0..10)
        .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 })
        .collect();
    let perfect = dataset(xs, [0, 1].repeat(5), Some(["a", "b"].repeat(5)));
    let e = evaluate(&sign, &perfect).unwrap();
    assert_eq!((e.accuracy, e.worst_group_accuracy), (1.0, Some(1.0)));

    let mut groups = vec!["big"; 90];
    groups.extend(vec!["small"; 10]);
    let mut labels = vec![0; 90];
    labels.extend(vec![1; 10]);
    let e = evaluate(
        &constant_model(),
        &dataset(vec![0.0; 100], labels, Some(groups)),
    )
    .unwrap();
    assert!((e.accuracy - 0.9).abs() < 1e-15);
    assert_eq!(e.worst_group_accuracy, Some(0.0));
    assert_eq!(e.group_accuracies["big"], 1.0);

    assert!(evaluate(&constant_model(), &dataset(vec![], vec![], None)).is_err());
}

#[test]
fn bundles_are_byte_identical_and_round_trip() {
    let cfg = config(
        r#"{"method": "var_dro", "seed": 9, "epochs": 4, "eval_at_epochs": [2], "dataset": {"generator": "blobs", "outlier_fraction": 0.3}}"#,
    );
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, summary) = run_experiment(&cfg, a.path()).unwrap();
    let (db, _) = run_experiment(&cfg, b.path()).unwrap();
    for file in ["metrics.csv", "summary.json", "model.json", "config.json"] {
        assert_eq!(
            std::fs::read(da.join(file)).unwrap(),
            std::fs::read(db.join(file)).unwrap(),
            "{file}"
        );
    }
    let text = std::fs::read_to_string(da.join("summary.json")).unwrap();
    let parsed: RunSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, summary);
    assert!(parsed.checkpoints.contains_key(&2));
    assert!(parsed.final_report.outlier_accuracy().is_some());
    let echoed = ExperimentConfig::load(&da.join("config.json")).unwrap();
    assert_eq!(echoed, cfg);

    let records = run_in_memory(&cfg).unwrap().records;
    assert_eq!(
        metrics_csv(&records),
        std::fs::read(da.join("metrics.csv")).unwrap()
    );
    assert_eq!(records.len(), 2 * cfg.epochs);
    for r in &records {
        assert!((0.0..=1.0).contains(&r.accuracy));
        if let Some(w) = r.worst_group_accuracy {
            assert!(w <= r.accuracy);
        }
    }
}

#[test]
fn sweep_emits_a_row_per_method_and_seed() {
    let cfg =
        config(r#"{"method": "erm", "seed": 1, "epochs": 2, "dataset": {"generator": "blobs"}}"#);
    let dir = tempfile::tempdir().unwrap();
    let summary = sweep(&cfg, &Method::ALL, &[1, 2], dir.path()).unwrap();
    assert_eq!(summary.rows.len(), 6);
    let methods: Vec<Method> = summary.by_method.iter().map(|m| m.method).collect();
    assert_eq!(methods, Method::ALL.to_vec());
    assert!(summary
        .by_method
        .iter()
        .all(|m| m.runs == 2 && m.corruption.is_some()));
    assert!(dir.path().join("sweep_summary.json").exists());
    assert!(dir.path().join("corruption_table.csv").exists());
    assert!(dir.path().join("kl_dro_seed2").join("metrics.csv").exists());
}

#[test]
fn invalid_configs_name_the_field() {
    let cases = [
        (
            r#"{"seed": 1, "dataset": {"generator": "blobs"}}"#,
            "method",
        ),
        (
            r#"{"method": "erm", "dataset": {"generator": "blobs"}}"#,
            "seed",
        ),
        (
            r#"{"method": "erm", "seed": 1, "dataset": {"generator": "blobs"}, "lr": -1}"#,
            "lr",
        ),
        (
            r#"{"method": "erm", "seed": 1, "dataset": {"generator": "blobs"}, "batch_size": 0}"#,
            "batch_size",
        ),
        (
            r#"{"method": "erm", "seed": 1, "dataset": {"generator": "blobs"}, "eps_end": 0.01}"#,
            "eps_end",
        ),
        (
            r#"{"method": "erm", "seed": 1, "dataset": {"generator": "blobs", "outlier_fraction": 1.0}}"#,
            "outlier_fraction",
        ),
        (
            r#"{"method": "erm", "seed": 1, "dataset": {"generator": "blobs"}, "colour": 3}"#,
            "colour",
        ),
        (
            r#"{"method": "sgd", "seed": 1, "dataset": {"generator": "blobs"}}"#,
            "sgd",
        ),
    ];
    for (doc, field) in cases {
        let err = ExperimentConfig::from_json(doc).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{doc}");
        assert!(err.to_string().contains(field), "{doc}: {err}");
    }
}

#[test]
fn defaults_are_filled_in() {
    let cfg = config(r#"{"method": "kl_dro", "seed": 3, "dataset": {"generator": "spurious"}}"#);
    let filled = ExperimentConfig::with_defaults(
        Method::KlDro,
        DatasetConfig::Spurious {
            samples: 600,
            test_samples: 2000,
            correlation: 0.95,
            core_strength: 1.0,
            spurious_strength: 3.0,
            noise_dims: 2,
            noise: 1.0,
        },
        3,
    );
    assert_eq!(cfg, filled);
    assert_eq!(cfg.run_name(), "kl_dro_seed3");
}

#[test]
fn hooked_settings_match_plain_run_without_hooks() {
    let cfg = config(
        r#"{"method": "var_dro", "seed": 2, "epochs": 2, "corruptions": [], "dataset": {"generator": "blobs"}}"#,
    );
    let plain = run_in_memory(&cfg).unwrap();
    let hooked = run_with_settings(&cfg, settings(&cfg)).unwrap();
    assert_eq!(plain.model, hooked.model);
}
