use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vardro::harness::config::{ExperimentConfig, Method};
use vardro::harness::experiment::{corruption_table, load_model, run_experiment, sweep};
use vardro::harness::{evaluate, HarnessError};
use vardro::{robust_objective, water_fill, BudgetVector, LossVector};

#[derive(Parser)]
#[command(
    name = "vardro",
    version,
    about = "Per-sample variance-driven robust training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one inner maximization: {"losses": [..], "epsilons": [..]} -> {"weights": [..], "objective": x}
    Solve {
        /// Input JSON file; standard input when omitted.
        input: Option<PathBuf>,
    },
    /// Train one config and write its result bundle.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output root (overrides the config and the environment).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every method x seed combination of a base config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "erm,kl_dro,var_dro")]
        methods: Vec<String>,
        /// Seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the dataset a config describes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveInput {
    losses: Vec<f64>,
    epsilons: Vec<f64>,
}

#[derive(Serialize)]
struct SolveOutput {
    weights: Vec<f64>,
    objective: f64,
}

fn input_error(e: impl ToString) -> HarnessError {
    HarnessError::config("input", e.to_string())
}

fn solve(input: Option<&Path>) -> Result<(), HarnessError> {
    let text = match input {
        Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?,
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| HarnessError::io(Path::new("<stdin>"), e))?;
            s
        }
    };
    let req: SolveInput = serde_json::from_str(&text).map_err(input_error)?;
    let losses = LossVector::new(req.losses).map_err(input_error)?;
    let budgets = BudgetVector::new(req.epsilons).map_err(input_error)?;
    let weights = water_fill(&losses, &budgets).map_err(input_error)?;
    let objective = robust_objective(&losses, &weights)?;
    let out = SolveOutput {
        weights: weights.into_inner(),
        objective,
    };
    println!("{}", serde_json::to_string(&out).expect("serializable"));
    Ok(())
}

fn output_root(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| cfg.output_root())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Solve { input } => solve(input.as_deref()),
        Command::Train { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (dir, summary) = run_experiment(&cfg, &output_root(&cfg, output))?;
            let r = &summary.final_report;
            eprintln!(
                "{}: test accuracy {:.4}, train accuracy {:.4} -> {}",
                cfg.run_name(),
                r.test.accuracy,
                r.train.accuracy,
                dir.display()
            );
            Ok(())
        }
        Command::Sweep {
            config,
            methods,
            seeds,
            output,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let methods = methods
                .iter()
                .map(|m| m.parse::<Method>())
                .collect::<Result<Vec<_>, _>>()?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let root = output_root(&cfg, output);
            let summary = sweep(&cfg, &methods, &seeds, &root)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary.by_method).expect("serializable")
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            split,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = load_model(&checkpoint)?;
            let splits = cfg.build_splits()?;
            let data = match split.as_str() {
                "train" => &splits.train,
                "test" => &splits.test,
                other => {
                    return Err(HarnessError::config(
                        "split",
                        format!("unknown split `{other}`"),
                    ))
                }
            };
            let eval = evaluate(&model, data)?;
            let corruption = corruption_table(
                &model,
                data,
                &cfg.corruptions,
                cfg.corruption_scale,
                cfg.corruption_seed(),
            )?;
            let out =
                serde_json::json!({ "split": split, "evaluation": eval, "corruption": corruption });
            println!(
                "{}",
                serde_json::to_string_pretty(&out).expect("serializable")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
