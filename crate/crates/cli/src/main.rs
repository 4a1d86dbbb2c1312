use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use glioprog::data::{Dataset, VolumeDtype};
use glioprog::pipeline::experiment::{run_experiment, ExperimentConfig};
use glioprog::pipeline::stages;
use glioprog::tensor::Real;
use glioprog::{Error, Result};

#[derive(Parser)]
#[command(name = "glioprog", version, about = "Multimodal progression classifier: MRI patches + clinical features")]
struct Cli {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort into <out>/train (and <out>/test).
    SynthData,
    /// Self-supervised encoder pretraining; writes <out>/encoder.{json,bin}.
    PretrainSsl,
    /// Auxiliary-target encoder pretraining; writes <out>/encoder.{json,bin}.
    PretrainAux,
    /// Cross-validated training, test scoring and ensembling.
    Train,
    /// Score the config's test data with the fold models of a training run.
    Evaluate {
        /// Training run directory; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Permutation importance of a training run's fold models.
    Importance {
        /// Training run directory; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Rank clinical features and choose the best prefix.
    SelectFeatures,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn load(path: &Path, what: &str) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| e.in_stage(format!("load {what} ({})", path.display()), None))
}

fn run<T: Real>(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::SynthData => {
            let (train, test) = stages::synth_stage(cfg)?;
            train.save(&out.join("train"), VolumeDtype::F32Le)?;
            if let Some(test) = test {
                test.save(&out.join("test"), VolumeDtype::F32Le)?;
            }
            println!("wrote {} training subjects to {}", train.len(), out.join("train").display());
        }
        Command::PretrainSsl => {
            let data = load(cfg.ssl_data.as_ref().unwrap_or(&cfg.train_data), "ssl data")?;
            let run = stages::write_ssl_stage::<T>(cfg, &data, out)?;
            if let (Some(a), Some(b)) = (run.curve.first(), run.curve.last()) {
                println!("ssl loss {:.4} -> {:.4}", a.total, b.total);
            }
        }
        Command::PretrainAux => {
            let data = load(cfg.aux_data.as_ref().unwrap_or(&cfg.train_data), "auxiliary data")?;
            let run = stages::write_aux_stage::<T>(cfg, &data, out)?;
            if let (Some(a), Some(b)) = (run.curve.first(), run.curve.last()) {
                println!("auxiliary loss {:.4} -> {:.4}", a.loss, b.loss);
            }
        }
        Command::Train => {
            let outcome = run_experiment::<T>(cfg, Some(out))?;
            for (metric, cell) in &outcome.report.table {
                println!("{metric:<12} {cell}");
            }
        }
        Command::Evaluate { run } => {
            let path = cfg
                .test_data
                .as_ref()
                .ok_or_else(|| Error::Config("evaluate needs test_data in the config".into()))?;
            let data = load(path, "test data")?;
            let eval = stages::evaluate_stage::<T>(run.as_deref().unwrap_or(out), cfg.folds, &data)?;
            stages::write_evaluation(&eval, out)?;
            println!("ensemble auc {:.3} accuracy {:.3}", eval.ensemble.auc, eval.ensemble.accuracy);
        }
        Command::Importance { run } => {
            let data = load(&cfg.train_data, "training data")?;
            let entries = stages::importance_stage::<T>(cfg, run.as_deref().unwrap_or(out), &data)?;
            stages::write_importance_stage(&entries, out)?;
            for e in &entries {
                println!("{:>2} {:<24} {:+.4}", e.rank, e.feature, e.mean_auc_drop);
            }
        }
        Command::SelectFeatures => {
            let data = load(&cfg.train_data, "training data")?;
            let report = stages::selection_stage(cfg, &data)?;
            fs::create_dir_all(out)?;
            write_json(&out.join("selection.json"), &serde_json::to_value(&report)?)?;
            println!("selected {:?}", report.selection.features);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    };
    let result = cfg.and_then(|mut cfg| {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        match cli.precision {
            Precision::F32 => run::<f32>(&cli, &cfg),
            Precision::F64 => run::<f64>(&cli, &cfg),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
