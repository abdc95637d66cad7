use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mspl_core::dataio::SynthConfig;
use mspl_core::experiment::{self, ExperimentConfig};
use mspl_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mspl",
    about = "Few-shot intrusion detection with multi-space prototypical networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train over every seed in the config and write per-seed artifacts plus
    /// an aggregate CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: mspl_out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Re-evaluate a checkpoint on the validation split of its run.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Write the report JSON here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train every point of a fusion-weight grid and rank by mean
    /// validation macro F1.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// "all" (15 simplex points) or "vertices" (4 single-metric runs).
        #[arg(long, default_value = "all")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Generate a Gaussian-blob dataset with a schema file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &PathBuf, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out, quiet } => {
            let cfg = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| PathBuf::from("mspl_out"));
            let arts = experiment::run_train(&cfg, &out, quiet)?;
            if !quiet {
                println!("artifacts in {}", arts.out_dir.display());
            }
        }
        Cmd::Eval { checkpoint, config, out, quiet } => {
            let cfg = load_config(&config, None)?;
            let report = experiment::run_eval(&checkpoint, &cfg, out.as_deref())?;
            if quiet {
                println!(
                    "ba {} f1 {} auprc {}",
                    report.balanced_accuracy, report.macro_f1, report.macro_auprc
                );
            } else {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
        }
        Cmd::Sweep { config, grid, out, quiet } => {
            let cfg = load_config(&config, None)?;
            let grid = match grid.as_str() {
                "all" => experiment::default_sweep_grid(),
                "vertices" => experiment::vertex_sweep_grid(),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown grid {other:?}; expected \"all\" or \"vertices\""
                    )))
                }
            };
            let out = out.unwrap_or_else(|| PathBuf::from("mspl_out"));
            let arts = experiment::run_sweep(&cfg, &grid, &out, quiet)?;
            if !quiet {
                let best = &arts.rows[0];
                let a = best.weights.as_array();
                println!(
                    "best weights [{} {} {} {}] with mean f1 {}",
                    a[0], a[1], a[2], a[3], best.mean_macro_f1
                );
                println!("ranking in {}", arts.csv_path.display());
            }
        }
        Cmd::Synth { out, per_class, dim, classes, separation, seed } => {
            if classes < 2 || dim < 1 || per_class < 1 || separation < 0.0 {
                return Err(Error::InvalidConfig(
                    "synth needs classes >= 2, dim >= 1, per-class >= 1, separation >= 0".into(),
                ));
            }
            let cfg = SynthConfig { n_per_class: per_class, dim, n_classes: classes, separation, seed };
            let (data, schema) = experiment::run_synth(&cfg, &out)?;
            println!("wrote {} and {}", data.display(), schema.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            ExitCode::FAILURE
        }
    }
}
