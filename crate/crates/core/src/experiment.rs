//! End-to-end runs: config files, per-seed pipelines, checkpoints, sweeps.
//!
//! A run is fully determined by (config, seed): dataset load or generation,
//! split, standardization on train statistics, training and validation all
//! derive their randomness from the run seed. Two runs of the same config
//! produce byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{self, Dataset, DatasetSchema, FeatureStats, SynthConfig};
use crate::embedder::{Architecture, ModelParams};
use crate::episodic::{self, EpisodePlan};
use crate::evaluator::{self, EvalReport, SeedAggregate};
use crate::metric_spaces::{MetricId, MetricWeights};
use crate::prototypes::EmaParams;
use crate::trainer::{self, TrainConfig, TrainOutcome};
use crate::{subseed, Error, Result};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const STREAM_SPLIT: u64 = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// CSV on disk, interpreted through the schema.
    Csv { path: PathBuf, schema: DatasetSchema },
    /// Generated Gaussian blobs. The generator seed is part of the source,
    /// so every run seed sees the same dataset.
    Synth {
        n_per_class: usize,
        dim: usize,
        n_classes: usize,
        separation: f64,
        seed: u64,
    },
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub data: DataSource,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config format_version {} unsupported, expected {CONFIG_FORMAT_VERSION}",
                self.format_version
            )));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions(self.split));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        if let DataSource::Csv { schema, .. } = &self.data {
            schema.validate()?;
        }
        self.train.validate()
    }
}

/// Serialized training artifact. f64 values survive the JSON round trip
/// bit for bit (shortest-representation printing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: Architecture,
    pub seed: u64,
    pub theta: Vec<f64>,
    pub ema_values: Vec<f64>,
    pub ema_beta: f64,
    pub ema_enabled: bool,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, seed: u64) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: outcome.params.arch.clone(),
            seed,
            theta: outcome.params.to_flat().to_vec(),
            ema_values: outcome.ema.values.to_vec(),
            ema_beta: outcome.ema.beta,
            ema_enabled: outcome.ema.enabled,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "format_version {} unsupported",
                ckpt.format_version
            )));
        }
        if ckpt.theta.len() != ckpt.arch.param_count()
            || ckpt.ema_values.len() != ckpt.arch.param_count()
        {
            return Err(Error::CheckpointMismatch(format!(
                "parameter vector length {} does not fit the stored architecture",
                ckpt.theta.len()
            )));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_flat(&self.arch, ndarray::ArrayView1::from(&self.theta))
    }

    /// Parameters to evaluate with: the Polyak average when enabled,
    /// otherwise the raw weights. The string feeds EvalReport::params_used.
    pub fn eval_params(&self) -> Result<(ModelParams, &'static str)> {
        if self.ema_enabled {
            let ema = EmaParams {
                values: ndarray::Array1::from(self.ema_values.clone()),
                beta: self.ema_beta,
                enabled: true,
            };
            Ok((ema.model(&self.arch)?, "ema"))
        } else {
            Ok((self.params()?, "raw"))
        }
    }
}

pub fn load_dataset(source: &DataSource) -> Result<(Dataset, usize)> {
    match source {
        DataSource::Csv { path, schema } => dataio::load_csv(path, schema),
        DataSource::Synth { n_per_class, dim, n_classes, separation, seed } => {
            let ds = dataio::synth_generate(&SynthConfig {
                n_per_class: *n_per_class,
                dim: *dim,
                n_classes: *n_classes,
                separation: *separation,
                seed: *seed,
            });
            Ok((ds, 0))
        }
    }
}

/// Split and standardize for one run seed. Statistics come from the train
/// split only.
pub fn prepare_splits(
    raw: &Dataset,
    split: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, FeatureStats)> {
    let (tr, va, te) = dataio::split(raw, split, subseed(seed, STREAM_SPLIT))?;
    let (tr_std, stats) = dataio::standardize(&tr, None)?;
    let (va_std, _) = dataio::standardize(&va, Some(&stats))?;
    let (te_std, _) = dataio::standardize(&te, Some(&stats))?;
    Ok((tr_std, va_std, te_std, stats))
}

pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
}

/// Full pipeline for one seed: load, split, standardize, train.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let (raw, _dropped) = load_dataset(&cfg.data)?;
    let (tr, va, _te, _stats) = prepare_splits(&raw, cfg.split, seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let outcome = trainer::train(&tr, &va, &tcfg)?;
    let checkpoint = Checkpoint::from_outcome(&outcome, seed);
    Ok(SeedRun { seed, outcome, checkpoint })
}

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub aggregate: SeedAggregate,
    pub reports: Vec<EvalReport>,
}

/// Trains every seed in the config and writes per-seed artifacts plus the
/// cross-seed aggregate CSV.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path, quiet: bool) -> Result<TrainArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = run_single(cfg, seed)?;
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir)?;
        run.checkpoint.save(&seed_dir.join("checkpoint.json"))?;
        fs::write(seed_dir.join("history.csv"), run.outcome.history.to_csv_string())?;
        fs::write(
            seed_dir.join("report.json"),
            serde_json::to_string_pretty(&run.outcome.best_report)?,
        )?;
        if !quiet {
            let r = &run.outcome.best_report;
            println!(
                "seed {seed}: epoch {} ba {:.4} f1 {:.4} auprc {:.4}{}",
                run.outcome.history.best_epoch,
                r.balanced_accuracy,
                r.macro_f1,
                r.macro_auprc,
                if run.outcome.history.stopped_early { " (early stop)" } else { "" },
            );
        }
        reports.push(run.outcome.best_report.clone());
    }

    let aggregate = evaluator::aggregate_seeds(&reports)?;
    fs::write(out_dir.join("aggregate.csv"), aggregate.to_csv_string())?;
    if !quiet {
        for (name, mean, std) in &aggregate.rows {
            println!("{name}: {mean:.4} +- {std:.4} over {} seeds", aggregate.n_seeds);
        }
    }
    Ok(TrainArtifacts { out_dir: out_dir.to_path_buf(), aggregate, reports })
}

/// Re-evaluates a checkpoint on the validation episodes its run saw. The
/// split and episode seeds are reconstructed from the checkpoint's run seed,
/// so the report matches the training-time one exactly.
pub fn run_eval(
    checkpoint_path: &Path,
    cfg: &ExperimentConfig,
    out_path: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (raw, _) = load_dataset(&cfg.data)?;
    let (_tr, va, _te, _stats) = prepare_splits(&raw, cfg.split, ckpt.seed)?;

    let expected_arch = cfg.train.architecture(va.n_features());
    if expected_arch != ckpt.arch {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint architecture {:?} does not match config architecture {:?}",
            ckpt.arch, expected_arch
        )));
    }

    let val_episodes = episodic::create_episodes(
        &va,
        &EpisodePlan {
            n_episodes: cfg.train.val_episodes,
            support_size: cfg.train.support_size,
            query_size: cfg.train.query_size,
            seed: cfg.train.val_seed.unwrap_or_else(|| subseed(ckpt.seed, 3)),
        },
    )?;
    let (params, which) = ckpt.eval_params()?;
    let mut report =
        trainer::validate_model(&params, &va, &val_episodes, &cfg.train.weights, &cfg.train.norm)?;
    report.params_used = which.into();
    if let Some(p) = out_path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// The default weight grid: 4 vertices, 6 uniform pairs, 4 uniform triples
/// and the uniform quadruple, 15 points in enumeration order.
pub fn default_sweep_grid() -> Vec<MetricWeights> {
    let all = MetricId::ALL;
    let mut grid: Vec<MetricWeights> = all.iter().map(|&m| MetricWeights::vertex(m)).collect();
    for i in 0..4 {
        for j in i + 1..4 {
            grid.push(MetricWeights::uniform(&[all[i], all[j]]));
        }
    }
    for excluded in (0..4).rev() {
        let triple: Vec<MetricId> =
            (0..4).filter(|&j| j != excluded).map(|j| all[j]).collect();
        grid.push(MetricWeights::uniform(&triple));
    }
    grid.push(MetricWeights::uniform(&all));
    grid
}

/// Only the single-metric corners.
pub fn vertex_sweep_grid() -> Vec<MetricWeights> {
    MetricId::ALL.iter().map(|&m| MetricWeights::vertex(m)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub rank: usize,
    pub weights: MetricWeights,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub mean_balanced_accuracy: f64,
    pub mean_auprc: f64,
}

pub struct SweepArtifacts {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
}

/// Trains every grid point over all config seeds and writes a CSV ranked by
/// mean validation macro F1, best first.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    grid: &[MetricWeights],
    out_dir: &Path,
    quiet: bool,
) -> Result<SweepArtifacts> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    fs::create_dir_all(out_dir)?;

    let mut measured: Vec<(MetricWeights, f64, f64, f64, f64)> = Vec::new();
    for (gi, w) in grid.iter().enumerate() {
        w.validate()?;
        let mut point_cfg = cfg.clone();
        point_cfg.train.weights = *w;
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            reports.push(run_single(&point_cfg, seed)?.outcome.best_report);
        }
        let agg = evaluator::aggregate_seeds(&reports)?;
        let find = |name: &str| {
            agg.rows
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, m, s)| (*m, *s))
                .expect("aggregate carries headline metrics")
        };
        let (f1_mean, f1_std) = find("macro_f1");
        let (ba_mean, _) = find("balanced_accuracy");
        let (ap_mean, _) = find("macro_auprc");
        if !quiet {
            let a = w.as_array();
            println!(
                "grid {gi}: w=[{} {} {} {}] f1 {f1_mean:.4} ba {ba_mean:.4} auprc {ap_mean:.4}",
                a[0], a[1], a[2], a[3]
            );
        }
        measured.push((*w, f1_mean, f1_std, ba_mean, ap_mean));
    }

    // Rank by mean F1 descending; ties keep grid order.
    let mut order: Vec<usize> = (0..measured.len()).collect();
    order.sort_by(|&a, &b| measured[b].1.partial_cmp(&measured[a].1).unwrap().then(a.cmp(&b)));

    let mut rows = Vec::with_capacity(order.len());
    let mut csv = String::from(
        "rank,w_euclidean,w_cosine,w_chebyshev,w_wasserstein,mean_macro_f1,std_macro_f1,mean_balanced_accuracy,mean_auprc\n",
    );
    for (rank, &i) in order.iter().enumerate() {
        let (w, f1m, f1s, bam, apm) = measured[i];
        let a = w.as_array();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            rank + 1,
            a[0],
            a[1],
            a[2],
            a[3],
            f1m,
            f1s,
            bam,
            apm
        ));
        rows.push(SweepRow {
            rank: rank + 1,
            weights: w,
            mean_macro_f1: f1m,
            std_macro_f1: f1s,
            mean_balanced_accuracy: bam,
            mean_auprc: apm,
        });
    }
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    Ok(SweepArtifacts { rows, csv_path })
}

/// Writes a generated dataset plus its schema for later `--config` use.
pub fn run_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let ds = dataio::synth_generate(cfg);
    let data_path = out_dir.join("data.csv");
    let schema_path = out_dir.join("schema.json");
    dataio::save_csv(&ds, &data_path)?;
    fs::write(&schema_path, serde_json::to_string_pretty(&ds.schema)?)?;
    Ok((data_path, schema_path))
}
