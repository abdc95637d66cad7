//! Episodic training loop: Adam with gradient clipping, per-epoch validation
//! on a fixed episode set, best-F1 checkpointing and early stopping.
//!
//! Episodes are materialized once before the epoch loop. Runs are bitwise
//! deterministic in the config seed.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, Dataset};
use crate::embedder::{Activation, Architecture, ModelParams};
use crate::episodic::{self, Episode, EpisodePlan};
use crate::evaluator::{self, EvalReport};
use crate::metric_spaces::{self, MetricId, MetricWeights, NormConfig};
use crate::objective;
use crate::prototypes::{self, EmaParams, DEFAULT_EMA_BETA};
use crate::{subseed, Error, Result};

const STREAM_SAMPLE: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_EPISODES: u64 = 2;
const STREAM_VAL_EPISODES: u64 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub weights: MetricWeights,
    pub norm: NormConfig,
    pub n_episodes: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub val_episodes: usize,
    /// Cap on training rows, drawn as a stratified subsample. None keeps the
    /// whole split; a cap larger than the split is a no-op.
    pub n_train_samples: Option<usize>,
    /// Per-class floor for the subsample; default support + query.
    pub k_min: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub ema_enabled: bool,
    pub ema_beta: f64,
    pub seed: u64,
    /// Seed for the fixed validation episodes; default derived from `seed`.
    pub val_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dims: vec![64, 64],
            embedding_dim: 32,
            activation: Activation::Relu,
            weights: MetricWeights::uniform(&MetricId::ALL),
            norm: NormConfig::default(),
            n_episodes: 20,
            support_size: 5,
            query_size: 5,
            val_episodes: 20,
            n_train_samples: None,
            k_min: None,
            epochs: 100,
            lr: 1e-3,
            clip_norm: 1.0,
            patience: 10,
            ema_enabled: true,
            ema_beta: DEFAULT_EMA_BETA,
            seed: 0,
            val_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be >= 1");
        }
        if self.n_episodes == 0 || self.support_size == 0 || self.query_size == 0 {
            return bad("episode plan needs n_episodes, support_size and query_size >= 1");
        }
        if self.val_episodes == 0 {
            return bad("val_episodes must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad("ema_beta must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.embedding_dim,
            activation: self.activation,
        }
    }
}

/// Adam with bias correction; beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Array1<f64>,
    v: Array1<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: Array1::zeros(len),
            v: Array1::zeros(len),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, theta: &mut Array1<f64>, grad: ArrayView1<f64>, lr: f64) -> Result<()> {
        if grad.len() != self.m.len() || theta.len() != self.m.len() {
            return Err(Error::LengthMismatch { expected: self.m.len(), got: grad.len() });
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales the gradient to at most `clip_norm` in L2, preserving direction.
pub fn clip_gradients(mut grad: Array1<f64>, clip_norm: f64) -> Result<Array1<f64>> {
    assert!(clip_norm > 0.0);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        grad.mapv_inplace(|g| g * scale);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean episode loss (each episode's loss is summed over query-class
    /// pairs).
    pub train_loss: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub macro_auprc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,train_loss,balanced_accuracy,macro_f1,macro_auprc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.balanced_accuracy, r.macro_f1, r.macro_auprc
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Raw parameters from the best validation epoch.
    pub params: ModelParams,
    /// Polyak average as of the best epoch (equal to init when disabled).
    pub ema: EmaParams,
    pub history: TrainHistory,
    pub best_report: EvalReport,
}

fn gather_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}

/// Scores every query of every episode with the given parameters and pools
/// them into one report. Pure: no RNG, no parameter mutation.
pub fn validate_model(
    params: &ModelParams,
    ds: &Dataset,
    episodes: &[Episode],
    weights: &MetricWeights,
    norm: &NormConfig,
) -> Result<EvalReport> {
    let n_classes = ds.n_classes();
    let mut score_buf: Vec<f64> = Vec::new();
    let mut truth_buf: Vec<f64> = Vec::new();
    let mut n_rows = 0usize;
    for ep in episodes {
        let (s_rows, s_classes) = ep.support_flat();
        let (q_rows, _) = ep.query_flat();
        let (zs, _) = params.forward(gather_rows(&ds.features, &s_rows).view())?;
        let (zq, _) = params.forward(gather_rows(&ds.features, &q_rows).view())?;
        let protos = prototypes::compute(zs.view(), &s_classes, n_classes)?;
        let tensor = metric_spaces::compute(zq.view(), protos.view(), weights, norm)?;
        let scores = evaluator::scores_from_distances(tensor.fused.view());
        let truth = gather_rows(&ds.labels, &q_rows);
        score_buf.extend(scores.iter());
        truth_buf.extend(truth.iter());
        n_rows += q_rows.len();
    }
    let scores = Array2::from_shape_vec((n_rows, n_classes), score_buf).expect("row major");
    let truth = Array2::from_shape_vec((n_rows, n_classes), truth_buf).expect("row major");
    evaluator::evaluate(scores.view(), truth.view(), ds.schema.label_mode)
}

pub fn train(train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_ds.n_features() != train_ds.n_features() {
        return Err(Error::ShapeMismatch {
            expected: format!("validation data with {} features", train_ds.n_features()),
            got: format!("{} features", val_ds.n_features()),
        });
    }
    let n_classes = train_ds.n_classes();
    let arch = cfg.architecture(train_ds.n_features());
    arch.validate()?;

    let pool_owned;
    let pool: &Dataset = match cfg.n_train_samples {
        Some(n) if n < train_ds.n_rows() => {
            let k_min = cfg.k_min.unwrap_or(cfg.support_size + cfg.query_size);
            pool_owned =
                dataio::stratified_sample(train_ds, n, k_min, subseed(cfg.seed, STREAM_SAMPLE))?;
            &pool_owned
        }
        _ => train_ds,
    };

    let episodes = episodic::create_episodes(
        pool,
        &EpisodePlan {
            n_episodes: cfg.n_episodes,
            support_size: cfg.support_size,
            query_size: cfg.query_size,
            seed: subseed(cfg.seed, STREAM_EPISODES),
        },
    )?;
    let val_episodes = episodic::create_episodes(
        val_ds,
        &EpisodePlan {
            n_episodes: cfg.val_episodes,
            support_size: cfg.support_size,
            query_size: cfg.query_size,
            seed: cfg.val_seed.unwrap_or_else(|| subseed(cfg.seed, STREAM_VAL_EPISODES)),
        },
    )?;

    let mut model = ModelParams::init(&arch, subseed(cfg.seed, STREAM_INIT));
    let mut theta = model.to_flat();
    let mut ema = EmaParams::init(&model, cfg.ema_beta, cfg.ema_enabled);
    let mut adam = AdamState::new(theta.len());

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, Array1<f64>, EmaParams, EvalReport)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for (ei, ep) in episodes.iter().enumerate() {
            let (s_rows, s_classes) = ep.support_flat();
            let (q_rows, _) = ep.query_flat();
            let xs = gather_rows(&pool.features, &s_rows);
            let xq = gather_rows(&pool.features, &q_rows);
            let yq = gather_rows(&pool.labels, &q_rows);

            let (zs, cache_s) = model.forward(xs.view())?;
            let (zq, cache_q) = model.forward(xq.view())?;
            let protos = prototypes::compute(zs.view(), &s_classes, n_classes)?;
            let tensor =
                metric_spaces::compute(zq.view(), protos.view(), &cfg.weights, &cfg.norm)?;
            let lv = objective::loss(tensor.fused.view(), yq.view())?;
            if !lv.total.is_finite() {
                return Err(Error::DivergedLoss { epoch, episode: ei });
            }
            loss_sum += lv.total;

            let (dzq, dproto) = metric_spaces::distances_backward(
                zq.view(),
                protos.view(),
                &cfg.weights,
                &tensor,
                lv.grad.view(),
            )?;
            let dzs = prototypes::backward(dproto.view(), &s_classes, n_classes);
            let grad = model.backward(&cache_q, dzq.view())? + model.backward(&cache_s, dzs.view())?;
            let grad = clip_gradients(grad, cfg.clip_norm)?;
            adam.step(&mut theta, grad.view(), cfg.lr)?;
            model = ModelParams::from_flat(&arch, theta.view())?;
            ema.update(&model)?;
        }

        let val_params = if cfg.ema_enabled { ema.model(&arch)? } else { model.clone() };
        let mut report = validate_model(&val_params, val_ds, &val_episodes, &cfg.weights, &cfg.norm)?;
        report.params_used = if cfg.ema_enabled { "ema" } else { "raw" }.into();

        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / episodes.len() as f64,
            balanced_accuracy: report.balanced_accuracy,
            macro_f1: report.macro_f1,
            macro_auprc: report.macro_auprc,
        });

        let improved = best.as_ref().map_or(true, |(_, _, _, b)| report.macro_f1 > b.macro_f1);
        if improved {
            best = Some((epoch, theta.clone(), ema.clone(), report));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_theta, best_ema, best_report) = best.expect("at least one epoch ran");
    let params = ModelParams::from_flat(&arch, best_theta.view())?;
    Ok(TrainOutcome {
        params,
        ema: best_ema,
        history: TrainHistory { records, best_epoch, stopped_early },
        best_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, SynthConfig};

    #[test]
    fn clip_rescales_long_gradients() {
        let g = Array1::from_vec(vec![6.0, 8.0]); // norm 10
        let c = clip_gradients(g, 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15);
        assert!((c[1] - 0.8).abs() < 1e-15);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_passes_short_gradients_untouched() {
        let g = Array1::from_vec(vec![0.3, -0.4]); // norm 0.5
        let c = clip_gradients(g.clone(), 1.0).unwrap();
        assert_eq!(c, g);
    }

    #[test]
    fn clip_rejects_non_finite() {
        let g = Array1::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(clip_gradients(g, 1.0), Err(Error::NonFiniteGradient)));
        let g = Array1::from_vec(vec![f64::INFINITY]);
        assert!(matches!(clip_gradients(g, 1.0), Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn adam_first_step_is_bias_corrected_lr() {
        let mut theta = Array1::zeros(4);
        let grad = Array1::ones(4);
        let mut adam = AdamState::new(4);
        adam.step(&mut theta, grad.view(), 1e-3).unwrap();
        // m_hat = 1, v_hat = 1: step = lr / (1 + eps).
        let expect = -1e-3 / (1.0 + 1e-8);
        for &v in theta.iter() {
            assert!((v - expect).abs() < 1e-18);
        }
    }

    #[test]
    fn adam_constant_gradient_walks_at_lr() {
        let mut theta = Array1::zeros(1);
        let grad = Array1::from_vec(vec![2.5]);
        let mut adam = AdamState::new(1);
        for _ in 0..100 {
            adam.step(&mut theta, grad.view(), 1e-2).unwrap();
        }
        // With a constant gradient the normalized step is ~lr each time.
        assert!((theta[0] + 1.0).abs() < 1e-3, "theta {}", theta[0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut theta = Array1::from_vec(vec![1.0, -2.0]);
        let snapshot = theta.clone();
        let mut adam = AdamState::new(2);
        adam.step(&mut theta, Array1::zeros(2).view(), 0.1).unwrap();
        assert_eq!(theta, snapshot);
    }

    #[test]
    fn adam_rejects_wrong_length() {
        let mut theta = Array1::zeros(3);
        let mut adam = AdamState::new(2);
        assert!(matches!(
            adam.step(&mut theta, Array1::zeros(3).view(), 0.1),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            hidden_dims: vec![16],
            embedding_dim: 8,
            n_episodes: 4,
            support_size: 5,
            query_size: 5,
            val_episodes: 6,
            epochs: 12,
            patience: 12,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn blobs(separation: f64, seed: u64) -> Dataset {
        synth_generate(&SynthConfig { n_per_class: 30, dim: 4, n_classes: 3, separation, seed })
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let tr = blobs(6.0, 1);
        let va = blobs(6.0, 2);
        let out = train(&tr, &va, &quick_config()).unwrap();
        assert!(out.best_report.balanced_accuracy >= 0.95, "{}", out.best_report.balanced_accuracy);
        assert_eq!(out.history.records.len(), 12);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let tr = blobs(3.0, 7);
        let va = blobs(3.0, 8);
        let cfg = quick_config();
        let a = train(&tr, &va, &cfg).unwrap();
        let b = train(&tr, &va, &cfg).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.ema.values, b.ema.values);
        assert_eq!(a.history.to_csv_string(), b.history.to_csv_string());
        let c = train(&tr, &va, &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.params.to_flat(), c.params.to_flat());
    }

    #[test]
    fn ema_toggle_does_not_change_the_optimization_path() {
        let tr = blobs(3.0, 11);
        let va = blobs(3.0, 12);
        let with = TrainConfig { ema_enabled: true, ..quick_config() };
        let without = TrainConfig { ema_enabled: false, ..quick_config() };
        let a = train(&tr, &va, &with).unwrap();
        let b = train(&tr, &va, &without).unwrap();
        let losses = |o: &TrainOutcome| -> Vec<f64> {
            o.history.records.iter().map(|r| r.train_loss).collect()
        };
        assert_eq!(losses(&a), losses(&b));
        // The Polyak average lags the raw weights once training moves.
        assert_ne!(a.ema.values, a.params.to_flat());
        assert_eq!(a.best_report.params_used, "ema");
        assert_eq!(b.best_report.params_used, "raw");
    }

    #[test]
    fn early_stopping_fires_on_unlearnable_data() {
        let tr = blobs(0.0, 21);
        let va = blobs(0.0, 22);
        let cfg = TrainConfig {
            epochs: 60,
            patience: 3,
            ..quick_config()
        };
        let out = train(&tr, &va, &cfg).unwrap();
        assert!(out.history.stopped_early);
        assert!(out.history.records.len() < 60);
    }

    #[test]
    fn best_epoch_tracks_the_maximum_f1() {
        let tr = blobs(2.0, 31);
        let va = blobs(2.0, 32);
        let out = train(&tr, &va, &quick_config()).unwrap();
        let best = out
            .history
            .records
            .iter()
            .max_by(|a, b| a.macro_f1.partial_cmp(&b.macro_f1).unwrap())
            .unwrap();
        assert_eq!(out.history.records[out.history.best_epoch].macro_f1, best.macro_f1);
        assert_eq!(out.best_report.macro_f1, best.macro_f1);
    }

    #[test]
    fn non_finite_features_surface_as_diverged_loss() {
        let mut tr = blobs(2.0, 41);
        tr.features[[0, 0]] = f64::INFINITY;
        let va = blobs(2.0, 42);
        let r = train(&tr, &va, &quick_config());
        assert!(
            matches!(r, Err(Error::DivergedLoss { .. }) | Err(Error::NonFiniteGradient)),
            "{r:?}"
        );
    }

    #[test]
    fn validation_is_pure() {
        let va = blobs(2.0, 51);
        let cfg = quick_config();
        let arch = cfg.architecture(va.n_features());
        let params = ModelParams::init(&arch, 3);
        let eps = episodic::create_episodes(
            &va,
            &EpisodePlan { n_episodes: 5, support_size: 4, query_size: 4, seed: 9 },
        )
        .unwrap();
        let a = validate_model(&params, &va, &eps, &cfg.weights, &cfg.norm).unwrap();
        let b = validate_model(&params, &va, &eps, &cfg.weights, &cfg.norm).unwrap();
        assert_eq!(a, b);
        assert!(a.balanced_accuracy >= 0.0 && a.balanced_accuracy <= 1.0);
        assert!(a.macro_auprc >= 0.0 && a.macro_auprc <= 1.0);
        assert_eq!(a.n_queries, 5 * 3 * 4);
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.weights = MetricWeights {
            euclidean: 0.7,
            cosine: 0.2,
            chebyshev: 0.0,
            wasserstein: 0.0,
        };
        assert!(matches!(cfg.validate(), Err(Error::WeightViolation(_))));
        let mut cfg = TrainConfig::default();
        cfg.ema_beta = 1.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
