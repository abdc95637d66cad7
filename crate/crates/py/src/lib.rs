//! Python bindings for the multi-space prototypical pipeline.
//!
//! Exposes datasets, training and the distance machinery with plain Python
//! types (nested lists, dicts, JSON strings). Heavy lifting stays in the
//! core crate; this layer only converts and reports errors as ValueError
//! with the same `error[module]: ...` text the CLI prints.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mspl_core::dataio::{self, DatasetSchema, SynthConfig};
use mspl_core::embedder::ModelParams;
use mspl_core::evaluator;
use mspl_core::experiment::Checkpoint;
use mspl_core::metric_spaces::{self, MetricId, MetricWeights, NormConfig};
use mspl_core::trainer::{self, TrainConfig};

fn pyerr(e: mspl_core::Error) -> PyErr {
    PyValueError::new_err(format!("error[{}]: {e}", e.module()))
}

fn to_array2(rows: &[Vec<f64>], what: &str) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err(format!("{what} rows have unequal lengths")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, m), flat)
        .map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_lists(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Feature matrix plus multi-hot labels, as produced by the generator or a
/// schema-guided CSV load.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: dataio::Dataset,
}

#[pymethods]
impl Dataset {
    /// Gaussian blobs: `classes` isotropic clusters with the given center
    /// separation.
    #[staticmethod]
    #[pyo3(signature = (per_class=100, dim=16, classes=3, separation=4.0, seed=0))]
    fn synth(per_class: usize, dim: usize, classes: usize, separation: f64, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            n_per_class: per_class,
            dim,
            n_classes: classes,
            separation,
            seed,
        };
        Dataset { inner: dataio::synth_generate(&cfg) }
    }

    /// Loads a CSV through a schema (JSON text, same shape as the files the
    /// CLI writes). Returns (dataset, n_rows_dropped).
    #[staticmethod]
    fn from_csv(path: &str, schema_json: &str) -> PyResult<(Dataset, usize)> {
        let schema: DatasetSchema = serde_json::from_str(schema_json)
            .map_err(|e| PyValueError::new_err(format!("schema: {e}")))?;
        let (ds, dropped) = dataio::load_csv(path.as_ref(), &schema).map_err(pyerr)?;
        Ok((Dataset { inner: ds }, dropped))
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.schema.class_names.clone()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        to_lists(&self.inner.features)
    }

    fn labels(&self) -> Vec<Vec<f64>> {
        to_lists(&self.inner.labels)
    }

    /// First active class per row, the stratification key.
    fn primary_classes(&self) -> Vec<usize> {
        (0..self.inner.n_rows()).map(|r| self.inner.primary_class(r)).collect()
    }

    /// Stratified split into (train, val, test).
    #[pyo3(signature = (fractions=vec![0.6, 0.2, 0.2], seed=0))]
    fn split(&self, fractions: Vec<f64>, seed: u64) -> PyResult<(Dataset, Dataset, Dataset)> {
        let f: [f64; 3] = fractions
            .try_into()
            .map_err(|_| PyValueError::new_err("fractions must have exactly 3 entries"))?;
        let (a, b, c) = dataio::split(&self.inner, f, seed).map_err(pyerr)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }, Dataset { inner: c }))
    }

    /// Split and z-score all three parts with statistics fit on train only.
    #[pyo3(signature = (fractions=vec![0.6, 0.2, 0.2], seed=0))]
    fn split_standardized(
        &self,
        fractions: Vec<f64>,
        seed: u64,
    ) -> PyResult<(Dataset, Dataset, Dataset)> {
        let (a, b, c) = self.split(fractions, seed)?;
        let (tr, stats) = dataio::standardize(&a.inner, None).map_err(pyerr)?;
        let (va, _) = dataio::standardize(&b.inner, Some(&stats)).map_err(pyerr)?;
        let (te, _) = dataio::standardize(&c.inner, Some(&stats)).map_err(pyerr)?;
        Ok((Dataset { inner: tr }, Dataset { inner: va }, Dataset { inner: te }))
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} rows, {} features, {} classes)",
            self.inner.n_rows(),
            self.inner.n_features(),
            self.inner.n_classes()
        )
    }
}

/// Outcome of a training run: best-epoch parameters, metrics, history.
#[pyclass]
struct TrainResult {
    outcome: trainer::TrainOutcome,
    seed: u64,
}

impl TrainResult {
    fn eval_model(&self, use_ema: bool) -> PyResult<ModelParams> {
        if use_ema && self.outcome.ema.enabled {
            self.outcome.ema.model(&self.outcome.params.arch).map_err(pyerr)
        } else {
            Ok(self.outcome.params.clone())
        }
    }
}

#[pymethods]
impl TrainResult {
    #[getter]
    fn balanced_accuracy(&self) -> f64 {
        self.outcome.best_report.balanced_accuracy
    }

    #[getter]
    fn macro_f1(&self) -> f64 {
        self.outcome.best_report.macro_f1
    }

    #[getter]
    fn macro_auprc(&self) -> f64 {
        self.outcome.best_report.macro_auprc
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.outcome.history.best_epoch
    }

    #[getter]
    fn stopped_early(&self) -> bool {
        self.outcome.history.stopped_early
    }

    #[getter]
    fn params_used(&self) -> String {
        self.outcome.best_report.params_used.clone()
    }

    /// Epoch log as CSV text (same columns as the CLI's history.csv).
    fn history_csv(&self) -> String {
        self.outcome.history.to_csv_string()
    }

    /// Best-epoch validation report as JSON.
    fn report_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.outcome.best_report)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Writes a checkpoint the CLI's eval subcommand can consume.
    fn save_checkpoint(&self, path: &str) -> PyResult<()> {
        Checkpoint::from_outcome(&self.outcome, self.seed)
            .save(path.as_ref())
            .map_err(pyerr)
    }

    /// Embeds raw feature rows with the trained network (Polyak-averaged
    /// weights when they were tracked, otherwise the raw ones).
    #[pyo3(signature = (rows, use_ema=true))]
    fn embed(&self, rows: Vec<Vec<f64>>, use_ema: bool) -> PyResult<Vec<Vec<f64>>> {
        let x = to_array2(&rows, "rows")?;
        let model = self.eval_model(use_ema)?;
        let (z, _) = model.forward(x.view()).map_err(pyerr)?;
        Ok(to_lists(&z))
    }
}

/// Episodic training. `config_json` is a partial training config; missing
/// fields take the defaults. `seed` overrides the config seed.
#[pyfunction]
#[pyo3(signature = (train_ds, val_ds, config_json=None, seed=None))]
fn train(
    train_ds: &Dataset,
    val_ds: &Dataset,
    config_json: Option<&str>,
    seed: Option<u64>,
) -> PyResult<TrainResult> {
    let mut cfg: TrainConfig = match config_json {
        Some(s) => {
            serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}")))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = trainer::train(&train_ds.inner, &val_ds.inner, &cfg).map_err(pyerr)?;
    Ok(TrainResult { outcome, seed: cfg.seed })
}

/// All four query-prototype distance matrices plus their episode-normalized
/// convex fusion. `weights` is [euclidean, cosine, chebyshev, wasserstein]
/// on the simplex; default uniform.
#[pyfunction]
#[pyo3(signature = (queries, prototypes, weights=None, eps=1e-8, gamma=5.0))]
fn pairwise_distances<'py>(
    py: Python<'py>,
    queries: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    eps: f64,
    gamma: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let z = to_array2(&queries, "queries")?;
    let p = to_array2(&prototypes, "prototypes")?;
    let w = match weights {
        Some(v) => {
            let a: [f64; 4] = v
                .try_into()
                .map_err(|_| PyValueError::new_err("weights must have exactly 4 entries"))?;
            MetricWeights::new(a[0], a[1], a[2], a[3]).map_err(pyerr)?
        }
        None => MetricWeights::uniform(&MetricId::ALL),
    };
    let tensor =
        metric_spaces::compute(z.view(), p.view(), &w, &NormConfig { eps, gamma }).map_err(pyerr)?;

    let out = PyDict::new(py);
    for m in MetricId::ALL {
        out.set_item(m.name(), to_lists(&tensor.raw[m.index()]))?;
    }
    out.set_item("fused", to_lists(&tensor.fused))?;
    out.set_item("degenerate_vectors", tensor.degenerate_vectors)?;
    Ok(out)
}

/// Area under the precision-recall curve from the step interpolation, tied
/// scores entering as one group. None when there are no positives.
#[pyfunction]
fn average_precision(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != truth.len() {
        return Err(PyValueError::new_err("scores and truth differ in length"));
    }
    Ok(evaluator::average_precision(&scores, &truth))
}

/// Per-stream seed derivation used throughout the pipeline.
#[pyfunction]
fn subseed(seed: u64, stream: u64) -> u64 {
    mspl_core::subseed(seed, stream)
}

/// Embeds rows with a saved checkpoint (evaluation-time parameters).
#[pyfunction]
fn embed_with_checkpoint(path: &str, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let ckpt = Checkpoint::load(path.as_ref()).map_err(pyerr)?;
    let (model, _) = ckpt.eval_params().map_err(pyerr)?;
    let x = to_array2(&rows, "rows")?;
    if x.ncols() != model.arch.input_dim {
        return Err(PyValueError::new_err(format!(
            "rows have {} features, checkpoint expects {}",
            x.ncols(),
            model.arch.input_dim
        )));
    }
    let (z, _) = model.forward(x.view()).map_err(pyerr)?;
    Ok(to_lists(&z))
}

#[pymodule]
fn mspl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<TrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_distances, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(subseed, m)?)?;
    m.add_function(wrap_pyfunction!(embed_with_checkpoint, m)?)?;
    Ok(())
}
