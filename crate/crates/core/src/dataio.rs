//! Dataset loading, standardization, stratified subsampling and splits.
//!
//! All tabular data is dense f64. Labels are stored as an n_rows x n_classes
//! indicator matrix so multiclass (one-hot) and multilabel rows go through
//! the same code paths.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to per-feature standard deviations so constant columns
/// standardize to zero instead of NaN.
pub const FEATURE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Multiclass,
    Multilabel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    pub label_mode: LabelMode,
    /// Class index = position in this list. Order is contractual: labels,
    /// prototypes and report rows all use it.
    pub class_names: Vec<String>,
}

impl DatasetSchema {
    pub fn n_features(&self) -> usize {
        self.feature_columns.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::InvalidConfig("schema has no feature columns".into()));
        }
        if self.class_names.len() < 2 {
            return Err(Error::InvalidConfig("schema needs at least two classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate class name {name:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// n_rows x n_features.
    pub features: Array2<f64>,
    /// n_rows x n_classes indicator matrix; every row has at least one 1.
    pub labels: Array2<f64>,
    pub schema: DatasetSchema,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.ncols()
    }

    /// Index of the first active label of a row. For multiclass data this is
    /// the class; for multilabel data it is the stratification key.
    pub fn primary_class(&self, row: usize) -> usize {
        let r = self.labels.row(row);
        r.iter().position(|&v| v > 0.5).expect("row with no active label")
    }

    /// Disjoint strata keyed by the first active label.
    pub fn strata(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for i in 0..self.n_rows() {
            out[self.primary_class(i)].push(i);
        }
        out
    }

    /// Per-class membership pools. A multilabel row appears in every class it
    /// activates, so pools may overlap.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for i in 0..self.n_rows() {
            for (k, &v) in self.labels.row(i).iter().enumerate() {
                if v > 0.5 {
                    out[k].push(i);
                }
            }
        }
        out
    }

    /// New dataset holding the given rows, in order. Indices may repeat.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let d = self.n_features();
        let c = self.n_classes();
        let mut features = Array2::zeros((rows.len(), d));
        let mut labels = Array2::zeros((rows.len(), c));
        for (out_i, &r) in rows.iter().enumerate() {
            features.row_mut(out_i).assign(&self.features.row(r));
            labels.row_mut(out_i).assign(&self.labels.row(r));
        }
        Dataset { features, labels, schema: self.schema.clone() }
    }
}

/// Per-feature standardization parameters, fit on training data only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    /// Population standard deviation, floored at [`FEATURE_STD_FLOOR`].
    pub std: Array1<f64>,
}

/// Loads a CSV against the schema. Rows whose feature cells do not parse to
/// finite f64 are dropped; the second return value counts them. Unknown label
/// values are an error, not a drop: they signal a schema mistake.
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<(Dataset, usize)> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers = rdr.headers()?.clone();
    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let feat_pos: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| col_of(c))
        .collect::<Result<_>>()?;
    let label_pos = col_of(&schema.label_column)?;

    let class_of: HashMap<&str, usize> = schema
        .class_names
        .iter()
        .enumerate()
        .map(|(k, name)| (name.as_str(), k))
        .collect();

    let d = schema.n_features();
    let c = schema.n_classes();
    let mut feat_buf: Vec<f64> = Vec::new();
    let mut label_buf: Vec<f64> = Vec::new();
    let mut dropped = 0usize;

    'rows: for record in rdr.records() {
        let record = record?;
        let mut x = vec![0.0f64; d];
        for (j, &pos) in feat_pos.iter().enumerate() {
            match record.get(pos).and_then(|s| s.parse::<f64>().ok()) {
                Some(v) if v.is_finite() => x[j] = v,
                _ => {
                    dropped += 1;
                    continue 'rows;
                }
            }
        }
        let cell = record.get(label_pos).unwrap_or("");
        let mut y = vec![0.0f64; c];
        match schema.label_mode {
            LabelMode::Multiclass => {
                let k = *class_of
                    .get(cell)
                    .ok_or_else(|| Error::UnknownLabel(cell.to_string()))?;
                y[k] = 1.0;
            }
            LabelMode::Multilabel => {
                let mut any = false;
                for part in cell.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                    let k = *class_of
                        .get(part)
                        .ok_or_else(|| Error::UnknownLabel(part.to_string()))?;
                    y[k] = 1.0;
                    any = true;
                }
                if !any {
                    return Err(Error::UnknownLabel(cell.to_string()));
                }
            }
        }
        feat_buf.extend_from_slice(&x);
        label_buf.extend_from_slice(&y);
    }

    let n = feat_buf.len() / d;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let features = Array2::from_shape_vec((n, d), feat_buf).expect("row-major feature buffer");
    let labels = Array2::from_shape_vec((n, c), label_buf).expect("row-major label buffer");
    Ok((Dataset { features, labels, schema: schema.clone() }, dropped))
}

/// Writes a dataset back to CSV in schema column order. Floats use the
/// shortest representation that round-trips, so save -> load is exact.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = ds.schema.feature_columns.iter().map(String::as_str).collect();
    header.push(&ds.schema.label_column);
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v}")).collect();
        let active: Vec<&str> = ds
            .labels
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(k, _)| ds.schema.class_names[k].as_str())
            .collect();
        rec.push(active.join(";"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Standardizes features to zero mean and unit variance. With `stats: None`
/// the parameters are fit on `ds` (population variance, std floored); pass
/// training stats to transform validation and test splits consistently.
pub fn standardize(ds: &Dataset, stats: Option<&FeatureStats>) -> Result<(Dataset, FeatureStats)> {
    let d = ds.n_features();
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != d || s.std.len() != d {
                return Err(Error::ShapeMismatch {
                    expected: format!("stats over {d} features"),
                    got: format!("{} means, {} stds", s.mean.len(), s.std.len()),
                });
            }
            s.clone()
        }
        None => {
            if ds.n_rows() == 0 {
                return Err(Error::EmptyDataset);
            }
            let n = ds.n_rows() as f64;
            let mean = ds.features.sum_axis(ndarray::Axis(0)) / n;
            let mut std = Array1::zeros(d);
            for j in 0..d {
                let mu = mean[j];
                let var: f64 =
                    ds.features.column(j).iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                std[j] = var.sqrt().max(FEATURE_STD_FLOOR);
            }
            FeatureStats { mean, std }
        }
    };

    let mut features = ds.features.clone();
    for mut row in features.rows_mut() {
        for j in 0..d {
            row[j] = (row[j] - stats.mean[j]) / stats.std[j];
        }
    }
    Ok((Dataset { features, labels: ds.labels.clone(), schema: ds.schema.clone() }, stats))
}

/// Stratified subsample of exactly `n` rows without replacement.
///
/// Strata are the first-active-label groups. Targets are proportional
/// allocations by largest remainder, then raised to a floor of
/// `min(k_min, stratum size)` per class (degraded to 1 each if the floors
/// alone exceed `n`) and rebalanced to sum to `n`: overshoot is taken from
/// the classes furthest above their floor, shortfall goes to the classes
/// furthest below their exact proportional quota.
pub fn stratified_indices(ds: &Dataset, n: usize, k_min: usize, seed: u64) -> Result<Vec<usize>> {
    let by_class = ds.strata();
    let c = by_class.len();
    let total = ds.n_rows();
    if n > total {
        return Err(Error::InsufficientData { requested: n, available: total });
    }
    if n < c {
        return Err(Error::InvalidConfig(format!(
            "cannot stratify {n} rows over {c} classes"
        )));
    }
    for (k, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::MissingClass(k));
        }
    }

    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| n * s / total).collect();
    let rem: Vec<usize> = sizes.iter().map(|&s| (n * s) % total).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &k in order.iter().take(n - assigned) {
        alloc[k] += 1;
    }

    let mut floor: Vec<usize> = sizes.iter().map(|&s| k_min.min(s)).collect();
    if floor.iter().sum::<usize>() > n {
        floor = vec![1; c];
    }
    for k in 0..c {
        alloc[k] = alloc[k].max(floor[k]).min(sizes[k]);
    }

    while alloc.iter().sum::<usize>() > n {
        // Shrink the class with the most slack above its floor.
        let k = (0..c)
            .filter(|&k| alloc[k] > floor[k])
            .max_by_key(|&k| (alloc[k] - floor[k], alloc[k], std::cmp::Reverse(k)))
            .expect("floors sum to at most n");
        alloc[k] -= 1;
    }
    while alloc.iter().sum::<usize>() < n {
        // Grow the class furthest under its exact quota n*size/total.
        let k = (0..c)
            .filter(|&k| alloc[k] < sizes[k])
            .max_by_key(|&k| {
                let deficit = n as i128 * sizes[k] as i128 - alloc[k] as i128 * total as i128;
                (deficit, std::cmp::Reverse(k))
            })
            .expect("strata sizes sum to at least n");
        alloc[k] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for (k, rows) in by_class.iter().enumerate() {
        if alloc[k] == rows.len() {
            picked.extend_from_slice(rows);
        } else {
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, rows.len(), alloc[k])
                .iter()
                .map(|i| rows[i])
                .collect();
            chosen.sort_unstable();
            picked.extend(chosen);
        }
    }
    Ok(picked)
}

/// See [`stratified_indices`].
pub fn stratified_sample(ds: &Dataset, n: usize, k_min: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&stratified_indices(ds, n, k_min, seed)?))
}

/// Class-stratified train/val/test split. Fractions must be non-negative and
/// sum to 1 within 1e-9; per-class counts follow largest remainder with ties
/// resolved toward the earlier part.
pub fn split(
    ds: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(fractions));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for rows in ds.strata() {
        let mut rows = rows;
        use rand::seq::SliceRandom;
        rows.shuffle(&mut rng);

        let sz = rows.len();
        let mut cnt = [0usize; 3];
        let mut frac = [0f64; 3];
        for j in 0..3 {
            let q = fractions[j] * sz as f64;
            cnt[j] = q.floor() as usize;
            frac[j] = q - q.floor();
        }
        let mut left = sz - cnt.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| frac[b].partial_cmp(&frac[a]).unwrap().then(a.cmp(&b)));
        for &j in &order {
            if left == 0 {
                break;
            }
            cnt[j] += 1;
            left -= 1;
        }

        let mut it = rows.into_iter();
        for j in 0..3 {
            parts[j].extend(it.by_ref().take(cnt[j]));
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok((ds.select(&parts[0]), ds.select(&parts[1]), ds.select(&parts[2])))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Distance of each class center from the origin along axis `k % dim`.
    pub separation: f64,
    pub seed: u64,
}

/// Gaussian blob generator for controlled experiments: class k is an
/// isotropic unit-variance Gaussian centered at `separation * e_(k % dim)`.
/// Rows are class-major and deterministic in the seed.
pub fn synth_generate(cfg: &SynthConfig) -> Dataset {
    assert!(cfg.dim >= 1 && cfg.n_classes >= 2 && cfg.n_per_class >= 1);
    assert!(cfg.separation >= 0.0);
    let n = cfg.n_per_class * cfg.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut features = Array2::zeros((n, cfg.dim));
    let mut labels = Array2::zeros((n, cfg.n_classes));
    let mut i = 0;
    for k in 0..cfg.n_classes {
        let axis = k % cfg.dim;
        for _ in 0..cfg.n_per_class {
            for j in 0..cfg.dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features[[i, j]] = noise + if j == axis { cfg.separation } else { 0.0 };
            }
            labels[[i, k]] = 1.0;
            i += 1;
        }
    }
    let schema = DatasetSchema {
        feature_columns: (0..cfg.dim).map(|j| format!("f{j}")).collect(),
        label_column: "label".into(),
        label_mode: LabelMode::Multiclass,
        class_names: (0..cfg.n_classes).map(|k| format!("class_{k}")).collect(),
    };
    Dataset { features, labels, schema }
}
