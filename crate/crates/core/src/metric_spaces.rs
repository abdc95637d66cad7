//! Pairwise query-prototype distances in four spaces, per-episode score
//! normalization, and convex fusion.
//!
//! Each metric produces a Q x C matrix over the episode. Matrices are
//! z-scored with statistics of the whole matrix (mean and population std),
//! clipped to +-gamma, and combined as a weighted sum with weights on the
//! probability simplex. Normalization statistics are treated as constants by
//! the backward pass (stop-gradient), and clipped entries get zero gradient.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_GAMMA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricId {
    Euclidean,
    Cosine,
    Chebyshev,
    Wasserstein,
}

impl MetricId {
    pub const ALL: [MetricId; 4] =
        [MetricId::Euclidean, MetricId::Cosine, MetricId::Chebyshev, MetricId::Wasserstein];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricId::Euclidean => "euclidean",
            MetricId::Cosine => "cosine",
            MetricId::Chebyshev => "chebyshev",
            MetricId::Wasserstein => "wasserstein",
        }
    }
}

/// Fusion weights. Must lie on the probability simplex: non-negative,
/// summing to 1 within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub euclidean: f64,
    pub cosine: f64,
    pub chebyshev: f64,
    pub wasserstein: f64,
}

impl MetricWeights {
    pub const SIMPLEX_TOL: f64 = 1e-9;

    pub fn new(euclidean: f64, cosine: f64, chebyshev: f64, wasserstein: f64) -> Result<Self> {
        let w = MetricWeights { euclidean, cosine, chebyshev, wasserstein };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::WeightViolation(format!("negative or non-finite weight in {a:?}")));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > Self::SIMPLEX_TOL {
            return Err(Error::WeightViolation(format!("weights {a:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.euclidean, self.cosine, self.chebyshev, self.wasserstein]
    }

    pub fn get(&self, m: MetricId) -> f64 {
        self.as_array()[m.index()]
    }

    /// All mass on one metric.
    pub fn vertex(m: MetricId) -> Self {
        let mut a = [0.0; 4];
        a[m.index()] = 1.0;
        MetricWeights { euclidean: a[0], cosine: a[1], chebyshev: a[2], wasserstein: a[3] }
    }

    /// Equal mass on the given metrics, zero elsewhere.
    pub fn uniform(metrics: &[MetricId]) -> Self {
        assert!(!metrics.is_empty());
        let share = 1.0 / metrics.len() as f64;
        let mut a = [0.0; 4];
        for m in metrics {
            a[m.index()] = share;
        }
        MetricWeights { euclidean: a[0], cosine: a[1], chebyshev: a[2], wasserstein: a[3] }
    }

    pub fn active(&self) -> Vec<MetricId> {
        MetricId::ALL.iter().copied().filter(|&m| self.get(m) > 0.0).collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormConfig {
    /// Floor for the normalization std and for cosine norm denominators.
    pub eps: f64,
    /// Symmetric clip bound on normalized scores.
    pub gamma: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { eps: DEFAULT_EPS, gamma: DEFAULT_GAMMA }
    }
}

/// Mean and population std of one raw distance matrix. `sigma` is stored
/// unfloored; consumers apply `max(sigma, eps)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Everything computed for one episode's distance block.
pub struct DistanceTensor {
    pub raw: [Array2<f64>; 4],
    pub normalized: [Array2<f64>; 4],
    pub stats: [NormStats; 4],
    pub fused: Array2<f64>,
    pub norm_config: NormConfig,
    /// Embeddings whose norm fell below eps during cosine scoring.
    pub degenerate_vectors: usize,
}

fn check_widths(z: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<()> {
    if z.ncols() != p.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("prototypes with {} columns", z.ncols()),
            got: format!("{} columns", p.ncols()),
        });
    }
    Ok(())
}

/// d(z, c) = ||z - c||_2.
pub fn euclidean(z: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_widths(z, p)?;
    let mut out = Array2::zeros((z.nrows(), p.nrows()));
    for q in 0..z.nrows() {
        for k in 0..p.nrows() {
            let d2: f64 = z
                .row(q)
                .iter()
                .zip(p.row(k).iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            out[[q, k]] = d2.sqrt();
        }
    }
    Ok(out)
}

/// d(z, c) = 1 - <z, c> / (max(||z||, eps) * max(||c||, eps)), clamped to
/// [0, 2]. Returns the matrix and the count of pairs that hit the norm floor.
pub fn cosine(z: ArrayView2<f64>, p: ArrayView2<f64>, eps: f64) -> Result<(Array2<f64>, usize)> {
    check_widths(z, p)?;
    let zn: Vec<f64> = (0..z.nrows()).map(|q| norm2(z.row(q))).collect();
    let pn: Vec<f64> = (0..p.nrows()).map(|k| norm2(p.row(k))).collect();
    let mut degenerate = 0usize;
    let mut out = Array2::zeros((z.nrows(), p.nrows()));
    for q in 0..z.nrows() {
        for k in 0..p.nrows() {
            if zn[q] < eps || pn[k] < eps {
                degenerate += 1;
            }
            let dot: f64 = z.row(q).iter().zip(p.row(k).iter()).map(|(&a, &b)| a * b).sum();
            let val = 1.0 - dot / (zn[q].max(eps) * pn[k].max(eps));
            out[[q, k]] = val.clamp(0.0, 2.0);
        }
    }
    Ok((out, degenerate))
}

/// d(z, c) = max_i |z_i - c_i|.
pub fn chebyshev(z: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_widths(z, p)?;
    let mut out = Array2::zeros((z.nrows(), p.nrows()));
    for q in 0..z.nrows() {
        for k in 0..p.nrows() {
            out[[q, k]] = z
                .row(q)
                .iter()
                .zip(p.row(k).iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0, f64::max);
        }
    }
    Ok(out)
}

/// 1-D Wasserstein distance between the embedding coordinates of z and c
/// viewed as equal-size empirical distributions. For equal sizes this is the
/// mean absolute difference of the sorted coordinate vectors.
pub fn wasserstein(z: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_widths(z, p)?;
    let m = z.ncols();
    let zs = sorted_rows(z);
    let ps = sorted_rows(p);
    let mut out = Array2::zeros((z.nrows(), p.nrows()));
    for q in 0..z.nrows() {
        for k in 0..p.nrows() {
            let sum: f64 = zs
                .row(q)
                .iter()
                .zip(ps.row(k).iter())
                .map(|(&a, &b)| (a - b).abs())
                .sum();
            out[[q, k]] = sum / m as f64;
        }
    }
    Ok(out)
}

fn norm2(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

fn sorted_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mut vals = row.to_vec();
        // total_cmp keeps the sort deterministic even for non-finite values,
        // which then surface as a diverged loss instead of a panic here.
        vals.sort_by(f64::total_cmp);
        for (dst, v) in row.iter_mut().zip(vals) {
            *dst = v;
        }
    }
    out
}

/// Stable argsort of one row, ascending.
fn argsort(v: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

fn sign3(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Z-scores a raw matrix with its own mean and population std (floored at
/// eps), clipping to +-gamma.
pub fn normalize(raw: &Array2<f64>, cfg: &NormConfig) -> (Array2<f64>, NormStats) {
    let n = raw.len();
    if n == 0 {
        return (raw.clone(), NormStats { mu: 0.0, sigma: 0.0 });
    }
    let mu = raw.sum() / n as f64;
    let var = raw.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    let s_eff = sigma.max(cfg.eps);
    let out = raw.mapv(|v| ((v - mu) / s_eff).clamp(-cfg.gamma, cfg.gamma));
    (out, NormStats { mu, sigma })
}

/// Weighted sum of normalized matrices. Zero-weight metrics are skipped
/// outright, so a vertex weight reproduces that metric's normalized matrix
/// bit for bit.
pub fn fuse(normalized: &[Array2<f64>; 4], w: &MetricWeights) -> Result<Array2<f64>> {
    w.validate()?;
    let dim = normalized[0].dim();
    for n in normalized.iter() {
        if n.dim() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim:?}"),
                got: format!("{:?}", n.dim()),
            });
        }
    }
    let mut acc: Option<Array2<f64>> = None;
    for m in MetricId::ALL {
        let wm = w.get(m);
        if wm == 0.0 {
            continue;
        }
        let term = normalized[m.index()].mapv(|v| wm * v);
        acc = Some(match acc {
            None => term,
            Some(a) => a + term,
        });
    }
    Ok(acc.expect("simplex weights cannot be all zero"))
}

/// Full per-episode distance block: raw distances in all four spaces,
/// normalized versions, and the fused matrix.
pub fn compute(
    z: ArrayView2<f64>,
    p: ArrayView2<f64>,
    w: &MetricWeights,
    cfg: &NormConfig,
) -> Result<DistanceTensor> {
    w.validate()?;
    let (cos, degenerate_vectors) = cosine(z, p, cfg.eps)?;
    let raw = [euclidean(z, p)?, cos, chebyshev(z, p)?, wasserstein(z, p)?];
    let mut normalized = Vec::with_capacity(4);
    let mut stats = Vec::with_capacity(4);
    for r in &raw {
        let (n, s) = normalize(r, cfg);
        normalized.push(n);
        stats.push(s);
    }
    let normalized: [Array2<f64>; 4] = normalized.try_into().expect("four metrics");
    let stats: [NormStats; 4] = stats.try_into().expect("four metrics");
    let fused = fuse(&normalized, w)?;
    Ok(DistanceTensor { raw, normalized, stats, fused, norm_config: *cfg, degenerate_vectors })
}

/// Fused matrix recomputed with externally supplied normalization
/// statistics. This is the function the analytic gradient differentiates:
/// mu and sigma are constants here, matching the stop-gradient treatment.
pub fn fuse_with_frozen_stats(
    z: ArrayView2<f64>,
    p: ArrayView2<f64>,
    w: &MetricWeights,
    stats: &[NormStats; 4],
    cfg: &NormConfig,
) -> Result<Array2<f64>> {
    w.validate()?;
    let (cos, _) = cosine(z, p, cfg.eps)?;
    let raw = [euclidean(z, p)?, cos, chebyshev(z, p)?, wasserstein(z, p)?];
    let mut normalized = Vec::with_capacity(4);
    for (r, s) in raw.iter().zip(stats.iter()) {
        let s_eff = s.sigma.max(cfg.eps);
        normalized.push(r.mapv(|v| ((v - s.mu) / s_eff).clamp(-cfg.gamma, cfg.gamma)));
    }
    let normalized: [Array2<f64>; 4] = normalized.try_into().expect("four metrics");
    fuse(&normalized, w)
}

/// Backpropagates an upstream gradient on the fused matrix to the query
/// embeddings and prototypes. Normalization statistics are constants;
/// entries clipped in the forward pass contribute nothing. Kinked points
/// (zero Euclidean distance, exact Chebyshev ties, equal sorted coordinates)
/// use the conventions documented inline.
pub fn distances_backward(
    z: ArrayView2<f64>,
    p: ArrayView2<f64>,
    w: &MetricWeights,
    tensor: &DistanceTensor,
    d_fused: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_widths(z, p)?;
    let (nq, nc) = tensor.fused.dim();
    if d_fused.dim() != (nq, nc) {
        return Err(Error::ShapeMismatch {
            expected: format!("{nq} x {nc}"),
            got: format!("{} x {}", d_fused.nrows(), d_fused.ncols()),
        });
    }
    let m = z.ncols();
    let m_f = m as f64;
    let cfg = &tensor.norm_config;
    let mut dz = Array2::zeros((nq, m));
    let mut dp = Array2::zeros((p.nrows(), m));

    // Cosine needs row norms; Wasserstein needs the forward sort order.
    let zn: Vec<f64> = (0..nq).map(|q| norm2(z.row(q))).collect();
    let pn: Vec<f64> = (0..p.nrows()).map(|k| norm2(p.row(k))).collect();
    let z_order: Vec<Vec<usize>> = (0..nq).map(|q| argsort(z.row(q))).collect();
    let p_order: Vec<Vec<usize>> = (0..p.nrows()).map(|k| argsort(p.row(k))).collect();

    for metric in MetricId::ALL {
        let wm = w.get(metric);
        if wm == 0.0 {
            continue;
        }
        let raw = &tensor.raw[metric.index()];
        let st = &tensor.stats[metric.index()];
        let s_eff = st.sigma.max(cfg.eps);
        for q in 0..nq {
            for k in 0..nc {
                let up = d_fused[[q, k]];
                if up == 0.0 {
                    continue;
                }
                if ((raw[[q, k]] - st.mu) / s_eff).abs() > cfg.gamma {
                    continue; // clipped in the forward pass
                }
                let coeff = wm * up / s_eff;
                match metric {
                    MetricId::Euclidean => {
                        let dist = raw[[q, k]];
                        if dist > 0.0 {
                            for j in 0..m {
                                let g = coeff * (z[[q, j]] - p[[k, j]]) / dist;
                                dz[[q, j]] += g;
                                dp[[k, j]] -= g;
                            }
                        }
                    }
                    MetricId::Cosine => {
                        let fz = zn[q].max(cfg.eps);
                        let fc = pn[k].max(cfg.eps);
                        let dot: f64 =
                            z.row(q).iter().zip(p.row(k).iter()).map(|(&a, &b)| a * b).sum();
                        let unclamped = 1.0 - dot / (fz * fc);
                        if !(0.0..=2.0).contains(&unclamped) {
                            continue; // clamp was active, flat region
                        }
                        for j in 0..m {
                            let mut gz = -p[[k, j]] / (fz * fc);
                            if zn[q] > cfg.eps {
                                gz += dot * z[[q, j]] / (fz * fz * fz * fc);
                            }
                            let mut gp = -z[[q, j]] / (fz * fc);
                            if pn[k] > cfg.eps {
                                gp += dot * p[[k, j]] / (fc * fc * fc * fz);
                            }
                            dz[[q, j]] += coeff * gz;
                            dp[[k, j]] += coeff * gp;
                        }
                    }
                    MetricId::Chebyshev => {
                        // Lowest coordinate index among tied maxima.
                        let mut best = 0usize;
                        let mut best_abs = -1.0;
                        for j in 0..m {
                            let a = (z[[q, j]] - p[[k, j]]).abs();
                            if a > best_abs {
                                best_abs = a;
                                best = j;
                            }
                        }
                        let s = sign3(z[[q, best]] - p[[k, best]]);
                        dz[[q, best]] += coeff * s;
                        dp[[k, best]] -= coeff * s;
                    }
                    MetricId::Wasserstein => {
                        // Route through the forward sort permutations; ties
                        // in sorted values get sign 0.
                        for j in 0..m {
                            let zi = z_order[q][j];
                            let pi = p_order[k][j];
                            let s = sign3(z[[q, zi]] - p[[k, pi]]);
                            dz[[q, zi]] += coeff * s / m_f;
                            dp[[k, pi]] -= coeff * s / m_f;
                        }
                    }
                }
            }
        }
    }
    Ok((dz, dp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        let mut x = Array2::zeros((rows, cols));
        for v in x.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
        x
    }

    #[test]
    fn euclidean_three_four_five() {
        let z = array![[0.0, 0.0]];
        let p = array![[3.0, 4.0]];
        assert_eq!(euclidean(z.view(), p.view()).unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn identical_rows_have_zero_distance() {
        let z = array![[1.0, -2.0, 0.5]];
        for f in [euclidean, chebyshev, wasserstein] {
            assert_eq!(f(z.view(), z.view()).unwrap()[[0, 0]], 0.0);
        }
        let (c, _) = cosine(z.view(), z.view(), DEFAULT_EPS).unwrap();
        assert!(c[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn cosine_reference_angles() {
        let z = array![[1.0, 0.0]];
        let p = array![[0.0, 1.0], [2.0, 0.0], [-3.0, 0.0]];
        let (c, degenerate) = cosine(z.view(), p.view(), DEFAULT_EPS).unwrap();
        assert!((c[[0, 0]] - 1.0).abs() < 1e-12); // orthogonal
        assert!(c[[0, 1]].abs() < 1e-12); // collinear
        assert!((c[[0, 2]] - 2.0).abs() < 1e-12); // antipodal
        assert_eq!(degenerate, 0);
    }

    #[test]
    fn cosine_floors_zero_vectors() {
        let z = array![[0.0, 0.0]];
        let p = array![[1.0, 1.0]];
        let (c, degenerate) = cosine(z.view(), p.view(), DEFAULT_EPS).unwrap();
        // dot is 0 and the denominator is floored, so the score is exactly 1.
        assert_eq!(c[[0, 0]], 1.0);
        assert_eq!(degenerate, 1);
    }

    #[test]
    fn chebyshev_picks_largest_coordinate_gap() {
        let z = array![[1.0, 5.0, -1.0]];
        let p = array![[0.0, 2.0, -1.5]];
        assert_eq!(chebyshev(z.view(), p.view()).unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn wasserstein_sorted_mean_gap() {
        // sorted (1,3) vs (2,4): (1 + 1) / 2 = 1.
        let z = array![[3.0, 1.0]];
        let p = array![[2.0, 4.0]];
        assert_eq!(wasserstein(z.view(), p.view()).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn wasserstein_is_permutation_invariant_and_translates() {
        let z = array![[0.3, -1.2, 2.0, 0.7]];
        let z_perm = array![[2.0, 0.7, 0.3, -1.2]];
        let p = array![[1.0, 0.0, -0.5, 0.25]];
        let a = wasserstein(z.view(), p.view()).unwrap();
        let b = wasserstein(z_perm.view(), p.view()).unwrap();
        assert_eq!(a, b);
        // Shifting every coordinate by t moves the distribution by exactly t.
        let shifted = z.mapv(|v| v + 1.5);
        let d = wasserstein(shifted.view(), z.view()).unwrap();
        assert!((d[[0, 0]] - 1.5).abs() < 1e-12);
    }

    /// Monte Carlo oracle: W1 = E_u |F^-1_a(u) - F^-1_b(u)| with empirical
    /// quantile functions. Estimates the closed form independently.
    #[test]
    fn wasserstein_matches_quantile_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = 6;
        let z = random_matrix(&mut rng, 2, m, 3.0);
        let p = random_matrix(&mut rng, 2, m, 3.0);
        let exact = wasserstein(z.view(), p.view()).unwrap();
        for q in 0..2 {
            for k in 0..2 {
                let mut a = z.row(q).to_vec();
                let mut b = p.row(k).to_vec();
                a.sort_by(|x, y| x.partial_cmp(y).unwrap());
                b.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let n = 1_000_000;
                let mut acc = 0.0;
                for _ in 0..n {
                    let u: f64 = rng.random_range(0.0..1.0);
                    let j = ((u * m as f64) as usize).min(m - 1);
                    acc += (a[j] - b[j]).abs();
                }
                let mc = acc / n as f64;
                assert!(
                    (mc - exact[[q, k]]).abs() < 0.02,
                    "pair ({q},{k}): mc {mc} vs exact {}",
                    exact[[q, k]]
                );
            }
        }
    }

    #[test]
    fn metric_axioms_hold_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = random_matrix(&mut rng, 1, 8, 4.0);
            let b = random_matrix(&mut rng, 1, 8, 4.0);
            let c = random_matrix(&mut rng, 1, 8, 4.0);
            for f in [euclidean, chebyshev, wasserstein] {
                let ab = f(a.view(), b.view()).unwrap()[[0, 0]];
                let ba = f(b.view(), a.view()).unwrap()[[0, 0]];
                let ac = f(a.view(), c.view()).unwrap()[[0, 0]];
                let cb = f(c.view(), b.view()).unwrap()[[0, 0]];
                assert!(ab >= 0.0);
                assert_eq!(ab, ba);
                assert!(ab <= ac + cb + 1e-12, "triangle violated");
            }
            let (ab, _) = cosine(a.view(), b.view(), DEFAULT_EPS).unwrap();
            let (ba, _) = cosine(b.view(), a.view(), DEFAULT_EPS).unwrap();
            assert!((0.0..=2.0).contains(&ab[[0, 0]]));
            assert!((ab[[0, 0]] - ba[[0, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_dominance_chain() {
        // Chebyshev <= Euclidean <= sqrt(m) * Chebyshev, and the sorted-mean
        // transport cost never exceeds the Chebyshev gap.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = 16;
        for _ in 0..100 {
            let a = random_matrix(&mut rng, 1, m, 5.0);
            let b = random_matrix(&mut rng, 1, m, 5.0);
            let e = euclidean(a.view(), b.view()).unwrap()[[0, 0]];
            let ch = chebyshev(a.view(), b.view()).unwrap()[[0, 0]];
            let wa = wasserstein(a.view(), b.view()).unwrap()[[0, 0]];
            assert!(ch <= e + 1e-12);
            assert!(e <= (m as f64).sqrt() * ch + 1e-12);
            assert!(wa <= ch + 1e-12);
        }
    }

    #[test]
    fn normalize_exact_three_entry_case() {
        let raw = array![[1.0, 2.0, 3.0]];
        let (n, st) = normalize(&raw, &NormConfig::default());
        assert_eq!(st.mu, 2.0);
        assert!((st.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let expected = (3.0f64 / 2.0).sqrt();
        assert!((n[[0, 0]] + expected).abs() < 1e-12);
        assert_eq!(n[[0, 1]], 0.0);
        assert!((n[[0, 2]] - expected).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_matrix_is_all_zero() {
        let raw = Array2::from_elem((3, 4), 2.5);
        let (n, st) = normalize(&raw, &NormConfig::default());
        assert_eq!(st.sigma, 0.0);
        assert!(n.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_clips_outliers_to_gamma() {
        let mut raw = Array2::zeros((1, 100));
        raw[[0, 99]] = 1e6;
        let (n, _) = normalize(&raw, &NormConfig::default());
        assert_eq!(n[[0, 99]], 5.0);
        assert!(n.iter().all(|&v| v.abs() <= 5.0));
    }

    #[test]
    fn vertex_fusion_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_matrix(&mut rng, 6, 9, 2.0);
        let p = random_matrix(&mut rng, 3, 9, 2.0);
        for metric in MetricId::ALL {
            let t = compute(z.view(), p.view(), &MetricWeights::vertex(metric), &NormConfig::default())
                .unwrap();
            let a = &t.fused;
            let b = &t.normalized[metric.index()];
            assert_eq!(a.dim(), b.dim());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn fusing_identical_matrices_returns_them() {
        let m = array![[0.5, -1.0], [2.0, 0.0]];
        let same = [m.clone(), m.clone(), m.clone(), m.clone()];
        let w = MetricWeights::uniform(&MetricId::ALL);
        let fused = fuse(&same, &w).unwrap();
        for (a, b) in fused.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_weights_are_rejected() {
        assert!(matches!(
            MetricWeights::new(0.5, 0.2, 0.1, 0.1),
            Err(Error::WeightViolation(_))
        ));
        assert!(matches!(
            MetricWeights::new(1.5, -0.5, 0.0, 0.0),
            Err(Error::WeightViolation(_))
        ));
        assert!(MetricWeights::new(0.25, 0.25, 0.25, 0.25).is_ok());
        assert!(MetricWeights::uniform(&[MetricId::Euclidean, MetricId::Cosine, MetricId::Chebyshev])
            .validate()
            .is_ok());
    }

    #[test]
    fn euclidean_vertex_backward_closed_form() {
        // Single pair, no clipping: d/dz ||z - p|| = (z - p) / ||z - p||,
        // scaled by upstream / sigma_eff.
        let z = array![[3.0, 4.0]];
        let p = array![[0.0, 0.0]];
        let w = MetricWeights::vertex(MetricId::Euclidean);
        let cfg = NormConfig::default();
        let t = compute(z.view(), p.view(), &w, &cfg).unwrap();
        let up = array![[2.0]];
        let (dz, dp) = distances_backward(z.view(), p.view(), &w, &t, up.view()).unwrap();
        let s_eff = t.stats[0].sigma.max(cfg.eps);
        let expect = [2.0 * 3.0 / 5.0 / s_eff, 2.0 * 4.0 / 5.0 / s_eff];
        assert!((dz[[0, 0]] - expect[0]).abs() < 1e-12);
        assert!((dz[[0, 1]] - expect[1]).abs() < 1e-12);
        assert!((dp[[0, 0]] + expect[0]).abs() < 1e-12);
        assert!((dp[[0, 1]] + expect[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_matrix(&mut rng, 4, 6, 2.0);
        let p = random_matrix(&mut rng, 2, 6, 2.0);
        let w = MetricWeights::uniform(&MetricId::ALL);
        let t = compute(z.view(), p.view(), &w, &NormConfig::default()).unwrap();
        let up = Array2::zeros((4, 2));
        let (dz, dp) = distances_backward(z.view(), p.view(), &w, &t, up.view()).unwrap();
        assert!(dz.iter().all(|&v| v == 0.0));
        assert!(dp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clipped_entries_receive_zero_gradient() {
        // One pair is pushed far away so its z-score exceeds gamma; the
        // upstream gradient targets only that entry.
        let z = array![[0.0, 0.0], [0.1, 0.0], [0.2, 0.1], [1000.0, 1000.0]];
        let p = array![[0.0, 0.1], [0.05, 0.0]];
        let w = MetricWeights::vertex(MetricId::Euclidean);
        let cfg = NormConfig { eps: DEFAULT_EPS, gamma: 1.0 };
        let t = compute(z.view(), p.view(), &w, &cfg).unwrap();
        let zscore = (t.raw[0][[3, 0]] - t.stats[0].mu) / t.stats[0].sigma.max(cfg.eps);
        assert!(zscore > cfg.gamma);
        let mut up = Array2::zeros((4, 2));
        up[[3, 0]] = 1.0;
        let (dz, dp) = distances_backward(z.view(), p.view(), &w, &t, up.view()).unwrap();
        assert!(dz.iter().all(|&v| v == 0.0));
        assert!(dp.iter().all(|&v| v == 0.0));
    }

    /// Central differences on L = sum(G * fused) with frozen normalization
    /// stats, perturbing every entry of Z and P.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = NormConfig::default();
        let weight_sets = [
            MetricWeights::uniform(&MetricId::ALL),
            MetricWeights::new(0.4, 0.1, 0.3, 0.2).unwrap(),
            MetricWeights::vertex(MetricId::Cosine),
            MetricWeights::vertex(MetricId::Wasserstein),
            MetricWeights::vertex(MetricId::Chebyshev),
        ];
        for (wi, w) in weight_sets.iter().enumerate() {
            let z = random_matrix(&mut rng, 5, 7, 2.0);
            let p = random_matrix(&mut rng, 3, 7, 2.0);
            let g = random_matrix(&mut rng, 5, 3, 1.0);
            let t = compute(z.view(), p.view(), w, &cfg).unwrap();
            let (dz, dp) = distances_backward(z.view(), p.view(), w, &t, g.view()).unwrap();

            let h = 1e-6;
            let loss = |z: &Array2<f64>, p: &Array2<f64>| -> f64 {
                let fused =
                    fuse_with_frozen_stats(z.view(), p.view(), w, &t.stats, &cfg).unwrap();
                (&fused * &g).sum()
            };
            let check = |analytic: f64, num: f64, which: &str| {
                let denom = (analytic.abs() + num.abs()).max(1e-6);
                assert!(
                    (analytic - num).abs() / denom < 1e-5,
                    "{which} (weights {wi}): analytic {analytic} vs numeric {num}"
                );
            };
            for q in 0..5 {
                for j in 0..7 {
                    let mut zp = z.clone();
                    zp[[q, j]] += h;
                    let mut zm = z.clone();
                    zm[[q, j]] -= h;
                    check(dz[[q, j]], (loss(&zp, &p) - loss(&zm, &p)) / (2.0 * h), "dZ");
                }
            }
            for k in 0..3 {
                for j in 0..7 {
                    let mut pp = p.clone();
                    pp[[k, j]] += h;
                    let mut pm = p.clone();
                    pm[[k, j]] -= h;
                    check(dp[[k, j]], (loss(&z, &pp) - loss(&z, &pm)) / (2.0 * h), "dP");
                }
            }
        }
    }

    #[test]
    fn vertex_euclidean_fused_preserves_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let w = MetricWeights::vertex(MetricId::Euclidean);
        for _ in 0..100 {
            let z = random_matrix(&mut rng, 8, 12, 3.0);
            let p = random_matrix(&mut rng, 4, 12, 3.0);
            let t = compute(z.view(), p.view(), &w, &NormConfig::default()).unwrap();
            for q in 0..8 {
                let argmin = |row: ndarray::ArrayView1<f64>| {
                    row.iter()
                        .enumerate()
                        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                };
                assert_eq!(argmin(t.raw[0].row(q)), argmin(t.fused.row(q)));
            }
        }
    }
}
