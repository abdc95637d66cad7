//! Episode construction for episodic training.
//!
//! Every episode draws a support and a query set for each class. Scarce
//! classes are handled by tiling: the class pool is conceptually repeated
//! ceil((n_s + n_q) / |pool|) times and slots are drawn without replacement
//! from the tiled pool, so a row may repeat but no slot is reused and the
//! support/query split stays disjoint at slot level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub n_episodes: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub seed: u64,
}

impl EpisodePlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 || self.support_size == 0 || self.query_size == 0 {
            return Err(Error::InvalidConfig(
                "episode plan needs n_episodes, support_size and query_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Row indices per class; `support[k]` and `query[k]` have the plan's sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_classes(&self) -> usize {
        self.support.len()
    }

    /// Flattened support rows with their class assignment, class-major.
    pub fn support_flat(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.support)
    }

    pub fn query_flat(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.query)
    }
}

fn flatten(groups: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        rows.extend_from_slice(g);
        classes.extend(std::iter::repeat(k).take(g.len()));
    }
    (rows, classes)
}

/// Number of times a pool of `pool_size` rows must be tiled to cover
/// `n_total` slots.
pub fn tile_count(pool_size: usize, n_total: usize) -> usize {
    assert!(pool_size > 0);
    n_total.div_ceil(pool_size)
}

/// Draws `n_s` support and `n_q` query rows for one class. Slots are sampled
/// without replacement from the tiled pool; when the pool is large enough the
/// tile count is 1 and rows are simply distinct.
pub fn sample_class(
    pool: &[usize],
    n_s: usize,
    n_q: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let total = n_s + n_q;
    let slots = pool.len() * tile_count(pool.len(), total);
    let drawn: Vec<usize> = rand::seq::index::sample(rng, slots, total).into_iter().collect();
    let rows: Vec<usize> = drawn.iter().map(|&s| pool[s % pool.len()]).collect();
    (rows[..n_s].to_vec(), rows[n_s..].to_vec())
}

/// Materializes the full episode list up front. Sampling every episode before
/// training starts keeps the schedule independent of anything the training
/// loop does with the RNG.
pub fn create_episodes(ds: &Dataset, plan: &EpisodePlan) -> Result<Vec<Episode>> {
    plan.validate()?;
    let pools = ds.class_pools();
    for (k, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::MissingClass(k));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut episodes = Vec::with_capacity(plan.n_episodes);
    for _ in 0..plan.n_episodes {
        let mut support = Vec::with_capacity(pools.len());
        let mut query = Vec::with_capacity(pools.len());
        for pool in &pools {
            let (s, q) = sample_class(pool, plan.support_size, plan.query_size, &mut rng);
            support.push(s);
            query.push(q);
        }
        episodes.push(Episode { support, query });
    }
    Ok(episodes)
}
