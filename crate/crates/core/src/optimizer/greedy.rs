use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AllocationMatrix, ClusterSpec};

use super::neighborhood::neighborhood;
use super::Scorer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub max_iter: usize,
    pub max_neighs: usize,
    pub rng_seed: u64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            max_iter: 10,
            max_neighs: 100,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LocalOptimum,
    IterCap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub neighborhood_size: usize,
    pub neighbors_evaluated: usize,
    /// `None` when the neighborhood was empty.
    pub best_score: Option<f64>,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizationTrace {
    pub iterations: Vec<IterationRecord>,
    pub start_score: f64,
    pub final_score: f64,
    pub stop_reason: StopReason,
    pub bench_calls: usize,
    pub effective_max_iter: usize,
    pub seed: u64,
}

impl OptimizationTrace {
    /// Scores of accepted moves, in order.
    pub fn accepted_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.iterations
            .iter()
            .filter(|r| r.accepted)
            .filter_map(|r| r.best_score)
    }
}

/// With many more devices than models, allow one step per spare device.
pub fn effective_max_iter(devices: usize, models: usize, max_iter: usize) -> usize {
    let spare = devices.saturating_sub(models);
    spare.max(max_iter)
}

/// Hill-climbs from `start` over single-cell neighbors.
///
/// Each iteration scores at most `max_neighs` neighbors drawn uniformly
/// without replacement and moves to the best one if it strictly beats the
/// current score; otherwise the search stops. The result never scores below
/// `start`.
pub fn bounded_greedy<S: Scorer + ?Sized>(
    cluster: &ClusterSpec,
    start: &AllocationMatrix,
    bench: &S,
    config: &GreedyConfig,
) -> (AllocationMatrix, OptimizationTrace) {
    let cap = effective_max_iter(start.num_devices(), start.num_models(), config.max_iter.max(1));
    let max_neighs = config.max_neighs.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let mut current = start.clone();
    let mut current_score = bench.score(cluster, &current);
    let start_score = current_score;
    let mut bench_calls = 1;
    let mut iterations = Vec::new();
    let mut accepted_count = 0;
    let mut stop_reason = StopReason::IterCap;

    while accepted_count < cap {
        let mut neighs = neighborhood(&current, cluster);
        let neighborhood_size = neighs.len();
        if neighs.len() > max_neighs {
            let mut picked = index::sample(&mut rng, neighs.len(), max_neighs).into_vec();
            picked.sort_unstable();
            neighs = picked.into_iter().map(|i| neighs[i].clone()).collect();
        }

        // first candidate wins ties, so concurrency-free reduction is deterministic
        let mut best: Option<(usize, f64)> = None;
        for (i, n) in neighs.iter().enumerate() {
            let s = bench.score(cluster, n);
            bench_calls += 1;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }

        let improved = matches!(best, Some((_, s)) if s > current_score);
        iterations.push(IterationRecord {
            iteration: iterations.len(),
            neighborhood_size,
            neighbors_evaluated: neighs.len(),
            best_score: best.map(|(_, s)| s),
            accepted: improved,
        });
        match best {
            Some((i, s)) if improved => {
                current = neighs.swap_remove(i);
                current_score = s;
                accepted_count += 1;
            }
            _ => {
                stop_reason = StopReason::LocalOptimum;
                break;
            }
        }
    }

    let trace = OptimizationTrace {
        iterations,
        start_score,
        final_score: current_score,
        stop_reason,
        bench_calls,
        effective_max_iter: cap,
        seed: config.rng_seed,
    };
    (current, trace)
}
