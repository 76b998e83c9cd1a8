//! Search for a fast allocation matrix.
//!
//! The pipeline is worst-fit-decreasing placement ([`worst_fit_decreasing`])
//! to get every model into memory, then a bounded greedy walk over
//! single-cell neighbors ([`bounded_greedy`]) scored by a [`Scorer`].
//! [`enumerate_all_matrices`] and the counting helpers size the search space
//! and serve as brute-force oracles on tiny instances; [`bbs_baseline`] is the
//! one-model-per-GPU batch scan used for comparison.

mod bbs;
mod combinatorics;
mod greedy;
mod neighborhood;
mod wfd;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use bbs::{bbs_baseline, BbsChoice, BbsOutcome};
pub use combinatorics::{
    count_total_matrices, count_total_neighs, enumerate_all_matrices, CombinatoricsReport, MatrixEnumerator,
};
pub use greedy::{
    bounded_greedy, effective_max_iter, GreedyConfig, IterationRecord, OptimizationTrace, StopReason,
};
pub use neighborhood::{forbidden_moves, neighborhood};
pub use wfd::worst_fit_decreasing;

use crate::cost::predict_ensemble_throughput;
use crate::model::{AllocationMatrix, ClusterSpec};

/// Scores an allocation matrix in samples per second; 0 means infeasible.
pub trait Scorer {
    fn score(&self, cluster: &ClusterSpec, matrix: &AllocationMatrix) -> f64;
}

impl<F> Scorer for F
where
    F: Fn(&ClusterSpec, &AllocationMatrix) -> f64,
{
    fn score(&self, cluster: &ClusterSpec, matrix: &AllocationMatrix) -> f64 {
        self(cluster, matrix)
    }
}

/// Closed-form bench backed by the cost model.
#[derive(Clone, Copy, Debug, Default)]
pub struct AnalyticBench;

impl Scorer for AnalyticBench {
    fn score(&self, cluster: &ClusterSpec, matrix: &AllocationMatrix) -> f64 {
        predict_ensemble_throughput(matrix, cluster)
    }
}

/// Wraps a scorer and counts invocations.
#[derive(Debug, Default)]
pub struct CountingScorer<S> {
    inner: S,
    calls: AtomicUsize,
}

impl<S> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Scorer> Scorer for CountingScorer<S> {
    fn score(&self, cluster: &ClusterSpec, matrix: &AllocationMatrix) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(cluster, matrix)
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct Optimized {
    /// Worst-fit-decreasing placement the search started from.
    pub initial: AllocationMatrix,
    pub best: AllocationMatrix,
    pub trace: OptimizationTrace,
}

/// Worst-fit-decreasing placement followed by bounded greedy search.
pub fn optimize<S: Scorer + ?Sized>(
    cluster: &ClusterSpec,
    default_batch: u32,
    config: &GreedyConfig,
    bench: &S,
) -> crate::Result<Optimized> {
    let initial = worst_fit_decreasing(cluster, default_batch)?;
    let (best, trace) = bounded_greedy(cluster, &initial, bench, config);
    Ok(Optimized { initial, best, trace })
}
