//! The inference system: given samples `X` and an allocation matrix, produce
//! combined predictions `Y` (deploy mode) or a throughput score `S`
//! (benchmark mode).

mod accumulator;
mod backend;
mod message;
mod pool;
mod store;

use std::sync::Arc;

use serde::Serialize;

pub use accumulator::{accumulate, Accumulator, CombinationRule, Combined};
pub use backend::{synthetic_outputs, Backend, FakeZeroBackend, OutOfMemory, Predictor, SyntheticBackend, WorkerContext};
pub use message::{Job, PredictionMessage, WorkItem, OOM_TAG, READY_TAG, SHUTDOWN_TAG};
pub use pool::{PoolOptions, QueueProbe, RunOutput, ShutdownReport, WorkerInfo, WorkerPool};
pub use store::{Predictions, SampleStore};

use crate::error::{Error, Result};
use crate::memory::fit_mem;
use crate::model::{validate_matrix, AllocationMatrix, ClusterSpec};
use crate::optimizer::Scorer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Mode {
    Deploy,
    Benchmark,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    /// Median samples per second over the runs.
    pub throughput: f64,
    /// Seconds for `nb_samples` at the median throughput.
    pub elapsed: f64,
    pub nb_samples: usize,
    pub runs: Vec<f64>,
    /// Relative standard deviation of `runs` (0 for a single run).
    pub rsd: f64,
}

impl BenchResult {
    pub fn from_runs(nb_samples: usize, runs: Vec<f64>) -> Self {
        let throughput = median(&runs);
        Self {
            throughput,
            elapsed: if throughput > 0.0 { nb_samples as f64 / throughput } else { 0.0 },
            nb_samples,
            rsd: relative_std_dev(&runs),
            runs,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Sample standard deviation over the mean.
pub fn relative_std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Deploy mode only.
    pub combined: Option<Combined>,
    /// Benchmark mode only.
    pub bench: Option<BenchResult>,
}

/// Builds a pool for `matrix`, pushes `samples` through it once and tears it
/// down. Benchmark timing starts after every worker is ready.
pub fn run_inference(
    samples: Arc<SampleStore>,
    matrix: &AllocationMatrix,
    cluster: &ClusterSpec,
    backend: Arc<dyn Backend>,
    rule: &CombinationRule,
    mode: Mode,
) -> Result<InferenceOutput> {
    if mode == Mode::Benchmark && samples.is_empty() {
        return Err(Error::Precondition("benchmark mode needs at least one sample".into()));
    }
    let mut pool = WorkerPool::build(matrix, Arc::new(cluster.clone()), backend, PoolOptions::default())?;
    let nb = samples.len();
    let run = pool.run(samples, rule);
    pool.shutdown();
    let run = run?;
    Ok(match mode {
        Mode::Deploy => InferenceOutput {
            combined: Some(run.combined),
            bench: None,
        },
        Mode::Benchmark => InferenceOutput {
            combined: None,
            bench: Some(BenchResult::from_runs(nb, vec![nb as f64 / run.elapsed.as_secs_f64()])),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchOutcome {
    /// Median throughput, or 0 when the matrix cannot run.
    pub score: f64,
    pub result: Option<BenchResult>,
    /// Why the score is 0, if it is.
    pub infeasible: Option<String>,
}

impl BenchOutcome {
    fn infeasible(reason: impl Into<String>) -> Self {
        Self {
            score: 0.0,
            result: None,
            infeasible: Some(reason.into()),
        }
    }
}

/// Scores `matrix` by running the calibration samples through a fresh pool
/// `repeats` times. Matrices that are invalid, do not fit in memory or fail
/// to start score 0.
pub fn bench(
    matrix: &AllocationMatrix,
    calib: Arc<SampleStore>,
    cluster: &ClusterSpec,
    backend: Arc<dyn Backend>,
    repeats: usize,
) -> Result<BenchOutcome> {
    if repeats == 0 {
        return Err(Error::Precondition("repeats must be >= 1".into()));
    }
    if calib.is_empty() {
        return Err(Error::Precondition("calibration set is empty".into()));
    }
    match validate_matrix(matrix, cluster) {
        Ok(v) if v.is_ok() => {}
        Ok(v) => return Ok(BenchOutcome::infeasible(format!("{:?}", v.violations))),
        Err(e) => return Ok(BenchOutcome::infeasible(e.to_string())),
    }
    if !fit_mem(matrix, cluster).fits {
        return Ok(BenchOutcome::infeasible("matrix does not fit in device memory"));
    }
    let mut pool = match WorkerPool::build(matrix, Arc::new(cluster.clone()), backend, PoolOptions::default()) {
        Ok(pool) => pool,
        Err(e) => return Ok(BenchOutcome::infeasible(e.to_string())),
    };
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        match pool.run(Arc::clone(&calib), &CombinationRule::Averaging) {
            Ok(out) => runs.push(calib.len() as f64 / out.elapsed.as_secs_f64()),
            Err(e) => return Ok(BenchOutcome::infeasible(e.to_string())),
        }
    }
    pool.shutdown();
    let result = BenchResult::from_runs(calib.len(), runs);
    Ok(BenchOutcome {
        score: result.throughput,
        result: Some(result),
        infeasible: None,
    })
}

/// [`Scorer`] that benchmarks matrices on the real pipeline.
#[derive(Clone, Debug)]
pub struct RuntimeBench {
    pub backend: Arc<dyn Backend>,
    pub calib_samples: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl RuntimeBench {
    pub fn new(backend: Arc<dyn Backend>, calib_samples: usize, repeats: usize) -> Self {
        Self {
            backend,
            calib_samples,
            repeats,
            seed: 0,
        }
    }

    pub fn calibration(&self, cluster: &ClusterSpec) -> Arc<SampleStore> {
        Arc::new(SampleStore::random(self.calib_samples, cluster.input_width, self.seed))
    }
}

impl Scorer for RuntimeBench {
    fn score(&self, cluster: &ClusterSpec, matrix: &AllocationMatrix) -> f64 {
        match bench(matrix, self.calibration(cluster), cluster, Arc::clone(&self.backend), self.repeats) {
            Ok(outcome) => outcome.score,
            Err(e) => {
                log::warn!("bench failed: {e}");
                0.0
            }
        }
    }
}
