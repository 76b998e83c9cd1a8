//! Closed-form throughput model for synthetic devices.
//!
//! A device's compute rate is shared equally among the workers co-located on
//! it, and every batch pays the device's fixed dispatch overhead. The same
//! formula drives the synthetic backend's sleep times, so measured pipeline
//! throughput can be checked against [`predict_ensemble_throughput`].

use serde::Serialize;

use crate::memory::fit_mem;
use crate::model::{validate_matrix, AllocationMatrix, ClusterSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WorkerPlacement {
    pub model: usize,
    pub device: usize,
    pub batch: u32,
    pub colocated_count: usize,
}

impl WorkerPlacement {
    /// Placements of every worker in `matrix`, row-major.
    pub fn all(matrix: &AllocationMatrix) -> Vec<WorkerPlacement> {
        matrix
            .workers()
            .map(|(device, model, batch)| WorkerPlacement {
                model,
                device,
                batch,
                colocated_count: matrix.workers_on_device(device),
            })
            .collect()
    }
}

/// Seconds to process a batch of `rows` samples for this placement.
pub fn batch_time(placement: &WorkerPlacement, rows: usize, cluster: &ClusterSpec) -> f64 {
    let device = &cluster.devices[placement.device];
    let model = &cluster.models[placement.model];
    let share = device.compute_rate / placement.colocated_count.max(1) as f64;
    rows as f64 * model.cost_per_sample / share + device.batch_overhead
}

/// Seconds per full batch.
pub fn service_time(placement: &WorkerPlacement, cluster: &ClusterSpec) -> f64 {
    batch_time(placement, placement.batch as usize, cluster)
}

/// Samples per second of one worker; `f64::INFINITY` when a batch is free.
pub fn worker_throughput(placement: &WorkerPlacement, cluster: &ClusterSpec) -> f64 {
    let t = service_time(placement, cluster);
    if t <= 0.0 {
        return f64::INFINITY;
    }
    f64::from(placement.batch) / t
}

/// Ensemble throughput: every model must see every sample, so the slowest
/// model (summed over its data-parallel workers) bounds the ensemble.
/// Invalid or memory-infeasible matrices score 0.
pub fn predict_ensemble_throughput(matrix: &AllocationMatrix, cluster: &ClusterSpec) -> f64 {
    match validate_matrix(matrix, cluster) {
        Ok(v) if v.is_ok() => {}
        _ => return 0.0,
    }
    if !fit_mem(matrix, cluster).fits {
        return 0.0;
    }
    let mut per_model = vec![0.0; matrix.num_models()];
    for p in WorkerPlacement::all(matrix) {
        per_model[p.model] += worker_throughput(&p, cluster);
    }
    per_model.into_iter().fold(f64::INFINITY, f64::min)
}
