//! Memory accounting for placements: a linear footprint per worker
//! (`weights + batch * activations`) summed per device.

use serde::Serialize;

use crate::model::{AllocationMatrix, ClusterSpec, DeviceKind, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceLoad {
    pub device: usize,
    pub used: f64,
    pub capacity: f64,
}

impl DeviceLoad {
    pub fn remaining(&self) -> f64 {
        self.capacity - self.used
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub per_device_load: Vec<DeviceLoad>,
    pub fits: bool,
}

/// Footprint in MiB of one worker of `model` running at `batch`.
pub fn worker_memory(model: &ModelSpec, batch: u32) -> f64 {
    model.weight_memory + f64::from(batch) * model.activation_memory_per_sample
}

pub fn device_load(matrix: &AllocationMatrix, device: usize, cluster: &ClusterSpec) -> f64 {
    matrix
        .row(device)
        .iter()
        .zip(&cluster.models)
        .filter(|(&b, _)| b > 0)
        .map(|(&b, m)| worker_memory(m, b))
        .sum()
}

/// Whether every device can hold the workers the matrix places on it.
/// Zero columns are allowed so partial matrices can be checked.
pub fn fit_mem(matrix: &AllocationMatrix, cluster: &ClusterSpec) -> MemoryReport {
    let per_device_load: Vec<DeviceLoad> = cluster
        .devices
        .iter()
        .map(|d| DeviceLoad {
            device: d.id,
            used: device_load(matrix, d.id, cluster),
            capacity: d.memory_capacity,
        })
        .collect();
    let fits = per_device_load.iter().all(|l| l.used <= l.capacity);
    MemoryReport { per_device_load, fits }
}

/// Device of `kind` with the most remaining memory, lowest id on ties.
///
/// `_batch` is accepted for parity with the placement heuristic's call shape;
/// remaining memory does not depend on the batch being placed.
pub fn more_remaining_memory(
    matrix: &AllocationMatrix,
    _batch: u32,
    kind: DeviceKind,
    cluster: &ClusterSpec,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for d in cluster.devices_of(kind) {
        let remaining = d.memory_capacity - device_load(matrix, d.id, cluster);
        if best.is_none_or(|(_, r)| remaining > r) {
            best = Some((d.id, remaining));
        }
    }
    best.map(|(id, _)| id)
}
