use num_bigint::BigUint;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AllocationMatrix, ClusterSpec};

use super::neighborhood::{forbidden_moves, neighborhood};

/// `((B+1)^D - 1)^M`: every column takes any of `B+1` values per device
/// except all zeros.
pub fn count_total_matrices(menu_size: u32, devices: u32, models: u32) -> BigUint {
    let per_column = BigUint::from(menu_size + 1).pow(devices) - 1u32;
    per_column.pow(models)
}

/// `(B+1)*D*M - F`, the per-iteration neighbor count as usually reported.
/// It counts the unchanged value of each cell, so it exceeds the enumerated
/// neighborhood (`B*D*M - F`) by exactly `D*M`.
pub fn count_total_neighs(menu_size: u64, devices: u64, models: u64, forbidden: u64) -> i128 {
    i128::from(menu_size + 1) * i128::from(devices) * i128::from(models) - i128::from(forbidden)
}

/// Every valid matrix for `cluster`, or an error when there are more than `cap`.
pub fn enumerate_all_matrices(cluster: &ClusterSpec, cap: u64) -> Result<MatrixEnumerator> {
    let total = count_total_matrices(
        cluster.batch_menu.len() as u32,
        cluster.num_devices() as u32,
        cluster.num_models() as u32,
    );
    if total > BigUint::from(cap) {
        return Err(Error::EnumerationCap {
            total: total.to_string(),
            cap,
        });
    }
    Ok(MatrixEnumerator::new(cluster))
}

/// Odometer over the nonzero columns of every model; model 0 varies slowest.
#[derive(Debug, Clone)]
pub struct MatrixEnumerator {
    columns: Vec<Vec<u32>>,
    devices: usize,
    cursor: Option<Vec<usize>>,
}

impl MatrixEnumerator {
    fn new(cluster: &ClusterSpec) -> Self {
        let devices = cluster.num_devices();
        let values: Vec<u32> = std::iter::once(0).chain(cluster.batch_menu.iter().copied()).collect();
        let mut columns = Vec::new();
        let mut digits = vec![0usize; devices];
        loop {
            // advance first so the all-zero column is skipped
            let mut pos = devices;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < values.len() {
                    break;
                }
                digits[pos] = 0;
            }
            if digits.iter().all(|&x| x == 0) {
                break;
            }
            columns.push(digits.iter().map(|&i| values[i]).collect());
        }
        let cursor = (!columns.is_empty()).then(|| vec![0; cluster.num_models()]);
        Self {
            columns,
            devices,
            cursor,
        }
    }

    pub fn columns_per_model(&self) -> usize {
        self.columns.len()
    }
}

impl Iterator for MatrixEnumerator {
    type Item = AllocationMatrix;

    fn next(&mut self) -> Option<AllocationMatrix> {
        let cursor = self.cursor.as_mut()?;
        let mut out = AllocationMatrix::zeros(self.devices, cursor.len());
        for (m, &c) in cursor.iter().enumerate() {
            for (d, &b) in self.columns[c].iter().enumerate() {
                out.set(d, m, b);
            }
        }
        let mut pos = cursor.len();
        loop {
            if pos == 0 {
                self.cursor = None;
                break;
            }
            pos -= 1;
            cursor[pos] += 1;
            if cursor[pos] < self.columns.len() {
                break;
            }
            cursor[pos] = 0;
        }
        Some(out)
    }
}

/// Search-space sizes for a cluster and the neighborhood of one matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CombinatoricsReport {
    pub menu_size: usize,
    pub devices: usize,
    pub models: usize,
    /// Exact decimal string.
    pub total_matrices: String,
    pub total_matrices_approx: f64,
    /// `(B+1)*D*M - F` with `F = M` and `F = 0`.
    pub formula_neighbors_min: i128,
    pub formula_neighbors_max: i128,
    /// `F` observed at `matrix`.
    pub forbidden: usize,
    pub formula_neighbors_at_matrix: i128,
    pub enumerated_neighbors: usize,
    /// `formula_neighbors_at_matrix - enumerated_neighbors`.
    pub delta: i128,
}

impl CombinatoricsReport {
    pub fn new(cluster: &ClusterSpec, matrix: &AllocationMatrix) -> Self {
        let (b, d, m) = (cluster.batch_menu.len(), cluster.num_devices(), cluster.num_models());
        let total = count_total_matrices(b as u32, d as u32, m as u32);
        let forbidden = forbidden_moves(matrix);
        let enumerated = neighborhood(matrix, cluster).len();
        let at_matrix = count_total_neighs(b as u64, d as u64, m as u64, forbidden as u64);
        Self {
            menu_size: b,
            devices: d,
            models: m,
            total_matrices_approx: total.to_string().parse().unwrap_or(f64::INFINITY),
            total_matrices: total.to_string(),
            formula_neighbors_min: count_total_neighs(b as u64, d as u64, m as u64, m as u64),
            formula_neighbors_max: count_total_neighs(b as u64, d as u64, m as u64, 0),
            forbidden,
            formula_neighbors_at_matrix: at_matrix,
            enumerated_neighbors: enumerated,
            delta: at_matrix - enumerated as i128,
        }
    }
}
