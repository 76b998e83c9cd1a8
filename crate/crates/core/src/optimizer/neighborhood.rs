use crate::model::{AllocationMatrix, ClusterSpec};

/// Every valid matrix differing from `matrix` in exactly one cell, in
/// row-major cell order and ascending replacement value. Moves that would
/// leave a model without a worker are excluded.
pub fn neighborhood(matrix: &AllocationMatrix, cluster: &ClusterSpec) -> Vec<AllocationMatrix> {
    let values: Vec<u32> = std::iter::once(0).chain(cluster.batch_menu.iter().copied()).collect();
    let mut out = Vec::new();
    for d in 0..matrix.num_devices() {
        for m in 0..matrix.num_models() {
            let current = matrix.get(d, m);
            let sole_worker = current > 0 && matrix.workers_of_model(m) == 1;
            for &v in &values {
                if v == current || (v == 0 && sole_worker) {
                    continue;
                }
                out.push(matrix.with(d, m, v));
            }
        }
    }
    out
}

/// Number of single-cell moves excluded because they would empty a column:
/// one per model served by a single worker.
pub fn forbidden_moves(matrix: &AllocationMatrix) -> usize {
    (0..matrix.num_models())
        .filter(|&m| matrix.workers_of_model(m) == 1)
        .count()
}
