use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AllocationMatrix, ClusterSpec, DeviceKind};

use super::Scorer;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BbsChoice {
    pub model: usize,
    pub device: usize,
    pub batch: u32,
    /// Isolated score of the model at `batch`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BbsOutcome {
    pub matrix: AllocationMatrix,
    pub bench_calls: usize,
    pub choices: Vec<BbsChoice>,
}

/// Best-batch strategy: one model per GPU, each model's batch size picked by
/// benchmarking it alone at every menu value. Needs at least as many GPUs as
/// models.
pub fn bbs_baseline<S: Scorer + ?Sized>(cluster: &ClusterSpec, bench: &S) -> Result<BbsOutcome> {
    let gpus: Vec<usize> = cluster.devices_of(DeviceKind::Gpu).map(|d| d.id).collect();
    if gpus.len() < cluster.num_models() {
        return Err(Error::BaselineInapplicable {
            gpus: gpus.len(),
            models: cluster.num_models(),
        });
    }
    let mut order: Vec<usize> = (0..cluster.num_models()).collect();
    order.sort_by(|&a, &b| {
        cluster.models[b]
            .weight_memory
            .total_cmp(&cluster.models[a].weight_memory)
    });

    let mut matrix = AllocationMatrix::for_cluster(cluster);
    let mut choices = Vec::with_capacity(order.len());
    let mut bench_calls = 0;
    for (&model, &device) in order.iter().zip(&gpus) {
        let alone = cluster.single_model(model);
        let mut best: Option<(u32, f64)> = None;
        for &batch in &cluster.batch_menu {
            let mut a = AllocationMatrix::for_cluster(&alone);
            a.set(device, 0, batch);
            let s = bench.score(&alone, &a);
            bench_calls += 1;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((batch, s));
            }
        }
        let (batch, score) = best.expect("menu is nonempty");
        matrix.set(device, model, batch);
        choices.push(BbsChoice {
            model,
            device,
            batch,
            score,
        });
    }
    choices.sort_by_key(|c| c.model);
    Ok(BbsOutcome {
        matrix,
        bench_calls,
        choices,
    })
}
