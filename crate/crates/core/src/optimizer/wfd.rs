use crate::error::{Error, Result};
use crate::memory::{fit_mem, more_remaining_memory};
use crate::model::{AllocationMatrix, ClusterSpec, DeviceKind};

/// Places every model once at `default_batch`, largest weights first, each on
/// the GPU with the most remaining memory, falling back to the roomiest CPU
/// only when that GPU cannot hold it.
pub fn worst_fit_decreasing(cluster: &ClusterSpec, default_batch: u32) -> Result<AllocationMatrix> {
    if !cluster.in_menu(default_batch) {
        return Err(Error::BatchNotInMenu(default_batch));
    }
    let mut order: Vec<usize> = (0..cluster.num_models()).collect();
    // stable sort keeps lower ids first on ties
    order.sort_by(|&a, &b| {
        cluster.models[b]
            .weight_memory
            .total_cmp(&cluster.models[a].weight_memory)
    });

    let mut a = AllocationMatrix::for_cluster(cluster);
    for m in order {
        let on = |kind| {
            more_remaining_memory(&a, default_batch, kind, cluster)
                .map(|d| a.with(d, m, default_batch))
                .filter(|cand| fit_mem(cand, cluster).fits)
        };
        let placed = on(DeviceKind::Gpu).or_else(|| on(DeviceKind::Cpu));
        match placed {
            Some(next) => a = next,
            None => {
                return Err(Error::NoDeviceFits {
                    model: cluster.models[m].name.clone(),
                })
            }
        }
    }
    Ok(a)
}
