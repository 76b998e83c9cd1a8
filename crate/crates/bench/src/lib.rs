//! Instances shared by the benchmarks.

use ensemserve_core::{ClusterSpec, DeviceKind, DeviceSpec, ModelSpec};

/// One CPU plus `gpus` identical GPUs and `models` models of decreasing size.
pub fn instance(gpus: usize, models: usize) -> ClusterSpec {
    let mut devices = vec![DeviceSpec::new(0, DeviceKind::Cpu, 64_000.0, 750.0, 0.0)];
    devices.extend((1..=gpus).map(|i| DeviceSpec::new(i, DeviceKind::Gpu, 16_000.0, 18_500.0, 0.0035)));
    let models = (0..models)
        .map(|i| {
            let scale = 1.0 - i as f64 / (models as f64 + 1.0);
            ModelSpec::new(i, format!("m{i}"), 2500.0 * scale, 30.0 * scale, 12.0 * scale, 100)
        })
        .collect();
    ClusterSpec::new(devices, models).expect("bench instance is valid")
}
