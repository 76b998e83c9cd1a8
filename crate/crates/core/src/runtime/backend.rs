//! Predictor backends. A backend builds one predictor per worker; the
//! predictor "loads" its model onto the device and then predicts batches.

use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::cost::{batch_time, WorkerPlacement};
use crate::model::{ClusterSpec, DeviceSpec, ModelSpec};

/// What a backend knows about the worker it is building a predictor for.
#[derive(Clone, Debug)]
pub struct WorkerContext {
    pub worker: usize,
    pub placement: WorkerPlacement,
    pub cluster: Arc<ClusterSpec>,
    /// Total MiB the matrix places on this worker's device.
    pub device_load: f64,
}

impl WorkerContext {
    pub fn model(&self) -> &ModelSpec {
        &self.cluster.models[self.placement.model]
    }

    pub fn device(&self) -> &DeviceSpec {
        &self.cluster.devices[self.placement.device]
    }

    pub fn batch(&self) -> usize {
        self.placement.batch as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutOfMemory;

pub trait Predictor: Send {
    fn load(&mut self) -> Result<(), OutOfMemory>;

    /// Predicts `rows` samples laid out row-major in `inputs`; returns
    /// `rows * output_width` values.
    fn predict(&mut self, inputs: &[f32], rows: usize) -> Vec<f32>;
}

pub trait Backend: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn create(&self, ctx: &WorkerContext) -> Box<dyn Predictor>;
}

/// Two consecutive batches closer than this are treated as back-to-back, so
/// sleep overshoot on one batch is absorbed by the next.
const PACING_SLACK: Duration = Duration::from_millis(2);

/// Sleeps for the cost model's batch time and emits hash-derived outputs.
///
/// The output of model `m` for a sample depends only on `m` and the sample's
/// feature values, so combined predictions are reproducible across runs,
/// worker layouts and request groupings.
#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    /// Multiplier applied to every sleep.
    pub time_scale: f64,
}

impl Default for SyntheticBackend {
    fn default() -> Self {
        Self { time_scale: 1.0 }
    }
}

impl SyntheticBackend {
    pub fn new(time_scale: f64) -> Self {
        Self { time_scale }
    }
}

impl Backend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn create(&self, ctx: &WorkerContext) -> Box<dyn Predictor> {
        Box::new(SyntheticPredictor {
            ctx: ctx.clone(),
            time_scale: self.time_scale,
            busy_until: None,
        })
    }
}

struct SyntheticPredictor {
    ctx: WorkerContext,
    time_scale: f64,
    busy_until: Option<Instant>,
}

impl SyntheticPredictor {
    /// Sleeps until `rows` samples' worth of service time has passed since
    /// `start`, or since the end of the previous batch if that was just now.
    fn pace(&mut self, start: Instant, rows: usize) {
        let secs = batch_time(&self.ctx.placement, rows, &self.ctx.cluster) * self.time_scale;
        if !(secs > 0.0) {
            return;
        }
        let base = match self.busy_until {
            Some(t) if start.saturating_duration_since(t) < PACING_SLACK => t,
            _ => start,
        };
        let deadline = base + Duration::from_secs_f64(secs);
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        }
        self.busy_until = Some(deadline);
    }
}

impl Predictor for SyntheticPredictor {
    fn load(&mut self) -> Result<(), OutOfMemory> {
        if self.ctx.device_load > self.ctx.device().memory_capacity {
            return Err(OutOfMemory);
        }
        Ok(())
    }

    fn predict(&mut self, inputs: &[f32], rows: usize) -> Vec<f32> {
        let start = Instant::now();
        let out = synthetic_outputs(self.ctx.placement.model, inputs, rows, self.ctx.model().output_width);
        self.pace(start, rows);
        out
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-row probability vectors for `model`.
pub fn synthetic_outputs(model: usize, inputs: &[f32], rows: usize, width: usize) -> Vec<f32> {
    let features = inputs.len().checked_div(rows).unwrap_or(0);
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let mut h = mix(model as u64 ^ 0x9e37_79b9_7f4a_7c15);
        for x in &inputs[r * features..(r + 1) * features] {
            h = mix(h ^ u64::from(x.to_bits()));
        }
        let start = out.len();
        let mut sum = 0.0f32;
        for k in 0..width {
            let v = (mix(h ^ (k as u64 + 1)) >> 40) as f32 / (1u64 << 24) as f32 + 1e-3;
            sum += v;
            out.push(v);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Returns zeros instantly; isolates the pipeline's own overhead.
#[derive(Clone, Copy, Debug, Default)]
pub struct FakeZeroBackend;

impl Backend for FakeZeroBackend {
    fn name(&self) -> &str {
        "fake-zero"
    }

    fn create(&self, ctx: &WorkerContext) -> Box<dyn Predictor> {
        Box::new(FakeZeroPredictor {
            width: ctx.model().output_width,
        })
    }
}

struct FakeZeroPredictor {
    width: usize,
}

impl Predictor for FakeZeroPredictor {
    fn load(&mut self) -> Result<(), OutOfMemory> {
        Ok(())
    }

    fn predict(&mut self, _inputs: &[f32], rows: usize) -> Vec<f32> {
        vec![0.0; rows * self.width]
    }
}
