//! The worker pool. Each worker is three threads joined by bounded channels:
//! a batcher that turns segment ids into batches, a predictor that owns the
//! loaded model, and a sender that reassembles segment predictions and posts
//! them on the shared prediction queue. Workers of the same model pull from
//! one shared input queue.

use std::ops::Range;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use serde::Serialize;

use crate::cost::WorkerPlacement;
use crate::error::{Error, Result};
use crate::memory::device_load;
use crate::model::{num_segments, segment_bounds, validate_matrix, AllocationMatrix, ClusterSpec, Segment};

use super::accumulator::{Accumulator, CombinationRule, Combined};
use super::backend::{Backend, WorkerContext};
use super::message::{Job, PredictionMessage, WorkItem};
use super::store::SampleStore;

#[derive(Clone, Copy, Debug)]
pub struct PoolOptions {
    /// Capacity, in batches, of the hand-off channels inside a worker.
    pub stage_capacity: usize,
    pub startup_timeout: Duration,
    pub shutdown_deadline: Duration,
}

impl Default for PoolOptions {
    fn default() -> Self {
        Self {
            stage_capacity: 2,
            startup_timeout: Duration::from_secs(60),
            shutdown_deadline: Duration::from_secs(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkerInfo {
    pub id: usize,
    pub model: usize,
    pub device: usize,
    pub batch: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ShutdownReport {
    pub already_shut_down: bool,
    /// Threads still running when the deadline expired; they are detached.
    pub forced: Vec<String>,
}

impl ShutdownReport {
    pub fn is_clean(&self) -> bool {
        self.forced.is_empty()
    }
}

/// Result of one pass over a sample store.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub combined: Combined,
    /// From the first broadcast to the last accumulated block.
    pub elapsed: Duration,
    pub segments: usize,
    /// `(segment, model, worker)` for every accumulated block, in arrival order.
    pub assignments: Vec<(usize, usize, usize)>,
}

struct BatchTask {
    job: Arc<Job>,
    segment: Segment,
    rows: Range<usize>,
    last: bool,
}

struct BatchOutput {
    segment: Segment,
    values: Vec<f32>,
    last: bool,
}

#[derive(Clone, Debug)]
pub struct QueueProbe {
    queues: Vec<Sender<WorkItem>>,
}

impl QueueProbe {
    pub fn depths(&self) -> Vec<usize> {
        self.queues.iter().map(Sender::len).collect()
    }
}

pub struct WorkerPool {
    cluster: Arc<ClusterSpec>,
    matrix: AllocationMatrix,
    workers: Vec<WorkerInfo>,
    threads: Vec<(String, JoinHandle<()>)>,
    queues: Vec<Sender<WorkItem>>,
    predictions: Receiver<PredictionMessage>,
    output_width: usize,
    options: PoolOptions,
    shut_down: bool,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("workers", &self.workers)
            .field("shut_down", &self.shut_down)
            .finish_non_exhaustive()
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn run_batcher(batch: usize, input: Receiver<WorkItem>, out: Sender<BatchTask>) {
    for item in input.iter() {
        let (id, job) = match item {
            WorkItem::Segment { id, job } => (id, job),
            WorkItem::Shutdown => return,
        };
        let segment = match segment_bounds(id, job.segment_size, job.store.len()) {
            Ok(s) => s,
            Err(e) => {
                log::error!("batcher dropped segment {id}: {e}");
                continue;
            }
        };
        let mut start = segment.start;
        while start < segment.end {
            let end = (start + batch).min(segment.end);
            let task = BatchTask {
                job: Arc::clone(&job),
                segment,
                rows: start..end,
                last: end == segment.end,
            };
            if out.send(task).is_err() {
                return;
            }
            start = end;
        }
    }
}

fn run_predictor(
    ctx: WorkerContext,
    backend: Arc<dyn Backend>,
    width: usize,
    input: Receiver<BatchTask>,
    out: Sender<BatchOutput>,
    report: Sender<PredictionMessage>,
) {
    let worker = ctx.worker;
    let loaded = panic::catch_unwind(AssertUnwindSafe(|| {
        let mut p = backend.create(&ctx);
        p.load().map(|_| p)
    }));
    let mut predictor = match loaded {
        Ok(Ok(p)) => {
            let _ = report.send(PredictionMessage::Ready { worker });
            p
        }
        Ok(Err(_)) => {
            let _ = report.send(PredictionMessage::Oom {
                worker,
                model: ctx.placement.model,
                device: ctx.placement.device,
            });
            return;
        }
        Err(payload) => {
            let _ = report.send(PredictionMessage::Failed {
                worker,
                reason: panic_message(payload.as_ref()),
            });
            return;
        }
    };
    for task in input.iter() {
        let rows = task.rows.len();
        let inputs = task.job.store.rows(task.rows.clone());
        let values = match panic::catch_unwind(AssertUnwindSafe(|| predictor.predict(inputs, rows))) {
            Ok(v) if v.len() == rows * width => v,
            Ok(v) => {
                let _ = report.send(PredictionMessage::Failed {
                    worker,
                    reason: format!("predictor returned {} values for {rows}x{width}", v.len()),
                });
                return;
            }
            Err(payload) => {
                let _ = report.send(PredictionMessage::Failed {
                    worker,
                    reason: panic_message(payload.as_ref()),
                });
                return;
            }
        };
        let output = BatchOutput {
            segment: task.segment,
            values,
            last: task.last,
        };
        if out.send(output).is_err() {
            return;
        }
    }
}

fn run_sender(worker: usize, model: usize, input: Receiver<BatchOutput>, report: Sender<PredictionMessage>) {
    let mut block = Vec::new();
    for out in input.iter() {
        block.extend_from_slice(&out.values);
        if out.last {
            let msg = PredictionMessage::Data {
                segment: out.segment.id,
                model,
                worker,
                block: std::mem::take(&mut block),
            };
            if report.send(msg).is_err() {
                return;
            }
        }
    }
}

impl WorkerPool {
    /// Starts one worker per nonzero cell of `matrix` and waits until every
    /// worker has reported. Any out-of-memory report shuts the pool down.
    pub fn build(
        matrix: &AllocationMatrix,
        cluster: Arc<ClusterSpec>,
        backend: Arc<dyn Backend>,
        options: PoolOptions,
    ) -> Result<WorkerPool> {
        validate_matrix(matrix, &cluster)?.into_result()?;
        let output_width = cluster
            .output_width()
            .ok_or_else(|| Error::InvalidSpec("models disagree on output width".into()))?;

        let (report_tx, report_rx) = unbounded();
        let (queues, queue_rx): (Vec<_>, Vec<_>) = (0..cluster.num_models()).map(|_| unbounded()).unzip();

        let mut pool = WorkerPool {
            cluster: Arc::clone(&cluster),
            matrix: matrix.clone(),
            workers: Vec::new(),
            threads: Vec::new(),
            queues,
            predictions: report_rx,
            output_width,
            options,
            shut_down: false,
        };

        for (id, placement) in WorkerPlacement::all(matrix).into_iter().enumerate() {
            pool.workers.push(WorkerInfo {
                id,
                model: placement.model,
                device: placement.device,
                batch: placement.batch,
            });
            let ctx = WorkerContext {
                worker: id,
                placement,
                cluster: Arc::clone(&cluster),
                device_load: device_load(matrix, placement.device, &cluster),
            };
            let (batch_tx, batch_rx) = bounded(options.stage_capacity);
            let (out_tx, out_rx) = bounded(options.stage_capacity);

            let input = queue_rx[placement.model].clone();
            let batch = placement.batch as usize;
            pool.spawn(format!("w{id}-batcher"), move || run_batcher(batch, input, batch_tx))?;

            let (backend, report) = (Arc::clone(&backend), report_tx.clone());
            pool.spawn(format!("w{id}-predictor"), move || {
                run_predictor(ctx, backend, output_width, batch_rx, out_tx, report)
            })?;

            let report = report_tx.clone();
            let model = placement.model;
            pool.spawn(format!("w{id}-sender"), move || run_sender(id, model, out_rx, report))?;
        }
        drop(report_tx);

        if let Err(e) = pool.await_ready() {
            pool.shutdown();
            return Err(e);
        }
        Ok(pool)
    }

    fn spawn(&mut self, name: String, f: impl FnOnce() + Send + 'static) -> Result<()> {
        let handle = thread::Builder::new().name(name.clone()).spawn(f)?;
        self.threads.push((name, handle));
        Ok(())
    }

    fn await_ready(&self) -> Result<()> {
        let deadline = Instant::now() + self.options.startup_timeout;
        let mut ready = 0;
        let mut failure = None;
        for _ in 0..self.workers.len() {
            let msg = match self.predictions.recv_deadline(deadline) {
                Ok(msg) => msg,
                Err(_) => return Err(Error::Worker("workers did not report readiness in time".into())),
            };
            match msg {
                PredictionMessage::Ready { .. } => ready += 1,
                PredictionMessage::Oom { model, device, .. } => {
                    failure.get_or_insert(Error::OutOfMemory {
                        model: self.cluster.models[model].name.clone(),
                        device,
                    });
                }
                PredictionMessage::Failed { worker, reason } => {
                    failure.get_or_insert(Error::Worker(format!("worker {worker} failed to start: {reason}")));
                }
                PredictionMessage::Data { .. } => {
                    return Err(Error::Protocol("prediction received before startup finished".into()))
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => {
                debug_assert_eq!(ready, self.workers.len());
                Ok(())
            }
        }
    }

    pub fn workers(&self) -> &[WorkerInfo] {
        &self.workers
    }

    pub fn matrix(&self) -> &AllocationMatrix {
        &self.matrix
    }

    pub fn cluster(&self) -> &ClusterSpec {
        &self.cluster
    }

    /// Number of input queues (one per model).
    pub fn queue_count(&self) -> usize {
        self.queues.len()
    }

    /// Segment ids waiting in each model queue.
    pub fn queue_depths(&self) -> Vec<usize> {
        self.queues.iter().map(Sender::len).collect()
    }

    /// A cloneable handle that reads queue depths from other threads.
    pub fn queue_probe(&self) -> QueueProbe {
        QueueProbe {
            queues: self.queues.clone(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    /// Puts every segment id of `store` once into each model queue and
    /// returns the number of segments.
    pub fn broadcast_segments(&self, store: Arc<SampleStore>) -> usize {
        let segments = num_segments(store.len(), self.cluster.segment_size);
        let job = Arc::new(Job {
            store,
            segment_size: self.cluster.segment_size,
        });
        for queue in &self.queues {
            for id in 0..segments {
                // receivers live as long as the batchers; a send error means
                // the worker already died and the run will report it
                let _ = queue.send(WorkItem::Segment {
                    id,
                    job: Arc::clone(&job),
                });
            }
        }
        segments
    }

    /// Runs every sample of `store` through the ensemble and combines the
    /// predictions with `rule`.
    pub fn run(&mut self, store: Arc<SampleStore>, rule: &CombinationRule) -> Result<RunOutput> {
        if self.shut_down {
            return Err(Error::Precondition("pool is shut down".into()));
        }
        if store.width() != self.cluster.input_width {
            return Err(Error::Precondition(format!(
                "samples have width {}, cluster declares {}",
                store.width(),
                self.cluster.input_width
            )));
        }
        let mut acc = Accumulator::new(
            store.len(),
            self.output_width,
            self.cluster.num_models(),
            self.cluster.segment_size,
            rule.clone(),
        )?;
        let mut assignments = Vec::with_capacity(acc.expected());
        let start = Instant::now();
        let segments = self.broadcast_segments(store);
        while !acc.is_complete() {
            let msg = match self.predictions.recv_timeout(Duration::from_secs(300)) {
                Ok(msg) => msg,
                Err(RecvTimeoutError::Timeout) => return Err(Error::Worker("no prediction for 300 s".into())),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Worker("all workers exited".into())),
            };
            match msg {
                PredictionMessage::Data {
                    segment,
                    model,
                    worker,
                    block,
                } => {
                    acc.accept(segment, model, block)?;
                    assignments.push((segment, model, worker));
                }
                PredictionMessage::Ready { .. } => {}
                PredictionMessage::Oom { worker, .. } => {
                    return Err(Error::Worker(format!("worker {worker} ran out of memory")))
                }
                PredictionMessage::Failed { worker, reason } => {
                    return Err(Error::Worker(format!("worker {worker} failed: {reason}")))
                }
            }
        }
        let elapsed = start.elapsed();
        Ok(RunOutput {
            combined: acc.finish()?,
            elapsed,
            segments,
            assignments,
        })
    }

    /// Messages currently waiting on the prediction queue.
    pub fn drain_messages(&self) -> Vec<PredictionMessage> {
        self.predictions.try_iter().collect()
    }

    /// Sends one shutdown sentinel per worker and joins every stage. Queued
    /// segments are still predicted before the workers exit. Calling it again
    /// is a no-op.
    pub fn shutdown(&mut self) -> ShutdownReport {
        if self.shut_down {
            return ShutdownReport {
                already_shut_down: true,
                forced: Vec::new(),
            };
        }
        self.shut_down = true;
        for w in &self.workers {
            let _ = self.queues[w.model].send(WorkItem::Shutdown);
        }
        let deadline = Instant::now() + self.options.shutdown_deadline;
        let mut forced = Vec::new();
        for (name, handle) in self.threads.drain(..) {
            while !handle.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(1));
            }
            if handle.is_finished() {
                if handle.join().is_err() {
                    log::warn!("thread {name} panicked");
                }
            } else {
                forced.push(name);
            }
        }
        if !forced.is_empty() {
            log::warn!("forced shutdown, detached threads: {forced:?}");
        }
        ShutdownReport {
            already_shut_down: false,
            forced,
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}
