//! Online deploy mode: an HTTP front end that buffers client requests into
//! segments and runs them through a long-lived worker pool.
//!
//! Routes:
//! - `POST /v1/predict`: body is an array of sample vectors, response is the
//!   combined prediction for each, in order. 503 until the pool is ready.
//! - `GET /v1/ready`: `{"ready": bool}`, 200 when ready and 503 otherwise.
//! - `GET /v1/stats`: counters, throughput, queue depths and the matrix.

mod buffer;
mod cache;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

pub use buffer::{PendingRequest, RequestBuffer, DEFAULT_FLUSH_TIMEOUT};
pub use cache::{CacheKeyInputs, Lookup, MatrixCache, MatrixCacheEntry};

use crate::error::{Error, Result};
use crate::model::{validate_matrix, AllocationMatrix, ClusterSpec, MatrixDocument};
use crate::runtime::{Backend, CombinationRule, PoolOptions, QueueProbe, SampleStore, WorkerPool};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub flush_timeout: Duration,
    pub rule: CombinationRule,
    pub pool: PoolOptions,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            flush_timeout: DEFAULT_FLUSH_TIMEOUT,
            rule: CombinationRule::Averaging,
            pool: PoolOptions::default(),
        }
    }
}

type Reply = oneshot::Sender<std::result::Result<Vec<Vec<f32>>, String>>;

struct DispatchState {
    buffer: RequestBuffer<Reply>,
    shutting_down: bool,
    failed: Option<String>,
    probe: Option<QueueProbe>,
}

#[derive(Default)]
struct Counters {
    requests: u64,
    samples: u64,
    flushes: u64,
    ready_at: Option<Instant>,
}

struct Shared {
    state: Mutex<DispatchState>,
    wake: Condvar,
    ready: AtomicBool,
    counters: Mutex<Counters>,
    cluster: Arc<ClusterSpec>,
    matrix: AllocationMatrix,
    rule: CombinationRule,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, DispatchState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn counters(&self) -> MutexGuard<'_, Counters> {
        self.counters.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub ready: bool,
    pub requests: u64,
    pub samples: u64,
    pub flushes: u64,
    /// Samples answered per second since the service became ready.
    pub throughput: f64,
    pub uptime_s: f64,
    pub pending_samples: usize,
    /// Segment ids waiting per model queue.
    pub queue_depths: Vec<usize>,
    pub segment_size: usize,
    pub flush_timeout_ms: u64,
    pub rule: String,
    pub matrix: MatrixDocument,
}

/// A running server. Dropping it shuts the service down.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Option<oneshot::Sender<()>>,
    http: Option<JoinHandle<()>>,
    dispatcher: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle")
            .field("addr", &self.addr)
            .field("ready", &self.is_ready())
            .finish()
    }
}

/// Binds the listener and starts the service. Workers load in the
/// background; `/v1/ready` turns true once all of them reported ready.
pub fn start(
    matrix: &AllocationMatrix,
    cluster: ClusterSpec,
    backend: Arc<dyn Backend>,
    config: ServerConfig,
) -> Result<ServerHandle> {
    validate_matrix(matrix, &cluster)?.into_result()?;
    config.rule.check(cluster.num_models())?;
    let listener = std::net::TcpListener::bind(config.bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let shared = Arc::new(Shared {
        state: Mutex::new(DispatchState {
            buffer: RequestBuffer::new(cluster.segment_size, config.flush_timeout),
            shutting_down: false,
            failed: None,
            probe: None,
        }),
        wake: Condvar::new(),
        ready: AtomicBool::new(false),
        counters: Mutex::new(Counters::default()),
        cluster: Arc::new(cluster),
        matrix: matrix.clone(),
        rule: config.rule.clone(),
    });

    let dispatcher = {
        let shared = Arc::clone(&shared);
        let options = config.pool;
        thread::Builder::new()
            .name("dispatcher".into())
            .spawn(move || dispatch(shared, backend, options))?
    };

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let app = router(Arc::clone(&shared));
    let http = {
        let shared = Arc::clone(&shared);
        let stopping = Arc::clone(&shared);
        thread::Builder::new().name("http".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("listener: {e}");
                        return;
                    }
                };
                let stopped = async move {
                    tokio::select! {
                        _ = stop_rx => {}
                        _ = tokio::signal::ctrl_c() => log::info!("interrupted"),
                    }
                    // in-flight requests are answered before connections close
                    stopping.lock().shutting_down = true;
                    stopping.wake.notify_all();
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stopped).await {
                    log::error!("http server: {e}");
                }
            });
            // also covers the server failing on its own
            shared.lock().shutting_down = true;
            shared.wake.notify_all();
        })?
    };

    log::info!("listening on {addr}");
    Ok(ServerHandle {
        addr,
        shared,
        stop: Some(stop_tx),
        http: Some(http),
        dispatcher: Some(dispatcher),
    })
}

/// Runs the service until interrupted.
pub fn serve(
    matrix: &AllocationMatrix,
    cluster: ClusterSpec,
    backend: Arc<dyn Backend>,
    config: ServerConfig,
) -> Result<()> {
    let startup = config.pool.startup_timeout + Duration::from_secs(5);
    let mut handle = start(matrix, cluster, backend, config)?;
    if let Err(e) = handle.wait_ready(startup) {
        handle.shutdown();
        return Err(e);
    }
    handle.join();
    Ok(())
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_ready(&self) -> bool {
        self.shared.ready.load(Ordering::SeqCst)
    }

    /// Blocks until the pool is ready, failed to start, or `timeout` passed.
    pub fn wait_ready(&self, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let mut state = self.shared.lock();
        loop {
            if let Some(reason) = &state.failed {
                return Err(Error::Worker(reason.clone()));
            }
            if self.is_ready() {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Worker("workers not ready before the deadline".into()));
            }
            state = self
                .shared
                .wake
                .wait_timeout(state, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn stats(&self) -> StatsReport {
        stats_report(&self.shared)
    }

    /// Stops accepting connections, answers buffered requests and tears the
    /// pool down.
    pub fn shutdown(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.join();
    }

    /// Waits for the service to stop on its own.
    pub fn join(&mut self) {
        if let Some(h) = self.http.take() {
            let _ = h.join();
        }
        if let Some(h) = self.dispatcher.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn dispatch(shared: Arc<Shared>, backend: Arc<dyn Backend>, options: PoolOptions) {
    let mut pool = match WorkerPool::build(&shared.matrix, Arc::clone(&shared.cluster), backend, options) {
        Ok(pool) => pool,
        Err(e) => {
            log::error!("worker pool failed to start: {e}");
            let mut state = shared.lock();
            state.failed = Some(e.to_string());
            for req in state.buffer.take() {
                let _ = req.reply.send(Err(e.to_string()));
            }
            shared.wake.notify_all();
            return;
        }
    };
    {
        let mut state = shared.lock();
        state.probe = Some(pool.queue_probe());
        shared.counters().ready_at = Some(Instant::now());
        shared.ready.store(true, Ordering::SeqCst);
        shared.wake.notify_all();
    }
    log::info!("all {} workers ready", pool.workers().len());

    loop {
        let batch = {
            let mut state = shared.lock();
            loop {
                let now = Instant::now();
                if state.shutting_down || state.buffer.should_flush(now) {
                    break;
                }
                state = match state.buffer.deadline() {
                    Some(d) => shared.wake.wait_timeout(state, d - now).unwrap_or_else(|e| e.into_inner()).0,
                    None => shared.wake.wait(state).unwrap_or_else(|e| e.into_inner()),
                };
            }
            if state.buffer.is_empty() {
                // shutting down with nothing left to answer
                break;
            }
            state.buffer.take()
        };
        run_batch(&shared, &mut pool, batch);
    }

    shared.ready.store(false, Ordering::SeqCst);
    let report = pool.shutdown();
    if !report.is_clean() {
        log::warn!("forced worker exit: {:?}", report.forced);
    }
}

fn run_batch(shared: &Shared, pool: &mut WorkerPool, batch: Vec<PendingRequest<Reply>>) {
    let width = shared.cluster.input_width;
    let rows: usize = batch.iter().map(|r| r.rows).sum();
    let mut data = Vec::with_capacity(rows * width);
    for req in &batch {
        data.extend_from_slice(&req.samples);
    }
    let result = pool.run(Arc::new(SampleStore::new(data, width)), &shared.rule);
    {
        let mut c = shared.counters();
        c.flushes += 1;
        if result.is_ok() {
            c.requests += batch.len() as u64;
            c.samples += rows as u64;
        }
    }
    match result {
        Ok(out) => {
            let y = out.combined.predictions;
            let mut offset = 0;
            for req in batch {
                let answer = (offset..offset + req.rows).map(|i| y.row(i).to_vec()).collect();
                offset += req.rows;
                let _ = req.reply.send(Ok(answer));
            }
        }
        Err(e) => {
            log::error!("flush of {rows} samples failed: {e}");
            for req in batch {
                let _ = req.reply.send(Err(e.to_string()));
            }
        }
    }
}

fn stats_report(shared: &Shared) -> StatsReport {
    let (pending, depths, flush_timeout, segment_size) = {
        let state = shared.lock();
        let depths = state
            .probe
            .as_ref()
            .map(QueueProbe::depths)
            .unwrap_or_else(|| vec![0; shared.cluster.num_models()]);
        (
            state.buffer.len(),
            depths,
            state.buffer.flush_timeout(),
            state.buffer.capacity(),
        )
    };
    let c = shared.counters();
    let uptime = c.ready_at.map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0);
    StatsReport {
        ready: shared.ready.load(Ordering::SeqCst),
        requests: c.requests,
        samples: c.samples,
        flushes: c.flushes,
        throughput: if uptime > 0.0 { c.samples as f64 / uptime } else { 0.0 },
        uptime_s: uptime,
        pending_samples: pending,
        queue_depths: depths,
        segment_size,
        flush_timeout_ms: flush_timeout.as_millis() as u64,
        rule: shared.rule.name().to_string(),
        matrix: shared.matrix.to_document(&shared.cluster),
    }
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/ready", get(ready))
        .route("/v1/stats", get(stats))
        .with_state(shared)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn predict(State(shared): State<Arc<Shared>>, Json(samples): Json<Vec<Vec<f32>>>) -> Response {
    let width = shared.cluster.input_width;
    if let Some((i, row)) = samples.iter().enumerate().find(|(_, r)| r.len() != width) {
        return error(
            StatusCode::BAD_REQUEST,
            format!("sample {i} has {} features, expected {width}", row.len()),
        );
    }
    if !shared.ready.load(Ordering::SeqCst) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "not ready");
    }
    if samples.is_empty() {
        return Json(Vec::<Vec<f32>>::new()).into_response();
    }
    let rows = samples.len();
    let flat: Vec<f32> = samples.into_iter().flatten().collect();
    let (tx, rx) = oneshot::channel();
    {
        let mut state = shared.lock();
        if state.shutting_down {
            return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
        }
        state.buffer.push(flat, rows, Instant::now(), tx);
    }
    shared.wake.notify_all();
    match rx.await {
        Ok(Ok(rows)) => Json(rows).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "request dropped during shutdown"),
    }
}

async fn ready(State(shared): State<Arc<Shared>>) -> Response {
    let ready = shared.ready.load(Ordering::SeqCst);
    let failed = shared.lock().failed.clone();
    let status = if ready {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(serde_json::json!({ "ready": ready, "error": failed }))).into_response()
}

async fn stats(State(shared): State<Arc<Shared>>) -> Json<StatsReport> {
    Json(stats_report(&shared))
}
