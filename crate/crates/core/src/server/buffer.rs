//! Adaptive batching of client requests into segment-sized flushes.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

pub const DEFAULT_FLUSH_TIMEOUT: Duration = Duration::from_millis(50);

#[derive(Debug)]
pub struct PendingRequest<R> {
    pub id: u64,
    /// Row-major sample features.
    pub samples: Vec<f32>,
    pub rows: usize,
    pub arrived: Instant,
    pub reply: R,
}

/// Requests waiting for the dispatcher. A flush is due once `capacity`
/// samples are pending or the oldest request has waited `flush_timeout`.
#[derive(Debug)]
pub struct RequestBuffer<R> {
    pending: VecDeque<PendingRequest<R>>,
    samples: usize,
    capacity: usize,
    flush_timeout: Duration,
    next_id: u64,
}

impl<R> RequestBuffer<R> {
    pub fn new(capacity: usize, flush_timeout: Duration) -> Self {
        Self {
            pending: VecDeque::new(),
            samples: 0,
            capacity: capacity.max(1),
            flush_timeout,
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn flush_timeout(&self) -> Duration {
        self.flush_timeout
    }

    /// Pending samples across all requests.
    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn requests(&self) -> usize {
        self.pending.len()
    }

    /// Appends a request and returns its id.
    pub fn push(&mut self, samples: Vec<f32>, rows: usize, arrived: Instant, reply: R) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.samples += rows;
        self.pending.push_back(PendingRequest {
            id,
            samples,
            rows,
            arrived,
            reply,
        });
        id
    }

    /// When the oldest request times out, if any request is pending.
    pub fn deadline(&self) -> Option<Instant> {
        self.pending.front().map(|r| r.arrived + self.flush_timeout)
    }

    pub fn should_flush(&self, now: Instant) -> bool {
        if self.pending.is_empty() {
            return false;
        }
        self.samples >= self.capacity || self.deadline().is_some_and(|d| now >= d)
    }

    /// Removes every pending request, oldest first.
    pub fn take(&mut self) -> Vec<PendingRequest<R>> {
        self.samples = 0;
        self.pending.drain(..).collect()
    }
}
