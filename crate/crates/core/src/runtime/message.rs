use std::sync::Arc;

use super::store::SampleStore;

/// Wire tag of the out-of-memory control message.
pub const OOM_TAG: i64 = -1;
/// Wire tag of the worker-ready control message.
pub const READY_TAG: i64 = -2;
/// Wire tag asking a worker to exit (model queues only).
pub const SHUTDOWN_TAG: i64 = -1;

/// The samples of one run together with its segmentation.
#[derive(Debug)]
pub struct Job {
    pub store: Arc<SampleStore>,
    pub segment_size: usize,
}

/// Message on a model's input queue.
#[derive(Clone, Debug)]
pub enum WorkItem {
    Segment { id: usize, job: Arc<Job> },
    Shutdown,
}

impl WorkItem {
    pub fn wire_tag(&self) -> i64 {
        match self {
            WorkItem::Segment { id, .. } => *id as i64,
            WorkItem::Shutdown => SHUTDOWN_TAG,
        }
    }
}

/// Message on the prediction queue.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictionMessage {
    /// Predictions of `model` for every sample of `segment`, row-major.
    Data {
        segment: usize,
        model: usize,
        worker: usize,
        block: Vec<f32>,
    },
    Oom { worker: usize, model: usize, device: usize },
    Ready { worker: usize },
    /// A stage died; not part of the triplet protocol.
    Failed { worker: usize, reason: String },
}

impl PredictionMessage {
    pub fn wire_tag(&self) -> i64 {
        match self {
            PredictionMessage::Data { segment, .. } => *segment as i64,
            PredictionMessage::Oom { .. } | PredictionMessage::Failed { .. } => OOM_TAG,
            PredictionMessage::Ready { .. } => READY_TAG,
        }
    }
}
