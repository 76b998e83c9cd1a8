//! Allocation-matrix optimization and an asynchronous serving pipeline for
//! ensembles of predictive models.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod error;
pub mod memory;
pub mod model;
pub mod optimizer;
pub mod runtime;
pub mod server;

pub use error::{Error, Result};
pub use model::{
    num_segments, segment_bounds, validate_matrix, AllocationMatrix, ClusterSpec, DeviceKind, DeviceSpec,
    MatrixDocument, ModelSpec, Segment, SpecDocument, Validation, Violation,
};
