//! Discrete-event simulation of a single-accelerator inference server.
//!
//! Requests arrive open-loop, traverse an unrolled model graph node by node,
//! and are batched by one of five policies: serial execution, whole-graph
//! batching with a time window, cellular batching over shared-weight cells,
//! lazy node-level batching gated by an SLA slack predictor, and an oracle
//! variant of lazy batching that knows exact batched latencies.

pub mod bst;
pub mod cost;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod slack;
pub mod sweep;
pub mod traffic;

pub use error::{Result, SimError};
pub use model::{Catalog, Micros, ModelGraph, NodeCursor, NodeKind};
