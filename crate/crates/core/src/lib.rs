//! Shared dataset state, replication, training, evaluation and activity
//! analytics for collaborative image-classifier building.
//!
//! Everything here is synchronous and free of network I/O; the sync server
//! and device agent crates build on it.

pub mod domain;
pub mod evaluation;
pub mod replication;
pub mod synth;
pub mod telemetry;
pub mod training;
pub mod wire;
