//! The sequencing server that gives every replica of a project the same
//! total order of dataset ops, plus the client that talks to it.

pub mod client;
pub mod protocol;
pub mod sequencer;
pub mod server;
pub mod sim;
pub mod store;

pub use client::{SyncClient, SyncError};
pub use protocol::{ErrorCode, Message, Token};
pub use sequencer::{Sequenced, SequenceError, Sequencer};
pub use server::{Server, ServerConfig, ServerHandle, DEFAULT_MAX_BLOB_BYTES};
pub use store::{BlobDir, ProjectMeta, ProjectStore, StoreError};
