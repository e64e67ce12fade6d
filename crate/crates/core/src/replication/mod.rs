//! Operation-based replication: every device applies the same server-ordered
//! op stream and so converges to byte-identical state.

mod apply;
mod op;
mod replica;

pub use apply::{apply, ApplyError};
pub use op::{DatasetOp, NewSample, OpKind};
pub use replica::{Applied, Intent, ReplicatedProject, SeqTooHigh, ValidationError};
