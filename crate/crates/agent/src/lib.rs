//! The per-device client: one replica of a project, the locally trained
//! model and its verdicts, the activity log, and a local API that the CLI
//! and the web UI both speak.

mod agent;
pub mod api;
mod clock;

pub use agent::{
    hex_digest, Agent, AgentConfig, AgentError, Connection, DashboardItem, DashboardPage,
    LabelConfidence, LabelStats, PhotoResult, RecordView, Remote, RetrainOutcome, RoundResult,
    Stats, LIVE_MAX_PER_SEC, PAGE_SIZE,
};
pub use clock::{Clock, ManualClock, SystemClock};
