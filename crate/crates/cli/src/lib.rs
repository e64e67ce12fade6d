//! Operator tooling: the `coml` binary's commands as a library, plus the
//! session-script runner and bundled fixture scripts.

pub mod import;
pub mod script;

/// Exit codes of the `coml` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const SCRIPT: i32 = 2;
    pub const CONNECTIVITY: i32 = 3;
    pub const DATA: i32 = 4;
}

/// Scripts shipped with the binary, by name.
pub mod fixtures {
    /// Three collectors build a four-fruit classifier.
    pub const FRUIT_SALAD: &str = include_str!("../fixtures/fruit-salad.ndjson");
    /// Three teammates over a camp day; each device retrains 13 times.
    pub const CAMP_DAY: &str = include_str!("../fixtures/camp-day.ndjson");

    pub fn by_name(name: &str) -> Option<&'static str> {
        match name {
            "fruit-salad" => Some(FRUIT_SALAD),
            "camp-day" => Some(CAMP_DAY),
            _ => None,
        }
    }

    pub const NAMES: [&str; 2] = ["fruit-salad", "camp-day"];
}

use coml_agent::AgentError;
use script::RunError;

/// Maps an agent failure onto the exit-code contract.
pub fn agent_exit_code(e: &AgentError) -> i32 {
    if e.is_connectivity() {
        exit::CONNECTIVITY
    } else {
        match e {
            AgentError::Image(_)
            | AgentError::Encoding(_)
            | AgentError::Io(_)
            | AgentError::State(_)
            | AgentError::Train(_)
            | AgentError::Validation(_)
            | AgentError::UnknownLabel(_) => exit::DATA,
            _ => exit::SCRIPT,
        }
    }
}

pub fn run_exit_code(e: &RunError) -> i32 {
    match e {
        RunError::Script(_) => exit::SCRIPT,
        RunError::Agent { source, .. } if source.is_connectivity() => exit::CONNECTIVITY,
        RunError::Agent { .. } => exit::SCRIPT,
        RunError::Server(_) => exit::CONNECTIVITY,
    }
}
