//! Append-only activity log (NDJSON, one event per line) and the analytics
//! computed from it.

mod stats;
mod timeline;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DeviceId, Digest, EventId, LabelId, ProjectId, SampleId, Split};

pub use stats::{retrain_stats, RetrainStats};
pub use timeline::{
    timeline_export, timeline_svg, Dot, EmptyWindow, Timeline, TimelineRow, TrainMarker, Window,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EventKind {
    SampleAdded {
        sample_id: SampleId,
        label: LabelId,
        split: Split,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blob: Option<Digest>,
    },
    SampleDeleted {
        sample_id: SampleId,
    },
    ModelTrained {
        version: u64,
        /// label -> (correct, total) over the label's test images.
        per_label_test_correct: BTreeMap<LabelId, (usize, usize)>,
    },
    LiveClassificationStarted,
    GameStarted {
        seed: u64,
    },
    GameEnded {
        total_score: f64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SampleAdded { .. } => "SampleAdded",
            EventKind::SampleDeleted { .. } => "SampleDeleted",
            EventKind::ModelTrained { .. } => "ModelTrained",
            EventKind::LiveClassificationStarted => "LiveClassificationStarted",
            EventKind::GameStarted { .. } => "GameStarted",
            EventKind::GameEnded { .. } => "GameEnded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub event_id: EventId,
    pub project: ProjectId,
    pub device: DeviceId,
    /// Wall-clock milliseconds.
    pub ts: u64,
    pub kind: EventKind,
}

/// In-memory event log with an optional NDJSON file behind it.
#[derive(Debug, Default)]
pub struct ActivityLog {
    events: Vec<ActivityEvent>,
    last_ts: HashMap<DeviceId, u64>,
    sink: Option<File>,
}

impl ActivityLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) an NDJSON log file, loading existing events. New
    /// events are appended to the file.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut log = if path.exists() {
            Self::read_ndjson(BufReader::new(File::open(path)?))?
        } else {
            Self::new()
        };
        log.sink = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(log)
    }

    pub fn read_ndjson(reader: impl BufRead) -> io::Result<Self> {
        let mut log = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: ActivityEvent = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1))
            })?;
            log.push(event);
        }
        Ok(log)
    }

    pub fn from_events(events: impl IntoIterator<Item = ActivityEvent>) -> Self {
        let mut log = Self::new();
        for e in events {
            log.push(e);
        }
        log
    }

    fn push(&mut self, mut event: ActivityEvent) -> &ActivityEvent {
        let last = self.last_ts.entry(event.device).or_insert(0);
        // Clock regressions are clamped so each device's events stay ordered.
        event.ts = event.ts.max(*last);
        *last = event.ts;
        self.events.push(event);
        self.events.last().expect("just pushed")
    }

    /// Appends an event, writing it through to the backing file if any.
    pub fn record(&mut self, event: ActivityEvent) -> io::Result<&ActivityEvent> {
        let mut sink = self.sink.take();
        let stored = self.push(event).clone();
        let res = match sink.as_mut() {
            Some(f) => {
                let mut line = serde_json::to_vec(&stored).map_err(io::Error::other)?;
                line.push(b'\n');
                f.write_all(&line).and_then(|()| f.flush())
            }
            None => Ok(()),
        };
        self.sink = sink;
        res.map(|()| self.events.last().expect("just pushed"))
    }

    pub fn events(&self) -> &[ActivityEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_ndjson(&self) -> String {
        to_ndjson(&self.events)
    }
}

pub fn to_ndjson(events: &[ActivityEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}
