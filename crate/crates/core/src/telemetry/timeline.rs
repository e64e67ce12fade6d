//! Per-device activity timelines: one row per device, a dot per action and a
//! vertical marker per training run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DeviceId, Digest, SampleId};

use super::{ActivityEvent, EventKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no events between {start_ms} and {end_ms}")]
pub struct EmptyWindow {
    pub start_ms: u64,
    pub end_ms: u64,
}

/// Inclusive time range in wall-clock milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Window {
    /// Smallest window holding every event.
    pub fn covering(events: &[ActivityEvent]) -> Option<Window> {
        let start_ms = events.iter().map(|e| e.ts).min()?;
        let end_ms = events.iter().map(|e| e.ts).max()?;
        Some(Window { start_ms, end_ms })
    }

    pub fn contains(&self, ts: u64) -> bool {
        (self.start_ms..=self.end_ms).contains(&ts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub ts: u64,
    pub action: String,
    /// Thumbnail digest for added images; omitted once the image is deleted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMarker {
    pub ts: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub device: DeviceId,
    pub dots: Vec<Dot>,
    pub train_markers: Vec<TrainMarker>,
}

impl TimelineRow {
    pub fn event_count(&self) -> usize {
        self.dots.len() + self.train_markers.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub window: Window,
    pub rows: Vec<TimelineRow>,
}

pub fn timeline_export(events: &[ActivityEvent], window: Window) -> Result<Timeline, EmptyWindow> {
    let deleted: BTreeSet<SampleId> = events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::SampleDeleted { sample_id } => Some(sample_id),
            _ => None,
        })
        .collect();

    let mut rows: BTreeMap<DeviceId, TimelineRow> = BTreeMap::new();
    for e in events.iter().filter(|e| window.contains(e.ts)) {
        let row = rows.entry(e.device).or_insert_with(|| TimelineRow {
            device: e.device,
            dots: Vec::new(),
            train_markers: Vec::new(),
        });
        match &e.kind {
            EventKind::ModelTrained { version, .. } => row.train_markers.push(TrainMarker {
                ts: e.ts,
                version: *version,
            }),
            EventKind::SampleAdded {
                sample_id, blob, ..
            } => row.dots.push(Dot {
                ts: e.ts,
                action: e.kind.name().to_string(),
                blob: blob.filter(|_| !deleted.contains(sample_id)),
            }),
            other => row.dots.push(Dot {
                ts: e.ts,
                action: other.name().to_string(),
                blob: None,
            }),
        }
    }
    if rows.is_empty() {
        return Err(EmptyWindow {
            start_ms: window.start_ms,
            end_ms: window.end_ms,
        });
    }
    Ok(Timeline {
        window,
        rows: rows.into_values().collect(),
    })
}

const SVG_WIDTH: f64 = 960.0;
const LABEL_WIDTH: f64 = 120.0;
const ROW_HEIGHT: f64 = 36.0;

fn dot_color(action: &str) -> &'static str {
    match action {
        "SampleAdded" => "#2b7bb9",
        "SampleDeleted" => "#c0392b",
        "LiveClassificationStarted" => "#8e44ad",
        "GameStarted" | "GameEnded" => "#e67e22",
        _ => "#7f8c8d",
    }
}

/// Renders a timeline as a standalone SVG document.
pub fn timeline_svg(t: &Timeline) -> String {
    let span = (t.window.end_ms - t.window.start_ms).max(1) as f64;
    let plot = SVG_WIDTH - LABEL_WIDTH - 10.0;
    let x = |ts: u64| LABEL_WIDTH + plot * (ts - t.window.start_ms) as f64 / span;
    let height = ROW_HEIGHT * t.rows.len() as f64 + 20.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{height}" viewBox="0 0 {SVG_WIDTH} {height}">"#
    );
    for (i, row) in t.rows.iter().enumerate() {
        let top = 10.0 + ROW_HEIGHT * i as f64;
        let mid = top + ROW_HEIGHT / 2.0;
        let _ = writeln!(
            out,
            r#"  <g class="row" data-device="{}"><text x="4" y="{:.1}" font-size="11" font-family="monospace">{}</text>"#,
            row.device,
            mid + 4.0,
            row.device.short()
        );
        let _ = writeln!(
            out,
            r##"    <line x1="{LABEL_WIDTH}" y1="{mid:.1}" x2="{:.1}" y2="{mid:.1}" stroke="#ddd"/>"##,
            SVG_WIDTH - 10.0
        );
        for m in &row.train_markers {
            let _ = writeln!(
                out,
                r##"    <line class="train" x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="#27ae60" stroke-width="2"><title>model v{3}</title></line>"##,
                x(m.ts),
                top + 2.0,
                top + ROW_HEIGHT - 2.0,
                m.version
            );
        }
        for d in &row.dots {
            let _ = writeln!(
                out,
                r#"    <circle class="dot" cx="{:.1}" cy="{mid:.1}" r="4" fill="{}"><title>{}</title></circle>"#,
                x(d.ts),
                dot_color(&d.action),
                d.action
            );
        }
        out.push_str("  </g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::domain::{EventId, LabelId, ProjectId, Split};

    fn ev(device: u128, ts: u64, kind: EventKind) -> ActivityEvent {
        ActivityEvent {
            event_id: EventId::from_u128(ts as u128 + 1),
            project: ProjectId::from_u128(1),
            device: DeviceId::from_u128(device),
            ts,
            kind,
        }
    }

    fn added(sample: u128, digest: u8) -> EventKind {
        EventKind::SampleAdded {
            sample_id: SampleId::from_u128(sample),
            label: LabelId::from_u128(1),
            split: Split::Training,
            blob: Some(Digest([digest; 32])),
        }
    }

    fn trained() -> EventKind {
        EventKind::ModelTrained {
            version: 1,
            per_label_test_correct: BTreeMap::new(),
        }
    }

    #[test]
    fn three_adds_and_a_train() {
        let events = vec![
            ev(1, 10, added(1, 1)),
            ev(1, 20, added(2, 2)),
            ev(1, 30, added(3, 3)),
            ev(1, 40, trained()),
        ];
        let t = timeline_export(&events, Window::covering(&events).unwrap()).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].dots.len(), 3);
        assert_eq!(t.rows[0].train_markers.len(), 1);
        let svg = timeline_svg(&t);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("class=\"train\"").count(), 1);
    }

    #[test]
    fn window_without_events() {
        let events = vec![ev(1, 10, added(1, 1))];
        let w = Window {
            start_ms: 100,
            end_ms: 200,
        };
        assert_eq!(
            timeline_export(&events, w),
            Err(EmptyWindow {
                start_ms: 100,
                end_ms: 200
            })
        );
    }

    #[test]
    fn deleted_images_are_redacted() {
        let events = vec![
            ev(1, 10, added(1, 1)),
            ev(1, 20, added(2, 2)),
            ev(2, 30, EventKind::SampleDeleted {
                sample_id: SampleId::from_u128(1),
            }),
        ];
        let t = timeline_export(&events, Window::covering(&events).unwrap()).unwrap();
        assert_eq!(t.rows[0].dots[0].blob, None);
        assert_eq!(t.rows[0].dots[1].blob, Some(Digest([2; 32])));
        let json = serde_json::to_string(&t).unwrap();
        assert!(!json.contains(&Digest([1; 32]).to_hex()));
    }
}
