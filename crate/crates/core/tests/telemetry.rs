use std::collections::BTreeMap;

use coml_core::domain::{DeviceId, Digest, EventId, LabelId, ProjectId, SampleId, Split};
use coml_core::telemetry::{
    retrain_stats, timeline_export, timeline_svg, ActivityEvent, ActivityLog, EventKind, Window,
};
use proptest::prelude::*;

fn kind(k: u8, n: u64) -> EventKind {
    match k % 4 {
        0 => EventKind::SampleAdded {
            sample_id: SampleId::from_u128(u128::from(n) + 1),
            label: LabelId::from_u128(1),
            split: if n % 2 == 0 { Split::Training } else { Split::Testing },
            blob: Some(Digest([n as u8; 32])),
        },
        1 => EventKind::SampleDeleted {
            sample_id: SampleId::from_u128(u128::from(n / 2) + 1),
        },
        2 => EventKind::ModelTrained {
            version: n,
            per_label_test_correct: BTreeMap::from([(LabelId::from_u128(1), (1, 2))]),
        },
        _ => EventKind::GameEnded { total_score: n as f64 / 4.0 },
    }
}

proptest! {
    /// Three devices with jittery, sometimes regressing clocks interleave
    /// into one log; each device's subsequence stays ordered and the file
    /// round-trips byte for byte.
    #[test]
    fn interleaved_devices_stay_ordered(
        raw in prop::collection::vec((0u8..3, 0u64..10_000, any::<u8>()), 0..200),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.ndjson");
        let mut log = ActivityLog::open(&path).unwrap();
        for (i, (dev, ts, k)) in raw.iter().enumerate() {
            log.record(ActivityEvent {
                event_id: EventId::from_u128(i as u128 + 1),
                project: ProjectId::from_u128(1),
                device: DeviceId::from_u128(u128::from(*dev) + 1),
                ts: *ts,
                kind: kind(*k, i as u64),
            }).unwrap();
        }
        prop_assert_eq!(log.len(), raw.len());
        for dev in 1..=3u128 {
            let ts: Vec<u64> = log.events().iter()
                .filter(|e| e.device == DeviceId::from_u128(dev))
                .map(|e| e.ts)
                .collect();
            prop_assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        }
        let on_disk = std::fs::read_to_string(&path).unwrap();
        prop_assert_eq!(&on_disk, &log.to_ndjson());
        let reopened = ActivityLog::open(&path).unwrap();
        prop_assert_eq!(reopened.events(), log.events());
        prop_assert_eq!(retrain_stats(reopened.events()), retrain_stats(log.events()));

        if let Some(window) = Window::covering(log.events()) {
            let t = timeline_export(log.events(), window).unwrap();
            for row in &t.rows {
                let raw_count = log.events().iter().filter(|e| e.device == row.device).count();
                prop_assert_eq!(row.event_count(), raw_count);
            }
            let svg = timeline_svg(&t);
            let trains = log.events().iter().filter(|e| matches!(e.kind, EventKind::ModelTrained { .. })).count();
            prop_assert_eq!(svg.matches("class=\"train\"").count(), trains);
        }
    }
}

#[test]
fn field_order_is_fixed() {
    let e = ActivityEvent {
        event_id: EventId::from_u128(1),
        project: ProjectId::from_u128(2),
        device: DeviceId::from_u128(3),
        ts: 4,
        kind: EventKind::GameStarted { seed: 5 },
    };
    let line = serde_json::to_string(&e).unwrap();
    let keys = ["\"event_id\"", "\"project\"", "\"device\"", "\"ts\"", "\"kind\"", "\"type\"", "\"seed\""];
    let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
}

#[test]
fn partial_window_counts() {
    let events: Vec<ActivityEvent> = (0..30u64)
        .map(|i| ActivityEvent {
            event_id: EventId::from_u128(u128::from(i) + 1),
            project: ProjectId::from_u128(1),
            device: DeviceId::from_u128(u128::from(i % 3) + 1),
            ts: i * 100,
            kind: kind((i % 3) as u8 * 2, i),
        })
        .collect();
    let window = Window { start_ms: 500, end_ms: 1900 };
    let t = timeline_export(&events, window).unwrap();
    for row in &t.rows {
        let expected = events
            .iter()
            .filter(|e| e.device == row.device && window.contains(e.ts))
            .count();
        assert_eq!(row.event_count(), expected);
    }
    assert_eq!(t.rows.iter().map(|r| r.event_count()).sum::<usize>(), 15);
}
