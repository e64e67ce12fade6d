use std::collections::{BTreeMap, BTreeSet};

use coml_core::domain::{
    DeviceId, Digest, IdGen, LabelId, ProjectId, ProjectState, SampleId, Split, Stamp,
};
use coml_core::replication::{
    apply, Applied, ApplyError, DatasetOp, Intent, NewSample, OpKind, ReplicatedProject,
};
use proptest::prelude::*;

const NAMES: [&str; 4] = ["apple", "mango", "orange", "grapefruit"];

#[derive(Debug, Clone)]
enum Step {
    AddLabel(u8, u8),
    Rename(u8, u8),
    DeleteLabel(u8),
    AddSample(u8, u8, bool),
    DeleteSample(u8),
    Tag(u8, u8),
    Relabel(u8, u8),
}

fn step() -> impl Strategy<Value = (u8, u8, Step)> {
    let s = prop_oneof![
        4 => (0u8..5, 0u8..4).prop_map(|(l, n)| Step::AddLabel(l, n)),
        2 => (0u8..5, 0u8..4).prop_map(|(l, n)| Step::Rename(l, n)),
        1 => (0u8..5).prop_map(Step::DeleteLabel),
        6 => (0u8..12, 0u8..5, any::<bool>()).prop_map(|(s, l, t)| Step::AddSample(s, l, t)),
        2 => (0u8..12).prop_map(Step::DeleteSample),
        1 => (0u8..12, 0u8..3).prop_map(|(s, t)| Step::Tag(s, t)),
        1 => (0u8..12, 0u8..5).prop_map(|(s, l)| Step::Relabel(s, l)),
    ];
    (0u8..3, 1u8..4, s)
}

fn label(l: u8) -> LabelId {
    LabelId::from_u128(100 + u128::from(l))
}

fn sample(s: u8) -> SampleId {
    SampleId::from_u128(1000 + u128::from(s))
}

/// Turns raw steps into a sequenced op log. Ids come from small pools so
/// races (delete-before-add, duplicate names, relabel onto deleted labels)
/// are common.
fn build_log(steps: &[(u8, u8, Step)]) -> Vec<DatasetOp> {
    let mut lamport = 0u64;
    steps
        .iter()
        .enumerate()
        .map(|(i, (dev, bump, st))| {
            lamport += u64::from(*bump);
            let device = DeviceId::from_u128(u128::from(*dev) + 1);
            let kind = match st {
                Step::AddLabel(l, n) => OpKind::AddLabel {
                    label_id: label(*l),
                    name: NAMES[*n as usize].into(),
                },
                Step::Rename(l, n) => OpKind::RenameLabel {
                    label_id: label(*l),
                    name: NAMES[*n as usize].into(),
                    name_stamp: Stamp { lamport, device },
                },
                Step::DeleteLabel(l) => OpKind::DeleteLabel { label_id: label(*l) },
                Step::AddSample(s, l, test) => OpKind::AddSample {
                    sample: NewSample {
                        id: sample(*s),
                        label: label(*l),
                        split: if *test { Split::Testing } else { Split::Training },
                        blob: Digest([*s; 32]),
                        created_by: device,
                        created_at: i as u64,
                        tags: BTreeSet::new(),
                    },
                },
                Step::DeleteSample(s) => OpKind::DeleteSample { sample_id: sample(*s) },
                Step::Tag(s, t) => OpKind::TagSample {
                    sample_id: sample(*s),
                    tags: [format!("context:{t}")].into(),
                },
                Step::Relabel(s, l) => OpKind::RelabelSample {
                    sample_id: sample(*s),
                    label_id: label(*l),
                },
            };
            DatasetOp {
                op_id: coml_core::domain::OpId::from_u128(50_000 + i as u128),
                device,
                lamport,
                kind,
                seq: i as u64 + 1,
            }
        })
        .collect()
}

/// Independent brute-force computation of live (training, testing) counts
/// per live label, straight from the op log.
fn oracle_counts(log: &[DatasetOp]) -> BTreeMap<LabelId, (usize, usize)> {
    let label_live_at = |l: LabelId, t: usize| {
        let added = log[..t]
            .iter()
            .any(|o| matches!(&o.kind, OpKind::AddLabel { label_id, .. } if *label_id == l));
        let deleted = log[..t]
            .iter()
            .any(|o| matches!(&o.kind, OpKind::DeleteLabel { label_id } if *label_id == l));
        added && !deleted
    };
    let end = log.len();
    let mut counts: BTreeMap<LabelId, (usize, usize)> = BTreeMap::new();
    for l in (0..5).map(label) {
        if label_live_at(l, end) {
            counts.insert(l, (0, 0));
        }
    }
    for s in (0..12).map(sample) {
        let Some(add_at) = log.iter().position(
            |o| matches!(&o.kind, OpKind::AddSample { sample } if sample.id == s),
        ) else {
            continue;
        };
        if log
            .iter()
            .any(|o| matches!(&o.kind, OpKind::DeleteSample { sample_id } if *sample_id == s))
        {
            continue;
        }
        let OpKind::AddSample { sample: first } = &log[add_at].kind else { unreachable!() };
        let mut current = first.label;
        if !label_live_at(current, add_at) {
            continue;
        }
        let mut alive = true;
        for (t, o) in log.iter().enumerate().skip(add_at + 1) {
            if let OpKind::RelabelSample { sample_id, label_id } = &o.kind {
                if *sample_id == s && label_live_at(current, t) {
                    current = *label_id;
                    if !label_live_at(current, t) {
                        alive = false;
                        break;
                    }
                }
            }
        }
        if alive && label_live_at(current, end) {
            let c = counts.get_mut(&current).expect("live label");
            match first.split {
                Split::Training => c.0 += 1,
                Split::Testing => c.1 += 1,
            }
        }
    }
    counts
}

fn replay(log: &[DatasetOp]) -> ProjectState {
    let mut st = ProjectState::default();
    for op in log {
        apply(&mut st, op).unwrap();
    }
    st
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn counts_match_replay_oracle(steps in prop::collection::vec(step(), 0..80)) {
        let log = build_log(&steps);
        prop_assert_eq!(replay(&log).live_counts(), oracle_counts(&log));
    }

    #[test]
    fn tombstones_are_permanent_and_references_closed(steps in prop::collection::vec(step(), 0..80)) {
        let log = build_log(&steps);
        let mut st = ProjectState::default();
        let mut dead_samples = BTreeSet::new();
        let mut dead_labels = BTreeSet::new();
        for op in &log {
            apply(&mut st, op).unwrap();
            match &op.kind {
                OpKind::DeleteSample { sample_id } => { dead_samples.insert(*sample_id); }
                OpKind::DeleteLabel { label_id } => { dead_labels.insert(*label_id); }
                _ => {}
            }
            for s in &dead_samples {
                prop_assert!(!st.is_live_sample(*s));
            }
            for l in &dead_labels {
                prop_assert!(!st.is_live_label(*l));
            }
            for s in st.live_samples() {
                prop_assert!(st.is_live_label(s.label));
            }
        }
    }

    #[test]
    fn snapshot_plus_delta_equals_full_replay(
        steps in prop::collection::vec(step(), 1..60),
        cut in any::<prop::sample::Index>(),
    ) {
        let log = build_log(&steps);
        let mut source = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(9));
        source.apply_batch(&log).unwrap();
        let k = cut.index(log.len() + 1) as u64;

        let mut snap = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(8));
        snap.apply_batch(&source.delta_since(0).unwrap()[..k as usize]).unwrap();
        snap.apply_batch(source.delta_since(k).unwrap()).unwrap();
        prop_assert_eq!(snap.canonical_bytes(), source.canonical_bytes());

        // Catch-up is idempotent: replaying the same delta changes nothing.
        let before = snap.canonical_bytes();
        prop_assert_eq!(snap.apply_batch(source.delta_since(k).unwrap()).unwrap(), 0);
        prop_assert_eq!(snap.canonical_bytes(), before);
        prop_assert!(source.delta_since(source.applied_seq()).unwrap().is_empty());
    }

    /// A device interleaves its own optimistic ops with foreign sequenced
    /// ops; the cached view always equals a from-scratch recomputation, and
    /// once everything is confirmed the replica matches an observer that
    /// only ever saw sequenced ops.
    #[test]
    fn optimistic_apply_is_superseded_exactly(
        foreign in prop::collection::vec(step(), 0..40),
        plan in prop::collection::vec((0u8..6, 0u8..4, 0u8..3), 1..60),
    ) {
        let foreign_ops: Vec<DatasetOp> = build_log(&foreign)
            .into_iter()
            .map(|mut o| { o.seq = 0; o })
            .collect();
        let me = DeviceId::from_u128(77);
        let mut ids = IdGen::seeded(5);
        let mut local = ReplicatedProject::new(ProjectId::from_u128(1), me);
        let mut server: Vec<DatasetOp> = Vec::new();
        let mut in_flight: Vec<DatasetOp> = Vec::new();
        let mut next_foreign = foreign_ops.into_iter();

        for (action, pick, deliver) in plan {
            let view = local.state().clone();
            let labels: Vec<LabelId> = view.live_labels().map(|l| l.id).collect();
            let samples: Vec<SampleId> = view.live_samples().map(|s| s.id).collect();
            let intent = match action {
                0 => Some(Intent::AddLabel { name: format!("{}{}", NAMES[pick as usize], ids.op().short()) }),
                1 | 2 if !labels.is_empty() => Some(Intent::AddSample {
                    label: labels[pick as usize % labels.len()],
                    split: if pick % 2 == 0 { Split::Training } else { Split::Testing },
                    blob: Digest([pick; 32]),
                    created_at: 1,
                    tags: BTreeSet::new(),
                }),
                3 if !samples.is_empty() => Some(Intent::DeleteSample { sample: samples[pick as usize % samples.len()] }),
                4 if !labels.is_empty() => Some(Intent::DeleteLabel { label: labels[pick as usize % labels.len()] }),
                5 if !labels.is_empty() => Some(Intent::RenameLabel {
                    label: labels[pick as usize % labels.len()],
                    name: format!("renamed{}", ids.op().short()),
                }),
                _ => None,
            };
            if let Some(intent) = intent {
                in_flight.push(local.local_submit(intent, &mut ids).unwrap());
            }
            // The sequencer interleaves a foreign op, or one of ours.
            let next = match deliver {
                0 => next_foreign.next(),
                1 if !in_flight.is_empty() => Some(in_flight.remove(0)),
                _ => None,
            };
            if let Some(mut op) = next {
                op.seq = server.len() as u64 + 1;
                server.push(op.clone());
                prop_assert_eq!(local.apply(&op).unwrap(), Applied::New);
            }
            prop_assert_eq!(local.state(), &local.recomputed_view());
        }
        for mut op in in_flight.into_iter().chain(next_foreign) {
            op.seq = server.len() as u64 + 1;
            server.push(op.clone());
            local.apply(&op).unwrap();
            prop_assert_eq!(local.state(), &local.recomputed_view());
        }
        prop_assert!(local.pending().is_empty());
        let observer = replay(&server);
        prop_assert_eq!(local.state(), &observer);
        prop_assert_eq!(local.canonical_bytes(), observer.canonical_bytes());
        prop_assert_eq!(local.applied_seq(), server.len() as u64);
    }
}

#[test]
fn replaying_onto_empty_project_reproduces_digest() {
    let steps: Vec<(u8, u8, Step)> = (0..40u8)
        .map(|i| (i % 3, 1, if i % 4 == 0 { Step::AddLabel(i % 5, i % 4) } else { Step::AddSample(i % 12, i % 5, i % 2 == 0) }))
        .collect();
    let log = build_log(&steps);
    let mut a = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(1));
    a.apply_batch(&log).unwrap();
    let mut b = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(2));
    b.apply_batch(a.delta_since(0).unwrap()).unwrap();
    assert_eq!(a.canonical_digest(), b.canonical_digest());
    assert_eq!(ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(1)).canonical_bytes(),
               ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(2)).canonical_bytes());
}

#[test]
fn gap_and_conflicting_seq_are_rejected() {
    let log = build_log(&[(0, 1, Step::AddLabel(0, 0)), (0, 1, Step::AddLabel(1, 1))]);
    let mut r = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(1));
    assert!(matches!(r.apply(&log[1]), Err(ApplyError::Gap { expected: 1, got: 2 })));
    r.apply(&log[0]).unwrap();
    let mut imposter = log[1].clone();
    imposter.seq = 1;
    assert!(matches!(r.apply(&imposter), Err(ApplyError::MalformedOp(_))));
    assert_eq!(r.applied_seq(), 1);
}

#[test]
fn disjoint_clients_union() {
    let mut server: Vec<DatasetOp> = Vec::new();
    let mut ids_a = IdGen::seeded(1);
    let mut ids_b = IdGen::seeded(2);
    let mut a = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(1));
    let mut b = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(2));
    let seq = |op: DatasetOp, server: &mut Vec<DatasetOp>| {
        let mut op = op;
        op.seq = server.len() as u64 + 1;
        server.push(op);
    };
    let op = a.local_submit(Intent::AddLabel { name: "kiwi".into() }, &mut ids_a).unwrap();
    let OpKind::AddLabel { label_id, .. } = op.kind.clone() else { unreachable!() };
    seq(op, &mut server);
    b.apply_batch(&server).unwrap();
    a.apply_batch(&server).unwrap();
    let mut ops = Vec::new();
    for i in 0..10u8 {
        for (r, ids) in [(&mut a, &mut ids_a), (&mut b, &mut ids_b)] {
            ops.push(
                r.local_submit(
                    Intent::AddSample {
                        label: label_id,
                        split: Split::Training,
                        blob: Digest([i; 32]),
                        created_at: u64::from(i),
                        tags: BTreeSet::new(),
                    },
                    ids,
                )
                .unwrap(),
            );
        }
    }
    for op in ops {
        seq(op, &mut server);
    }
    a.apply_batch(&server).unwrap();
    b.apply_batch(&server).unwrap();
    assert_eq!(a.state().live_samples().count(), 20);
    assert_eq!(a.canonical_digest(), b.canonical_digest());
    assert!(a.pending().is_empty() && b.pending().is_empty());
}
