use std::collections::{BTreeMap, BTreeSet, HashMap};

use coml_core::domain::{DeviceId, Digest, IdGen, ImageBlob, LabelId, ProjectId, SampleId, Split};
use coml_core::evaluation::{
    balance_stats, dashboard_order, evaluate_all, micro_accuracy, play, run_game, test_counts,
    weighted_accuracy, ClassificationRecord, GameRunner, MAX_ROUNDS,
};
use coml_core::replication::{Intent, OpKind, ReplicatedProject};
use coml_core::synth::{SynthSpec, PALETTE};
use coml_core::training::{ConfidenceVector, TrainingEngine};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A single-device project whose ops are sequenced as soon as they are made.
struct Fixture {
    project: ReplicatedProject,
    ids: IdGen,
    blobs: HashMap<Digest, ImageBlob>,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Fixture {
            project: ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(1)),
            ids: IdGen::seeded(seed),
            blobs: HashMap::new(),
        }
    }

    fn submit(&mut self, intent: Intent) -> OpKind {
        let mut op = self.project.local_submit(intent, &mut self.ids).unwrap();
        op.seq = self.project.applied_seq() + 1;
        self.project.apply(&op).unwrap();
        op.kind
    }

    fn label(&mut self, name: &str) -> LabelId {
        match self.submit(Intent::AddLabel { name: name.into() }) {
            OpKind::AddLabel { label_id, .. } => label_id,
            _ => unreachable!(),
        }
    }

    fn sample(&mut self, label: LabelId, split: Split, image: ImageBlob) -> SampleId {
        let blob = image.digest();
        self.blobs.insert(blob, image);
        match self.submit(Intent::AddSample {
            label,
            split,
            blob,
            created_at: 0,
            tags: BTreeSet::new(),
        }) {
            OpKind::AddSample { sample } => sample.id,
            _ => unreachable!(),
        }
    }
}

fn record(sample: u128, actual: u128, predicted: u128, recorded_at: u64) -> ClassificationRecord {
    ClassificationRecord {
        sample_id: SampleId::from_u128(sample),
        model_version: 1,
        actual: LabelId::from_u128(actual),
        predicted: LabelId::from_u128(predicted),
        confidence: ConfidenceVector(vec![1.0]),
        correct: actual == predicted,
        user_corrected_label: None,
        recorded_at,
    }
}

/// Random record set over up to 8 labels: one record per test image.
fn random_records(rng: &mut ChaCha8Rng) -> (Vec<ClassificationRecord>, BTreeMap<LabelId, usize>) {
    let labels = rng.random_range(1..=8u128);
    let mut counts = BTreeMap::new();
    let mut records = Vec::new();
    let mut next = 0u128;
    for l in 0..labels {
        let n = rng.random_range(0..40usize);
        counts.insert(LabelId::from_u128(l + 1), n);
        let p_correct: f64 = rng.random();
        for _ in 0..n {
            next += 1;
            let predicted = if rng.random_bool(p_correct) {
                l + 1
            } else {
                (l + 1) % labels + 1
            };
            records.push(record(next, l + 1, predicted, rng.random_range(0..1000)));
        }
    }
    (records, counts)
}

#[test]
fn weighted_equals_micro_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6_1);
    let mut checked = 0;
    while checked < 1000 {
        let (records, counts) = random_records(&mut rng);
        if counts.values().sum::<usize>() == 0 {
            assert!(weighted_accuracy(&records, &counts).is_err());
            continue;
        }
        let w = weighted_accuracy(&records, &counts).unwrap();
        let m = micro_accuracy(&records, &counts).unwrap();
        let brute = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
        assert!((w - m).abs() < 1e-12, "{w} vs {m}");
        assert!((w - brute).abs() < 1e-12);
        checked += 1;
    }
}

#[test]
fn plants_shaped_fixture_reports_093() {
    // Four labels, 174 test images, 162 classified correctly.
    let shape = [(48usize, 45usize), (44, 41), (43, 40), (39, 36)];
    let mut records = Vec::new();
    let mut counts = BTreeMap::new();
    let mut next = 0;
    for (l, &(n, c)) in shape.iter().enumerate() {
        let l = l as u128 + 1;
        counts.insert(LabelId::from_u128(l), n);
        for i in 0..n {
            next += 1;
            records.push(record(next, l, if i < c { l } else { l % 4 + 1 }, 0));
        }
    }
    assert_eq!(counts.values().sum::<usize>(), 174);
    let w = weighted_accuracy(&records, &counts).unwrap();
    assert!((w - 162.0 / 174.0).abs() < 1e-12);
    assert_eq!(format!("{w:.2}"), "0.93");
}

#[test]
fn makeup_shaped_balance() {
    let mut fx = Fixture::new(3);
    let names = ["eyeshadow", "lipstick", "blush", "mascara", "foundation", "eyeliner"];
    let tests = [46usize, 25, 107, 107, 107, 108];
    let trains = [60usize, 60, 60, 60, 60, 60];
    let img = SynthSpec::swatch([1, 2, 3]).render(0);
    let mut ids = Vec::new();
    for ((name, &te), &tr) in names.iter().zip(&tests).zip(&trains) {
        let l = fx.label(name);
        ids.push(l);
        for _ in 0..tr {
            fx.sample(l, Split::Training, img.clone());
        }
        for _ in 0..te {
            fx.sample(l, Split::Testing, img.clone());
        }
    }
    let b = balance_stats(fx.project.state());
    assert_eq!(format!("{:.1}", b[&ids[0]].test_pct), "9.2");
    assert_eq!(format!("{:.1}", b[&ids[1]].test_pct), "5.0");
    let total_test: f64 = b.values().map(|x| x.test_pct).sum();
    let total_train: f64 = b.values().map(|x| x.train_pct).sum();
    assert!((total_test - 100.0).abs() < 1e-9);
    assert!((total_train - 100.0).abs() < 1e-9);
    // Hand count.
    for (i, l) in ids.iter().enumerate() {
        assert!((b[l].test_pct - 100.0 * tests[i] as f64 / 500.0).abs() < 1e-12);
    }
}

#[test]
fn evaluate_all_matches_brute_force_and_skips_cascaded_samples() {
    let mut fx = Fixture::new(9);
    let mut labels = Vec::new();
    for (i, rgb) in PALETTE.iter().take(4).enumerate() {
        let l = fx.label(&format!("class{i}"));
        labels.push(l);
        for k in 0..8 {
            let mut spec = SynthSpec::swatch(*rgb);
            spec.noise = 60;
            fx.sample(l, Split::Training, spec.render(1000 * i as u64 + k));
        }
        for k in 0..5 {
            // Test images drift toward the next color so some are wrong.
            let next = PALETTE[(i + 1) % 4];
            let mix = [0, 1, 2].map(|c| ((u16::from(rgb[c]) * 3 + u16::from(next[c]) * 2) / 5) as u8);
            let mut spec = SynthSpec::swatch(mix);
            spec.noise = 60;
            fx.sample(l, Split::Testing, spec.render(5000 + 100 * i as u64 + k));
        }
    }
    let mut engine = TrainingEngine::new(DeviceId::from_u128(1));
    let model = engine.train(fx.project.state(), &fx.blobs, 7, 0).unwrap();
    let records = evaluate_all(fx.project.state(), &model, &fx.blobs, 42).unwrap();
    assert_eq!(records.len(), 20);
    for r in &records {
        let s = &fx.project.state().samples[&r.sample_id];
        let conf = model.classify(&fx.blobs[&s.blob]).unwrap();
        let best = (0..conf.0.len())
            .max_by(|&a, &b| conf.0[a].partial_cmp(&conf.0[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        assert_eq!(r.predicted, model.label_order[best]);
        assert_eq!(r.correct, model.label_order[best] == s.label);
        assert_eq!(r.confidence, conf);
        assert_eq!(r.model_version, model.version);
    }

    // Deleting a label drops its test images from the next evaluation.
    fx.submit(Intent::DeleteLabel { label: labels[0] });
    let after = evaluate_all(fx.project.state(), &model, &fx.blobs, 43).unwrap();
    assert_eq!(after.len(), 15);
    assert_eq!(after.len(), test_counts(fx.project.state()).values().sum::<usize>());
    assert!(after.iter().all(|r| r.actual != labels[0]));
}

#[test]
fn evaluate_all_without_test_data_is_empty() {
    let mut fx = Fixture::new(1);
    let a = fx.label("a");
    let b = fx.label("b");
    fx.sample(a, Split::Training, SynthSpec::swatch(PALETTE[0]).render(1));
    fx.sample(b, Split::Training, SynthSpec::swatch(PALETTE[1]).render(2));
    let model = TrainingEngine::new(DeviceId::from_u128(1))
        .train(fx.project.state(), &fx.blobs, 1, 0)
        .unwrap();
    assert!(evaluate_all(fx.project.state(), &model, &fx.blobs, 0).unwrap().is_empty());
}

#[test]
fn dashboard_two_wrong_three_right() {
    let recs = vec![
        record(1, 1, 1, 50),
        record(2, 1, 2, 10),
        record(3, 2, 2, 40),
        record(4, 2, 1, 20),
        record(5, 1, 1, 30),
    ];
    let order: Vec<u128> = dashboard_order(&recs).iter().map(|r| r.sample_id.as_u128()).collect();
    assert_eq!(order, vec![4, 2, 1, 3, 5]);
}

fn arb_records() -> impl Strategy<Value = Vec<ClassificationRecord>> {
    prop::collection::vec((0u128..4, 0u128..4, 0u64..6), 0..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (a, p, t))| record(i as u128 + 1, a, p, t))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn dashboard_misclassified_first_and_permutation_invariant(
        records in arb_records(),
        shuffle_seed in any::<u64>(),
    ) {
        let ordered = dashboard_order(&records);
        prop_assert_eq!(ordered.len(), records.len());
        if let Some(first_correct) = ordered.iter().position(|r| r.correct) {
            prop_assert!(ordered[first_correct..].iter().all(|r| r.correct));
        }
        for pair in ordered.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.correct == b.correct {
                prop_assert!(a.recorded_at > b.recorded_at
                    || (a.recorded_at == b.recorded_at && a.sample_id < b.sample_id));
            }
        }
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        prop_assert_eq!(dashboard_order(&shuffled), ordered);
    }

    #[test]
    fn game_score_bounds(confs in prop::collection::vec(-0.5f64..1.5, 0..30), seed in any::<u64>(), prior in 0.0f64..200.0) {
        let labels: Vec<LabelId> = (1..=5).map(LabelId::from_u128).collect();
        let mut it = confs.clone().into_iter();
        let session = play(labels.clone(), seed, prior, |_, _| Ok(it.next())).unwrap();
        prop_assert!(session.rounds.len() <= MAX_ROUNDS);
        prop_assert_eq!(session.rounds.len(), confs.len().min(MAX_ROUNDS));
        prop_assert!(session.total_score >= 0.0);
        prop_assert!(session.total_score <= 10.0 * session.rounds.len() as f64);
        prop_assert!(session.high_score >= prior);
        prop_assert!(session.high_score >= session.total_score);
        let sum: f64 = session.rounds.iter().map(|r| r.score).sum();
        prop_assert!((sum - session.total_score).abs() < 1e-12);
    }

    #[test]
    fn game_targets_cover_labels_before_repeating(seed in any::<u64>(), n in 1u128..8) {
        let labels: Vec<LabelId> = (1..=n).map(LabelId::from_u128).collect();
        let mut runner = GameRunner::new(labels.clone(), seed, 0.0).unwrap();
        let mut seen = Vec::new();
        while let Some(t) = runner.next_target() {
            seen.push(t);
            runner.finish_round(0.5);
        }
        prop_assert_eq!(seen.len(), MAX_ROUNDS);
        for chunk in seen.chunks(n as usize) {
            let distinct: BTreeSet<_> = chunk.iter().collect();
            prop_assert_eq!(distinct.len(), chunk.len());
        }
        let again = play(labels.clone(), seed, 0.0, |_, _| Ok(Some(0.5))).unwrap();
        let targets: Vec<_> = again.rounds.iter().map(|r| r.target).collect();
        prop_assert_eq!(targets, seen);
    }
}

#[test]
fn game_exact_scores() {
    let labels: Vec<LabelId> = (1..=4).map(LabelId::from_u128).collect();
    let one = play(labels.clone(), 1, 0.0, {
        let mut fed = false;
        move |_, _| Ok(if fed { None } else { fed = true; Some(0.75) })
    })
    .unwrap();
    assert_eq!(one.rounds[0].score, 7.5);

    let mut feed = [0.2, 0.5, 0.9].into_iter();
    let s = play(labels.clone(), 2, 0.0, |_, _| Ok(feed.next())).unwrap();
    assert_eq!(s.total_score, 16.0);
    assert_eq!(s.export().rounds.len(), 3);

    let full = play(labels.clone(), 3, 20.0, |_, _| Ok(Some(1.0))).unwrap();
    assert_eq!(full.rounds.len(), 18);
    assert_eq!(full.total_score, 180.0);
    assert_eq!(full.high_score, 180.0);
}

#[test]
fn game_with_real_model_feed() {
    let mut fx = Fixture::new(4);
    let red = fx.label("red");
    let blue = fx.label("blue");
    for k in 0..6 {
        fx.sample(red, Split::Training, SynthSpec::swatch(PALETTE[0]).render(k));
        fx.sample(blue, Split::Training, SynthSpec::swatch(PALETTE[1]).render(100 + k));
    }
    let model = TrainingEngine::new(DeviceId::from_u128(1))
        .train(fx.project.state(), &fx.blobs, 1, 0)
        .unwrap();
    let feed: Vec<ImageBlob> = (0..5).map(|k| SynthSpec::swatch(PALETTE[0]).render(500 + k)).collect();
    let session = run_game(&model, feed, 11, 0.0).unwrap();
    assert_eq!(session.rounds.len(), 5);
    for r in &session.rounds {
        let expected = if r.target == red { r.final_confidence > 0.5 } else { r.final_confidence < 0.5 };
        assert!(expected, "{r:?}");
    }
}
