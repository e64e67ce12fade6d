use std::collections::{BTreeSet, HashMap};

use coml_core::domain::{DeviceId, Digest, IdGen, ImageBlob, ProjectId, Split};
use coml_core::replication::{Intent, OpKind, ReplicatedProject};
use coml_core::synth::SynthSpec;
use coml_core::training::softmax::{argmax, fit_traced, loss_and_gradient, softmax, Params};
use coml_core::training::{FeatureExtractor, HistPool, Hyper, TrainError, TrainingEngine, FEATURE_DIM};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn features_match_reference_implementation() {
    for case in ["random64", "random37x23"] {
        let img = ImageBlob::from_ppm(&std::fs::read(fixture(&format!("{case}.ppm"))).unwrap()).unwrap();
        let want: Vec<f64> = std::fs::read_to_string(fixture(&format!("{case}.features.txt")))
            .unwrap()
            .lines()
            .map(|l| l.parse().unwrap())
            .collect();
        let got = HistPool.extract(&img);
        assert_eq!(got.values().len(), want.len());
        let worst = got
            .values()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{case}: max abs diff {worst:e}");
    }
}

#[test]
fn features_are_bit_reproducible() {
    let img = SynthSpec::swatch([90, 120, 30]).render(3);
    let copy = ImageBlob::from_ppm(&img.to_ppm()).unwrap();
    let a: Vec<u64> = HistPool.extract(&img).values().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = HistPool.extract(&copy).values().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

// Central finite differences of the objective, computed independently of the
// analytic gradient path.
fn numeric_gradient(params: &Params, xs: &[Vec<f64>], ys: &[usize], l2: f64, h: f64) -> Params {
    let batch: Vec<usize> = (0..xs.len()).collect();
    let objective = |p: &Params| {
        let mut loss = 0.0;
        for &i in &batch {
            let z: Vec<f64> = (0..p.classes)
                .map(|k| {
                    p.bias[k]
                        + (0..p.dim)
                            .map(|j| p.weights[k * p.dim + j] * xs[i][j])
                            .sum::<f64>()
                })
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[ys[i]];
        }
        loss / batch.len() as f64 + 0.5 * l2 * p.weights.iter().map(|w| w * w).sum::<f64>()
    };
    let mut grad = Params::zeros(params.classes, params.dim);
    let mut probe = params.clone();
    for i in 0..params.weights.len() {
        let w = params.weights[i];
        probe.weights[i] = w + h;
        let up = objective(&probe);
        probe.weights[i] = w - h;
        let down = objective(&probe);
        probe.weights[i] = w;
        grad.weights[i] = (up - down) / (2.0 * h);
    }
    for k in 0..params.bias.len() {
        let b = params.bias[k];
        probe.bias[k] = b + h;
        let up = objective(&probe);
        probe.bias[k] = b - h;
        let down = objective(&probe);
        probe.bias[k] = b;
        grad.bias[k] = (up - down) / (2.0 * h);
    }
    grad
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Params, Vec<Vec<f64>>, Vec<usize>) {
    let classes = rng.random_range(2..=6);
    let dim = if rng.random_bool(0.2) { FEATURE_DIM } else { rng.random_range(2..=40) };
    let n = rng.random_range(1..=10);
    let mut params = Params::zeros(classes, dim);
    for w in params.weights.iter_mut().chain(params.bias.iter_mut()) {
        *w = rng.random_range(-2.0..2.0);
    }
    let xs = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let ys = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (params, xs, ys)
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6752_4144);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (params, xs, ys) = random_instance(&mut rng);
        let l2 = 1e-4;
        let batch: Vec<usize> = (0..xs.len()).collect();
        let (_, analytic) = loss_and_gradient(&params, &xs, &ys, &batch, l2);
        let numeric = numeric_gradient(&params, &xs, &ys, l2, 1e-5);
        for (a, n) in analytic
            .weights
            .iter()
            .chain(&analytic.bias)
            .zip(numeric.weights.iter().chain(&numeric.bias))
        {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

fn project_with(labels: &[([u8; 3], usize, usize)], seed: u64) -> (ReplicatedProject, HashMap<Digest, ImageBlob>) {
    let mut ids = IdGen::seeded(seed);
    let mut r = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(2));
    let mut blobs = HashMap::new();
    let mut n = 0;
    for (li, (rgb, train, test)) in labels.iter().enumerate() {
        let op = r
            .local_submit(Intent::AddLabel { name: format!("label{li}") }, &mut ids)
            .unwrap();
        let OpKind::AddLabel { label_id, .. } = op.kind else { unreachable!() };
        for (split, count) in [(Split::Training, *train), (Split::Testing, *test)] {
            for _ in 0..count {
                n += 1;
                let img = SynthSpec::swatch(*rgb).render(seed * 1000 + n);
                r.local_submit(
                    Intent::AddSample {
                        label: label_id,
                        split,
                        blob: img.digest(),
                        created_at: n,
                        tags: BTreeSet::new(),
                    },
                    &mut ids,
                )
                .unwrap();
                blobs.insert(img.digest(), img);
            }
        }
    }
    (r, blobs)
}

#[test]
fn separable_swatches_reach_full_training_accuracy() {
    let (r, blobs) = project_with(&[([255, 0, 0], 20, 0), ([0, 0, 255], 20, 0)], 1);
    let mut engine = TrainingEngine::new(DeviceId::from_u128(2));
    let model = engine.train(r.state(), &blobs, 42, 0).unwrap();
    assert_eq!(model.label_order.len(), 2);
    for s in r.state().live_samples() {
        let conf = model.classify(&blobs[&s.blob]).unwrap();
        assert_eq!(model.label_at(conf.top1()), s.label);
    }
}

#[test]
fn same_seed_same_weights_and_versions_increase() {
    let (r, blobs) = project_with(&[([200, 30, 30], 15, 0), ([30, 200, 30], 15, 0), ([30, 30, 200], 15, 0)], 2);
    let mut engine = TrainingEngine::new(DeviceId::from_u128(2));
    let a = engine.train(r.state(), &blobs, 7, 0).unwrap();
    let b = engine.train(r.state(), &blobs, 7, 0).unwrap();
    let bits = |m: &coml_core::training::TrainedModel| -> Vec<u64> {
        m.params.weights.iter().chain(&m.params.bias).map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!((a.version, b.version), (1, 2));
    let mut fresh = TrainingEngine::new(DeviceId::from_u128(2));
    assert_eq!(bits(&fresh.train(r.state(), &blobs, 7, 0).unwrap()), bits(&a));
    let c = engine.train(r.state(), &blobs, 8, 0).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn training_needs_two_labels() {
    let (r, blobs) = project_with(&[([255, 0, 0], 5, 0), ([0, 255, 0], 0, 3)], 3);
    let mut engine = TrainingEngine::new(DeviceId::from_u128(2));
    assert!(matches!(
        engine.train(r.state(), &blobs, 1, 0),
        Err(TrainError::InsufficientData(1))
    ));
    let empty = ReplicatedProject::new(ProjectId::from_u128(1), DeviceId::from_u128(2));
    assert!(matches!(
        engine.train(empty.state(), &blobs, 1, 0),
        Err(TrainError::InsufficientData(0))
    ));
    assert_eq!(engine.last_version(), 0);
}

#[test]
fn missing_blob_is_reported() {
    let (r, mut blobs) = project_with(&[([255, 0, 0], 2, 0), ([0, 255, 0], 2, 0)], 4);
    let victim = *blobs.keys().next().unwrap();
    blobs.remove(&victim);
    let mut engine = TrainingEngine::new(DeviceId::from_u128(2));
    assert!(matches!(
        engine.train(r.state(), &blobs, 1, 0),
        Err(TrainError::MissingBlob(d)) if d == victim
    ));
}

#[test]
fn full_batch_descent_never_increases_loss() {
    let (r, blobs) = project_with(
        &[([180, 60, 60], 12, 0), ([60, 180, 60], 12, 0), ([120, 120, 120], 12, 0)],
        5,
    );
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let labels: Vec<_> = r.state().live_labels().map(|l| l.id).collect();
    for s in r.state().live_samples() {
        xs.push(HistPool.extract(&blobs[&s.blob]).into_inner());
        ys.push(labels.iter().position(|l| *l == s.label).unwrap());
    }
    let hyper = Hyper {
        batch: usize::MAX,
        ..Hyper::default()
    };
    let mut losses = Vec::new();
    fit_traced(&xs, &ys, 3, FEATURE_DIM, &hyper, 9, |_, loss| losses.push(loss));
    assert_eq!(losses.len(), 50);
    let start = 3f64.ln();
    assert!(losses[0] < start);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss went up: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn batch_confidences_sum_to_one() {
    let (r, blobs) = project_with(
        &[([200, 40, 40], 10, 0), ([40, 60, 200], 10, 0), ([40, 170, 60], 10, 0)],
        6,
    );
    let mut engine = TrainingEngine::new(DeviceId::from_u128(2));
    let model = engine.train(r.state(), &blobs, 1, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..500u64 {
        let rgb = [rng.random(), rng.random(), rng.random()];
        let img = SynthSpec {
            size: 16,
            ..SynthSpec::swatch(rgb)
        }
        .render(i);
        let conf = model.classify(&img).unwrap();
        let sum: f64 = conf.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(conf.probs().iter().all(|p| *p >= 0.0));
    }
}

proptest! {
    #[test]
    fn softmax_preserves_argmax(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        prop_assert_eq!(argmax(&softmax(&z)), argmax(&z));
    }

    #[test]
    fn feature_vectors_are_unit_length(w in 1u32..40, h in 1u32..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..3 * w * h).map(|_| rng.random()).collect();
        let img = ImageBlob::new(w, h, pixels).unwrap();
        let f = HistPool.extract(&img);
        let norm = f.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        prop_assert!(f.values().iter().all(|v| v.is_finite()));
    }
}
