use std::time::Instant;

use coml_sync::sim::{run, SimConfig};

#[test]
fn seeded_schedules_converge() {
    let cfg = SimConfig::default();
    let start = Instant::now();
    let mut cascades = 0;
    let mut partitions = 0;
    // The acceptance suite runs the full 100-seed sweep.
    for seed in 1000..1025 {
        let r = run(seed, &cfg);
        assert!(r.sequenced >= 1000, "seed {seed}: only {} ops", r.sequenced);
        assert!(r.converged(), "seed {seed} diverged; rerun with trace: true to inspect");
        cascades += r.cascaded_samples;
        partitions += r.partitions;
    }
    // The schedules must actually exercise the interesting paths.
    assert!(cascades > 25, "{cascades}");
    assert!(partitions > 25, "{partitions}");
    eprintln!("25 seeds in {:?}", start.elapsed());
}

#[test]
fn two_clients_few_ops() {
    let r = run(
        3,
        &SimConfig {
            clients: 2,
            min_ops: 50,
            trace: false,
        },
    );
    assert!(r.converged());
    assert_eq!(r.client_digests.len(), 2);
}
