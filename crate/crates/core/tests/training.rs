use povss::grad::GradcheckInstance;
use povss::head::forward;
use povss::losses::{total_loss, LossWeights};
use povss::personalize::{run_personalization, TrainConfig, TrainSample};
use povss::snapshot::Dataset;
use povss::synthbench::{generate, train_samples, SynthConfig};

#[test]
fn total_is_weighted_sum_of_terms() {
    let inst = GradcheckInstance::random(11);
    let cache = forward(&inst.snapshot, &inst.state).unwrap();
    let w = LossWeights {
        dice: 0.7,
        bce: 1.3,
        cls: 0.4,
        neg_z: 2.0,
        neg_m: 5.0,
    };
    let l = total_loss(&cache, &inst.gt, &w);
    let expected = 0.7 * l.dice + 1.3 * l.bce + 0.4 * l.cls + 2.0 * l.neg_z + 5.0 * l.neg_m;
    assert!((l.total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
}

fn bench() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        n_test_pos: 2,
        n_test_neg: 2,
        ..SynthConfig::default()
    };
    generate(&config, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn training_leaves_frozen_tensors_untouched() {
    let (_dir, ds) = bench();
    let before: Vec<_> = ds.samples.iter().map(|s| s.snapshot.to_bytes().unwrap()).collect();
    let samples = train_samples(&ds, 5).unwrap();
    run_personalization(&samples, &ds.init_vector().unwrap(), &TrainConfig::default()).unwrap();
    let after: Vec<_> = ds.samples.iter().map(|s| s.snapshot.to_bytes().unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn single_sample_descent_lowers_loss() {
    let (_dir, ds) = bench();
    let samples = train_samples(&ds, 1).unwrap();
    let config = TrainConfig {
        iterations: 100,
        ..TrainConfig::default()
    };
    let outcome = run_personalization(&samples, &ds.init_vector().unwrap(), &config).unwrap();
    let totals = outcome.totals();
    assert!(totals.last().unwrap() < totals.first().unwrap());
}

#[test]
fn training_rejects_empty_sample_list() {
    let samples: [TrainSample<'_>; 0] = [];
    assert!(run_personalization(&samples, &[0.0; 16], &TrainConfig::default()).is_err());
}
