use std::path::Path;

use ssda_core::data::RawTensor;
use ssda_core::pool::Provenance;
use ssda_core::train::{export_embeddings, sidecar_path, DataSource, EmbeddingSidecar, TrainConfig, TrainData, Trainer};

fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.seed = seed;
    c.split.seed = seed;
    c.batch_size = 4;
    c.iterations = 8;
    c.eval_every = 4;
    c.pool_capacity = 8;
    c.model.image_size = 32;
    c.model.channels = vec![4, 8];
    if let DataSource::Synthetic(spec) = &mut c.data {
        spec.images_per_category = 12;
        spec.image_size = 32;
    }
    c
}

fn trainer(config: TrainConfig) -> Trainer<f64> {
    let data = TrainData::from_config(&config).unwrap();
    Trainer::new(config, data).unwrap()
}

#[test]
fn same_seed_runs_are_identical() {
    let mut a = trainer(tiny_config(3));
    let mut b = trainer(tiny_config(3));
    a.run().unwrap();
    b.run().unwrap();
    assert_eq!(a.history(), b.history());
    assert_eq!(a.state(), b.state());
    assert!(a.history().iter().all(|r| r.loss.total.is_finite()));
}

#[test]
fn different_seeds_diverge() {
    let mut a = trainer(tiny_config(3));
    let mut b = trainer(tiny_config(4));
    a.run_until(2).unwrap();
    b.run_until(2).unwrap();
    assert_ne!(a.history()[1].loss, b.history()[1].loss);
}

#[test]
fn resume_from_midpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = trainer(tiny_config(5)).with_output(&dir.path().join("full")).unwrap();
    full.run().unwrap();

    let half_dir = dir.path().join("half");
    let mut first = trainer(tiny_config(5)).with_output(&half_dir).unwrap();
    first.run_until(4).unwrap();
    drop(first);
    let ckpt = half_dir.join("checkpoints").join("iter_000004");
    let config = tiny_config(5);
    let data = TrainData::from_config(&config).unwrap();
    let mut resumed = Trainer::<f64>::resume(config, data, &ckpt).unwrap().with_output(&half_dir).unwrap();
    resumed.run().unwrap();

    assert_eq!(full.history(), resumed.history());
    assert_eq!(full.state(), resumed.state());
    let read = |p: &Path| std::fs::read_to_string(p.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&dir.path().join("full")), read(&half_dir));
}

#[test]
fn resume_rejects_changed_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(tiny_config(6)).with_output(dir.path()).unwrap();
    t.run_until(4).unwrap();
    let mut changed = tiny_config(6);
    changed.alpha = 0.7;
    let data = TrainData::from_config(&changed).unwrap();
    let err = Trainer::<f64>::resume(changed, data, &dir.path().join("checkpoints/iter_000004")).err().unwrap();
    assert!(err.to_string().contains("only iterations and eval_every"), "{err}");
}

#[test]
fn pools_keep_ground_truth_and_confident_entries() {
    let mut config = tiny_config(7);
    config.sigma = 0.3;
    let mut t = trainer(config);
    let mut previous = t.state().pools.sizes();
    while !t.is_done() {
        t.step().unwrap();
        let pools = &t.state().pools;
        let sizes = pools.sizes();
        for (k, (&now, &before)) in sizes.iter().zip(&previous).enumerate() {
            assert!(now >= before && now <= 8, "category {k}: {before} -> {now}");
            let gt = pools.entries(k).iter().filter(|e| e.provenance == Provenance::GroundTruth).count();
            assert_eq!(gt, 1);
        }
        assert!(pools.classes().iter().flatten().all(|e| e.confidence >= 0.3));
        previous = sizes;
    }
}

#[test]
fn exported_embeddings_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(tiny_config(8));
    t.run_until(2).unwrap();
    let path = dir.path().join("test.ssda");
    let sidecar = export_embeddings(&t.state().params, &t.data().test, &path).unwrap();
    let raw = RawTensor::read(&path).unwrap();
    assert_eq!((raw.count, raw.height, raw.width), (t.data().test.len(), 1, 8));
    let feats = t.state().params.features_eval(&t.data().test.images()).unwrap();
    for (a, b) in raw.data.iter().zip(feats.data()) {
        assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
    let text = std::fs::read_to_string(sidecar_path(&path)).unwrap();
    let read: EmbeddingSidecar = serde_json::from_str(&text).unwrap();
    assert_eq!(read, sidecar);
    assert_eq!(read.labels, t.data().test.labels());
    assert!(read.domains.iter().all(|d| d == "target"));
}
