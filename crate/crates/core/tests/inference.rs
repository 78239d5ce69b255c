use mpsuq::ensemble::{predict_mask, run_inference, StdReduction};
use mpsuq::schedule::{lr_at, ScheduleParams};
use mpsuq::toytrain::{
    extract_features, forward, generate_dataset, train, write_dataset, LossWeights, ModelWeights,
    RunManifest, Split, SyntheticDatasetConfig, TrainConfig,
};

fn small_run() -> (tempfile::TempDir, RunManifest, Vec<mpsuq::toytrain::SyntheticImage>) {
    let dir = tempfile::tempdir().unwrap();
    let config = SyntheticDatasetConfig {
        image_size: 20,
        n_train: 4,
        n_val: 1,
        n_test: 2,
        ..SyntheticDatasetConfig::default()
    };
    let ds = generate_dataset(&config).unwrap();
    write_dataset(&ds, &dir.path().join("data")).unwrap();
    let outcome = train(&TrainConfig {
        dataset_dir: dir.path().join("data"),
        out_dir: dir.path().join("run"),
        schedule: ScheduleParams::new(0.1, 0.01, 0.8, 0.9, 12, 2).unwrap(),
        window: 6,
        stride: 2,
        loss_weights: LossWeights::default(),
        momentum: 0.9,
        seed: 42,
    })
    .unwrap();
    let images = ds.split(Split::Test).map(|(_, s)| s.image.clone()).collect();
    (dir, outcome.manifest, images)
}

#[test]
fn manifest_matches_plan() {
    let (dir, manifest, _) = small_run();
    let epochs: Vec<usize> = manifest.checkpoints.iter().map(|c| c.epoch).collect();
    assert_eq!(epochs, vec![8, 10, 12, 20, 22, 24]);
    assert_eq!(manifest.sampling_plan.epochs, epochs);
    assert_eq!(RunManifest::load(&dir.path().join("run")).unwrap(), manifest);
    for (i, c) in manifest.checkpoints.iter().enumerate() {
        assert!(manifest.checkpoint_path(&dir.path().join("run"), i).is_file());
        assert_eq!(c.lr, lr_at(&manifest.schedule, c.epoch).unwrap());
    }
}

#[test]
fn single_checkpoint_reduces_to_its_model() {
    let (dir, mut manifest, images) = small_run();
    let run_dir = dir.path().join("run");
    manifest.checkpoints.truncate(1);
    let w = ModelWeights::load(manifest.checkpoint_path(&run_dir, 0)).unwrap();
    let outs = run_inference(&manifest, &run_dir, &images, StdReduction::ClassMean).unwrap();
    for (img, out) in images.iter().zip(&outs) {
        let own = forward(&w, &extract_features(img)).unwrap();
        assert_eq!(out.mask, predict_mask(&own));
        assert_eq!(out.mean, own);
        assert!(out.std_raw.data().iter().all(|&s| s == 0.0));
    }
}

#[test]
fn checkpoint_order_is_irrelevant() {
    let (dir, manifest, images) = small_run();
    let run_dir = dir.path().join("run");
    let a = run_inference(&manifest, &run_dir, &images, StdReduction::ClassMean).unwrap();
    let mut shuffled = manifest.clone();
    shuffled.checkpoints.reverse();
    shuffled.checkpoints.swap(0, 2);
    let b = run_inference(&shuffled, &run_dir, &images, StdReduction::ClassMean).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].member_count, 6);
}

#[test]
fn duplicated_checkpoint_has_zero_spread() {
    let (dir, mut manifest, images) = small_run();
    let run_dir = dir.path().join("run");
    let first = manifest.checkpoints[0].clone();
    manifest.checkpoints = vec![first.clone(), first.clone(), first];
    let outs = run_inference(&manifest, &run_dir, &images, StdReduction::ClassMax).unwrap();
    assert!(outs.iter().all(|o| o.std_raw.data().iter().all(|&s| s == 0.0)));
}

#[test]
fn missing_checkpoint_is_reported() {
    let (dir, manifest, images) = small_run();
    let run_dir = dir.path().join("run");
    std::fs::remove_file(manifest.checkpoint_path(&run_dir, 3)).unwrap();
    let err = run_inference(&manifest, &run_dir, &images, StdReduction::ClassMean).unwrap_err();
    assert!(err.to_string().contains("epoch_0020"), "{err}");
}
