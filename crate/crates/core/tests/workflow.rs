use std::collections::BTreeMap;

use fpdn_core::checkpoint::{load_checkpoint, save_checkpoint};
use fpdn_core::degrade::{build_dataset, read_manifest, DegradationConfig, Manifest};
use fpdn_core::image::read_image;
use fpdn_core::metrics::{evaluate_dataset, MetricScale};
use fpdn_core::pipeline::{postprocess, prepare_input, AugmentationSpec, ResizeMode};
use fpdn_core::train::{fit, TrainConfig};
use fpdn_core::unet::{forward, Mode, UNetConfig};

fn tiny_model() -> UNetConfig {
    UNetConfig {
        depth: 2,
        base_channels: 2,
        ..UNetConfig::default()
    }
}

#[test]
fn dataset_manifest_replays_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(3, 40, 48, &DegradationConfig::default(), 9, dir.path()).unwrap();
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.size, (40, 48));
    assert_eq!(manifest.records.len(), 3);
    let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(Manifest::parse(&text, dir.path()).unwrap(), manifest);
    for rec in &manifest.records {
        let input = read_image(Manifest::input_path(dir.path(), &rec.id)).unwrap();
        let target = read_image(Manifest::target_path(dir.path(), &rec.id)).unwrap();
        assert_eq!(input.dims(), (40, 48));
        assert_eq!(target.dims(), (40, 48));
    }
}

#[test]
fn train_checkpoint_infer_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    build_dataset(6, 32, 32, &DegradationConfig::default(), 21, &data).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 2,
        lr_init: 1e-3,
        val_fraction: 0.34,
        record_wall_time: false,
        ..TrainConfig::default()
    };
    let mut epochs = 0;
    let outcome = fit(&tiny_model(), &cfg, &AugmentationSpec::default(), &data, &out, |_, _| epochs += 1).unwrap();
    assert_eq!(epochs, 2);
    assert_eq!(outcome.log.rows.len(), 2);

    let ck = load_checkpoint(&outcome.checkpoint).unwrap();
    assert_eq!(ck.config(), &tiny_model());
    assert_eq!(ck.meta["epoch"], outcome.best_epoch.to_string());

    // run the last pair through the restored model and score it
    let manifest = read_manifest(&data).unwrap();
    let last = &manifest.records.last().unwrap().id;
    let img = read_image(Manifest::input_path(&data, last)).unwrap();
    let (x, record) = prepare_input(&img, 16, ResizeMode::Interpolate).unwrap();
    let (y, _) = forward(&ck.params, &x, Mode::Infer).unwrap();
    let restored = postprocess(&y, &record).unwrap();
    assert_eq!(restored.dims(), (32, 32));

    let (pred_dir, target_dir) = (dir.path().join("pred"), dir.path().join("target"));
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&target_dir).unwrap();
    fpdn_core::image::write_image(&restored, pred_dir.join(format!("{last}.png"))).unwrap();
    std::fs::copy(
        Manifest::target_path(&data, last),
        target_dir.join(format!("{last}_target.png")),
    )
    .unwrap();
    let rep = evaluate_dataset(&pred_dir, &target_dir, MetricScale::Unit).unwrap();
    assert!(rep.is_complete());
    assert_eq!(rep.aggregate.count, 1);
    assert!((0.0..=1.0).contains(&rep.aggregate.mae));
}

#[test]
fn checkpoint_survives_resave() {
    let dir = tempfile::tempdir().unwrap();
    let params = fpdn_core::unet::build::<f32>(&tiny_model(), 4).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("note".to_string(), "x".to_string());
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&params, &meta, &a).unwrap();
    let ck = load_checkpoint(&a).unwrap();
    save_checkpoint(&ck.params, &ck.meta, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
