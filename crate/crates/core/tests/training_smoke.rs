//! Optimization sanity on a small synthetic set with the default method
//! configuration.

use synpair::datagen::{generate_dataset, load_dataset, DatasetSpec, MANIFEST_FILE};
use synpair::trainer::{pretrain_decoder, train, TrainConfig, TrainOptions, TrainState};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn total_loss_falls_over_fifty_steps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        num_classes: 2,
        per_class: 200,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec, &dir.path().join("data")).unwrap();
    let ds = load_dataset(&dir.path().join("data").join(MANIFEST_FILE), 64, None).unwrap();
    // 320 training images at B = 32: ten steps per epoch.
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg).unwrap();
    pretrain_decoder(&mut state, &cfg, &ds).unwrap();
    let out = train(&cfg, &ds, state, &dir.path().join("run"), &TrainOptions::default()).unwrap();
    let totals: Vec<f64> = out.records.iter().map(|r| r.total).collect();
    assert_eq!(totals.len(), 50);
    assert!(out.records.iter().all(|r| r.loss_c.is_finite() && r.loss_r.is_finite() && r.loss_cp.is_finite()));
    let (first, last) = (mean(&totals[..10]), mean(&totals[40..]));
    eprintln!("mean total: first 10 steps {first:.4}, last 10 steps {last:.4}");
    assert!(last < first, "{last} !< {first}");
}
