use super::*;
use crate::datagen::{Dataset, ManifestRow, Split};
use crate::losses::LossWeights;
use crate::rng::{stream, Stream};
use rand::Rng as _;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        queue_capacity: 16,
        bank_capacity: 16,
        decoder_epochs: 2,
        decoder_batch_size: 4,
        model: ModelConfig {
            image_size: 16,
            encoder_channels: vec![4, 8],
            projector_hidden: 8,
            projector_dim: 4,
            decoder_channels: vec![8, 4],
        },
        ..TrainConfig::default()
    }
}

fn baseline(mut cfg: TrainConfig) -> TrainConfig {
    cfg.weights = LossWeights { alpha: 0.0, nu: 0.0 };
    cfg
}

fn random_dataset(train: usize, test: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = stream(seed, Stream::Dataset, &[]);
    let n = train + test;
    let rows = (0..n)
        .map(|i| ManifestRow {
            path: format!("images/{i}.png"),
            label: i % 2,
            split: if i < train { Split::Train } else { Split::Test },
        })
        .collect();
    let pixels = (0..n * 3 * size * size).map(|_| rng.random::<f32>()).collect();
    Dataset::from_parts(rows, 2, size, pixels).unwrap()
}

fn batch_of(ds: &Dataset, cfg: &TrainConfig, start: usize) -> StepBatch {
    let items: Vec<usize> = (start..start + cfg.batch_size).collect();
    StepBatch::from_items(ds, &items, cfg, 0).unwrap()
}

fn unit_rows(n: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, Stream::Probe, &[]);
    let mut data: Vec<f32> = (0..n * w).map(|_| rng.random::<f32>() - 0.5).collect();
    for row in data.chunks_mut(w) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::from_vec(&[n, w], data).unwrap()
}

#[test]
fn key_queue_is_fifo_and_rejects_unnormalized_keys() {
    let mut q = KeyQueue::new(3, 2, 0).unwrap();
    assert_eq!(q.fill(), 0);
    assert_eq!(q.negatives().dim(0), 3);
    let a = unit_rows(2, 2, 1);
    let b = unit_rows(2, 2, 2);
    q.push(&a).unwrap();
    assert_eq!(q.fill(), 2);
    q.push(&b).unwrap();
    assert_eq!(q.fill(), 3);
    // Oldest row of `a` was evicted; the rest are in arrival order.
    let chrono = q.ring().chronological();
    assert_eq!(chrono.row(0), a.row(1));
    assert_eq!(chrono.row(1), b.row(0));
    assert_eq!(chrono.row(2), b.row(1));
    let bad = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
    assert!(matches!(q.push(&bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn key_queue_push_of_exactly_capacity_replaces_everything_in_order() {
    let mut q = KeyQueue::new(4, 3, 0).unwrap();
    q.push(&unit_rows(2, 3, 1)).unwrap();
    let full = unit_rows(4, 3, 2);
    q.push(&full).unwrap();
    assert_eq!(q.fill(), 4);
    assert_eq!(q.ring().chronological(), full);
    assert!(q.push(&unit_rows(5, 3, 3)).is_err(), "oversize batch must be rejected");
    assert_eq!(q.ring().chronological(), full);
}

#[test]
fn key_queue_matches_shadow_list() {
    let mut rng = stream(11, Stream::Probe, &[]);
    let cap = 7;
    let mut q = KeyQueue::new(cap, 3, 0).unwrap();
    let mut shadow: Vec<Vec<f32>> = Vec::new();
    for round in 0..200u64 {
        let n = rng.random_range(1..=cap);
        let rows = unit_rows(n, 3, 100 + round);
        q.push(&rows).unwrap();
        shadow.extend((0..n).map(|i| rows.row(i).to_vec()));
        let keep = shadow.len().saturating_sub(cap);
        shadow.drain(..keep);
        let chrono = q.ring().chronological();
        assert_eq!(q.fill(), shadow.len());
        for (i, want) in shadow.iter().enumerate() {
            assert_eq!(chrono.row(i), &want[..]);
        }
    }
}

#[test]
fn initial_queue_rows_are_unit_vectors() {
    let q = KeyQueue::new(8, 5, 3).unwrap();
    let neg = q.negatives();
    for i in 0..8 {
        let n: f32 = neg.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn warm_queue_replaces_placeholders_with_key_projections() {
    let cfg = tiny_config();
    let ds = random_dataset(12, 4, 16, 9);
    let items = ds.indices(Split::Train);
    let mut state = TrainState::new(&cfg).unwrap();
    let placeholders = state.queue.negatives();
    warm_queue(&mut state, &cfg, &ds, &items).unwrap();
    assert_eq!(state.queue.fill(), 0);
    let warm = state.queue.negatives();
    assert!(warm.max_abs_diff(&placeholders) > 0.0);
    for i in 0..cfg.queue_capacity {
        let n: f32 = warm.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-4);
    }
    let mut again = TrainState::new(&cfg).unwrap();
    warm_queue(&mut again, &cfg, &ds, &items).unwrap();
    assert_eq!(again.queue, state.queue);

    state.queue.push(&unit_rows(cfg.batch_size, cfg.model.projector_dim, 1)).unwrap();
    assert!(warm_queue(&mut state, &cfg, &ds, &items).is_err());
}

#[test]
fn config_validation() {
    let cfg = tiny_config();
    assert!(cfg.validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 17, ..tiny_config() },
        TrainConfig { epochs: 0, ..tiny_config() },
        TrainConfig { key_momentum: 1.5, ..tiny_config() },
        TrainConfig { lr: f64::NAN, ..tiny_config() },
        TrainConfig {
            bank_capacity: 3,
            ..tiny_config()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn baseline_total_is_the_contrastive_loss() {
    let cfg = baseline(tiny_config());
    let ds = random_dataset(16, 4, 16, 1);
    let mut state = TrainState::new(&cfg).unwrap();
    let losses = train_step(&mut state, &cfg, &batch_of(&ds, &cfg, 0), cfg.lr).unwrap();
    assert_eq!(losses.total, losses.loss_c);
    assert_eq!(losses.loss_r, 0.0);
    assert_eq!(losses.loss_cp, 0.0);
    assert_eq!(state.bank.fill(), 0);
}

#[test]
fn queue_and_bank_advance_by_batch_until_full() {
    let cfg = TrainConfig {
        allow_untrained_decoder: true,
        ..tiny_config()
    };
    let ds = random_dataset(24, 4, 16, 2);
    let mut state = TrainState::new(&cfg).unwrap();
    for step in 0..6 {
        let before = (state.queue.fill(), state.bank.fill());
        let losses = train_step(&mut state, &cfg, &batch_of(&ds, &cfg, (step * 4) % 20), 0.01).unwrap();
        assert!(losses.total.is_finite());
        assert_eq!(state.queue.fill(), (before.0 + 4).min(16));
        assert_eq!(state.bank.fill(), (before.1 + 4).min(16));
        let expect = losses.loss_c + cfg.weights.alpha * losses.loss_r + cfg.weights.nu * losses.loss_cp;
        assert!((losses.total - expect).abs() < 1e-5 * expect.abs().max(1.0));
    }
    assert_eq!(state.step, 6);
}

#[test]
fn gradients_flow_only_where_intended() {
    let cfg = TrainConfig {
        allow_untrained_decoder: true,
        ..tiny_config()
    };
    let ds = random_dataset(16, 4, 16, 3);
    let state = TrainState::new(&cfg).unwrap();
    let before = state.clone();
    let p = probe_gradients(&state, &cfg, &batch_of(&ds, &cfg, 0)).unwrap();
    assert_eq!(p.contrastive_key, 0.0);
    assert!(p.contrastive_query > 0.0);
    assert_eq!(p.pair_decoder, 0.0);
    assert!(p.pair_encoder > 0.0);
    assert!(p.recon_decoder > 0.0);
    assert!(p.recon_encoder > 0.0);
    // The probe works on a copy.
    assert_eq!(state.step, before.step);
    assert_eq!(state.queue, before.queue);
}

#[test]
fn one_record_per_step() {
    let cfg = baseline(TrainConfig {
        epochs: 1,
        batch_size: 20,
        queue_capacity: 32,
        bank_capacity: 32,
        ..tiny_config()
    });
    let ds = random_dataset(200, 20, 16, 4);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &ds, TrainState::new(&cfg).unwrap(), dir.path(), &TrainOptions::default()).unwrap();
    assert_eq!(out.records.len(), 10);
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "loss_C", "loss_R", "loss_Cp", "total", "lr", "wall_time"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join(LATEST_CHECKPOINT).exists());
}

#[test]
fn untrained_decoder_is_refused() {
    let cfg = tiny_config();
    let ds = random_dataset(16, 4, 16, 5);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, &ds, TrainState::new(&cfg).unwrap(), dir.path(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("pre-train")), "{err}");
}

#[test]
fn pretraining_lowers_reconstruction_error() {
    let cfg = TrainConfig {
        decoder_epochs: 6,
        decoder_lr: 1e-2,
        ..tiny_config()
    };
    let ds = random_dataset(16, 8, 16, 6);
    let mut state = TrainState::new(&cfg).unwrap();
    let enc_before = state.encoder_q.params.clone();
    let report = pretrain_decoder(&mut state, &cfg, &ds).unwrap();
    assert_eq!(report.epoch_losses.len(), 6);
    assert!(report.epoch_losses[5] < report.epoch_losses[0], "{:?}", report.epoch_losses);
    assert!(report.heldout_mse.is_finite());
    assert!(state.decoder_pretrained);
    for (a, b) in enc_before.iter().zip(state.encoder_q.params.iter()) {
        assert_eq!(a.value, b.value, "encoder entry {} changed", a.name);
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = TrainConfig {
        allow_untrained_decoder: true,
        ..tiny_config()
    };
    let ds = random_dataset(16, 4, 16, 7);
    let mut state = TrainState::new(&cfg).unwrap();
    train_step(&mut state, &cfg, &batch_of(&ds, &cfg, 0), 0.01).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &state, &cfg).unwrap();
    let (loaded, meta) = load_checkpoint(&path, &cfg).unwrap();
    assert_eq!(meta.step, 1);
    assert_eq!(loaded.queue, state.queue);
    assert_eq!(loaded.bank, state.bank);
    assert_eq!(loaded.opt_encoder, state.opt_encoder);
    for (a, b) in loaded.decoder.params.iter().zip(state.decoder.params.iter()) {
        assert_eq!(a.value, b.value);
    }

    let other = TrainConfig {
        model: ModelConfig {
            projector_dim: 6,
            ..cfg.model.clone()
        },
        ..cfg.clone()
    };
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path, &cfg), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"garbage!garbage!").unwrap();
    assert!(matches!(load_checkpoint(&path, &cfg), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint(&dir.path().join("none.ckpt"), &cfg),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = TrainConfig {
        allow_untrained_decoder: true,
        ..tiny_config()
    };
    let ds = random_dataset(12, 4, 16, 8);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = train(&cfg, &ds, TrainState::new(&cfg).unwrap(), a.path(), &TrainOptions::default()).unwrap();

    let stop = TrainOptions {
        resume: false,
        stop_after_epochs: Some(2),
    };
    let part = train(&cfg, &ds, TrainState::new(&cfg).unwrap(), b.path(), &stop).unwrap();
    assert_eq!(part.state.epoch, 2);
    let resume = TrainOptions {
        resume: true,
        stop_after_epochs: None,
    };
    // The initial state is ignored when a checkpoint exists.
    let rest = train(&cfg, &ds, TrainState::new(&cfg).unwrap(), b.path(), &resume).unwrap();
    assert_eq!(rest.resumed_at_step, Some(part.state.step));

    assert_eq!(
        std::fs::read(a.path().join(METRICS_FILE)).unwrap(),
        std::fs::read(b.path().join(METRICS_FILE)).unwrap()
    );
    for (x, y) in full.state.encoder_q.params.iter().zip(rest.state.encoder_q.params.iter()) {
        assert!(x.value.max_abs_diff(&y.value) <= 1e-6, "{}", x.name);
    }
}

#[test]
fn resume_with_changed_config_is_refused() {
    let cfg = baseline(tiny_config());
    let ds = random_dataset(8, 4, 16, 9);
    let dir = tempfile::tempdir().unwrap();
    let stop = TrainOptions {
        resume: false,
        stop_after_epochs: Some(1),
    };
    train(&cfg, &ds, TrainState::new(&cfg).unwrap(), dir.path(), &stop).unwrap();
    let changed = TrainConfig { lr: 0.1, ..cfg.clone() };
    let resume = TrainOptions {
        resume: true,
        stop_after_epochs: None,
    };
    let err = train(&changed, &ds, TrainState::new(&changed).unwrap(), dir.path(), &resume).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}
