use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::step::{train_step, warm_queue, StepBatch};
use super::{load_checkpoint, save_checkpoint, TrainConfig, TrainState};
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::recon_loss_value;
use crate::nets::Mode;
use crate::optim::{cosine_lr, Adam};
use crate::rng::{derive_seed, Stream};
use crate::tape::Tape;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint.ckpt";
const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    #[serde(rename = "loss_C")]
    pub loss_c: f64,
    #[serde(rename = "loss_R")]
    pub loss_r: f64,
    #[serde(rename = "loss_Cp")]
    pub loss_cp: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `<out>/checkpoint.ckpt` when present.
    pub resume: bool,
    /// Return once this many epochs are complete.
    pub stop_after_epochs: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Records written by this invocation.
    pub records: Vec<MetricsRecord>,
    pub resumed_at_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Mean reconstruction error over the test split.
    pub heldout_mse: f64,
}

pub fn epoch_checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

fn split_items(ds: &Dataset, split: Split, need: usize) -> Result<Vec<usize>> {
    let items = ds.indices(split);
    if items.len() < need {
        return Err(Error::Config(format!(
            "{split:?} split has {} images, fewer than the batch size {need}",
            items.len()
        )));
    }
    Ok(items)
}

/// Fit the decoder to invert the frozen encoder of `state` on the training
/// images with Adam.
pub fn pretrain_decoder(state: &mut TrainState, cfg: &TrainConfig, ds: &Dataset) -> Result<PretrainReport> {
    cfg.validate()?;
    let bs = cfg.decoder_batch_size;
    let train = split_items(ds, Split::Train, bs)?;
    let seed = derive_seed(cfg.seed, Stream::Shuffle, &[u64::MAX]);
    let mut adam = Adam::new(&state.decoder.params);
    let mut epoch_losses = Vec::with_capacity(cfg.decoder_epochs);
    for epoch in 0..cfg.decoder_epochs as u64 {
        let mut sum = 0.0;
        let batches = Dataset::shuffled_batches(&train, bs, seed, epoch);
        for items in &batches {
            let x = ds.batch(items);
            let v = state.encoder_q.encode(&x, Mode::Batch)?;
            let mut tape = Tape::new();
            let bound = state.decoder.params.bind(&mut tape, true);
            let vv = tape.constant(v);
            let xv = tape.constant(x);
            let x_hat = state.decoder.forward(&mut tape, &bound, vv, Mode::Train)?;
            let loss = tape.mse(x_hat, xv)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("decoder pre-training loss at epoch {epoch}")));
            }
            sum += value;
            let grads = tape.backward(loss)?;
            adam.step(&mut state.decoder.params, &bound.grads(&grads), cfg.decoder_lr)?;
        }
        let mean = sum / batches.len().max(1) as f64;
        log::info!("decoder epoch {}/{}: mse {mean:.5}", epoch + 1, cfg.decoder_epochs);
        epoch_losses.push(mean);
    }
    let heldout_mse = heldout_recon_mse(state, ds, bs)?;
    log::info!("decoder held-out mse {heldout_mse:.5}");
    state.decoder_pretrained = true;
    Ok(PretrainReport {
        epoch_losses,
        heldout_mse,
    })
}

/// Mean reconstruction MSE over the test split, decoder in evaluation mode.
pub fn heldout_recon_mse(state: &mut TrainState, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let test = ds.indices(Split::Test);
    let (mut sum, mut count) = (0.0, 0usize);
    for items in test.chunks(batch_size.max(2)) {
        if items.len() < 2 {
            continue;
        }
        let x = ds.batch(items);
        let v = state.encoder_q.encode(&x, Mode::Batch)?;
        let x_hat = state.decoder.decode(&v, Mode::Eval)?;
        sum += recon_loss_value(&x, &x_hat)? * items.len() as f64;
        count += items.len();
    }
    if count == 0 {
        return Err(Error::Data("test split too small for reconstruction error".into()));
    }
    Ok(sum / count as f64)
}

fn read_records(path: &Path) -> Result<Vec<(MetricsRecord, String)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push((rec, line));
    }
    Ok(out)
}

pub fn read_metrics(out_dir: &Path) -> Result<Vec<MetricsRecord>> {
    Ok(read_records(&out_dir.join(METRICS_FILE))?.into_iter().map(|(r, _)| r).collect())
}

fn write_line(w: &mut impl Write, rec: &MetricsRecord, path: &Path) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Run (or resume) training from `initial`, streaming one metrics record per
/// step to `<out>/metrics.jsonl` and checkpointing on the configured cadence.
pub fn train(cfg: &TrainConfig, ds: &Dataset, initial: TrainState, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.image_size != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but the model expects {}px",
            ds.image_size, cfg.model.image_size
        )));
    }
    let train_items = split_items(ds, Split::Train, cfg.batch_size)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let latest = out_dir.join(LATEST_CHECKPOINT);
    let metrics_path = out_dir.join(METRICS_FILE);

    let (mut state, resumed_at_step) = if opts.resume && latest.exists() {
        let (state, meta) = load_checkpoint(&latest, cfg)?;
        if meta.config_hash != cfg.config_hash() {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different configuration",
                latest.display()
            )));
        }
        log::info!("resuming at epoch {} step {}", meta.epoch, meta.step);
        (state, Some(meta.step))
    } else {
        (initial, None)
    };
    if cfg.uses_decoder() && !state.decoder_pretrained && !cfg.allow_untrained_decoder {
        return Err(Error::Config(
            "decoder has not been pre-trained; run pretrain-decoder first or set train.allow_untrained_decoder = true"
                .into(),
        ));
    }

    if resumed_at_step.is_none() && state.step == 0 && state.queue.fill() == 0 {
        warm_queue(&mut state, cfg, ds, &train_items)?;
    }

    // Earlier lines are kept verbatim so a resumed stream matches an
    // uninterrupted one byte for byte.
    let kept: Vec<String> = match resumed_at_step {
        Some(step) => read_records(&metrics_path)?
            .into_iter()
            .filter(|(r, _)| r.step <= step)
            .map(|(_, line)| line)
            .collect(),
        None => Vec::new(),
    };
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    for line in &kept {
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
    }

    let start = Instant::now();
    let mut records = Vec::new();
    for epoch in state.epoch..cfg.epochs as u64 {
        let lr = cosine_lr(cfg.lr, epoch as usize, cfg.epochs);
        let batches = Dataset::shuffled_batches(&train_items, cfg.batch_size, cfg.seed, epoch);
        let mut sums = [0.0f64; 4];
        for items in &batches {
            let batch = StepBatch::from_items(ds, items, cfg, epoch)?;
            let losses = train_step(&mut state, cfg, &batch, lr)?;
            let rec = MetricsRecord {
                step: state.step,
                epoch,
                loss_c: losses.loss_c,
                loss_r: losses.loss_r,
                loss_cp: losses.loss_cp,
                total: losses.total,
                lr,
                wall_time: if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
            };
            for (s, v) in sums.iter_mut().zip([rec.loss_c, rec.loss_r, rec.loss_cp, rec.total]) {
                *s += v;
            }
            write_line(&mut metrics, &rec, &metrics_path)?;
            records.push(rec);
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch = epoch + 1;
        let n = batches.len().max(1) as f64;
        log::info!(
            "epoch {}/{}: loss_C {:.4} loss_R {:.4} loss_Cp {:.4} total {:.4} lr {lr:.5}",
            epoch + 1,
            cfg.epochs,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        );
        let last = state.epoch == cfg.epochs as u64;
        let stopping = opts.stop_after_epochs == Some(state.epoch);
        let due = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every as u64 == 0;
        if due || last || stopping {
            save_checkpoint(&epoch_checkpoint_path(out_dir, state.epoch), &state, cfg)?;
            save_checkpoint(&latest, &state, cfg)?;
        }
        if stopping {
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        records,
        resumed_at_step,
    })
}
