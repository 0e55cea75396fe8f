//! Command implementations over an output root. One experiment is one
//! directory holding its resolved config, metrics, checkpoints and
//! evaluation documents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{generate_dataset, load_dataset, Dataset, Manifest, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::evalkit::{
    collapse_report, export_attention, export_pairs, linear_eval, retrieval_eval, write_json, CollapseReport,
    ExportSummary, LinearEvalResult, RetrievalResult,
};
use crate::rng::{derive_seed, Stream};
use crate::trainer::{
    epoch_checkpoint_path, load_checkpoint, pretrain_decoder, save_checkpoint, train, PretrainReport, TrainOptions,
    TrainOutcome, TrainState, LATEST_CHECKPOINT,
};

pub const SNAPSHOT_FILE: &str = "config.resolved";
pub const DECODER_CHECKPOINT: &str = "decoder.ckpt";
pub const PRETRAIN_REPORT: &str = "pretrain.json";
pub const LINEAR_EVAL_FILE: &str = "linear_eval.json";
pub const RETRIEVAL_FILE: &str = "retrieval.json";
pub const CELL_FILE: &str = "cell.json";
pub const SWEEP_SUMMARY: &str = "sweep_summary.json";

fn under(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

pub fn data_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    under(root, &cfg.data.dir)
}

pub fn run_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    under(root, &cfg.run_dir)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Create `dir` and write the resolved config into it.
fn prepare(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    cfg.write_snapshot(&dir.join(SNAPSHOT_FILE))
}

/// Output name for a checkpoint-derived document: `stem.ext` for the latest
/// checkpoint, `stem_epoch_NNNN.ext` for an epoch checkpoint.
fn eval_name(stem: &str, ext: &str, epoch: Option<u64>) -> String {
    match epoch {
        Some(e) => format!("{stem}_epoch_{e:04}.{ext}"),
        None => format!("{stem}.{ext}"),
    }
}

pub fn gen_data(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let dir = data_dir(cfg, root);
    prepare(cfg, &dir)?;
    generate_dataset(&cfg.data.spec, &dir)
}

pub fn load_data(cfg: &RunConfig, root: &Path) -> Result<Dataset> {
    let manifest = data_dir(cfg, root).join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::Data(format!(
            "no dataset manifest at {}; run gen-data first",
            manifest.display()
        )));
    }
    load_dataset(&manifest, cfg.data.spec.image_size, None)
}

/// Pre-train the decoder of a freshly initialized state and save it as
/// `<run>/decoder.ckpt`.
pub fn pretrain(cfg: &RunConfig, root: &Path) -> Result<PretrainReport> {
    let ds = load_data(cfg, root)?;
    let dir = run_dir(cfg, root);
    prepare(cfg, &dir)?;
    pretrain_into(cfg, &ds, &dir.join(DECODER_CHECKPOINT), Some(&dir.join(PRETRAIN_REPORT))).map(|(_, r)| r)
}

fn pretrain_into(
    cfg: &RunConfig,
    ds: &Dataset,
    ckpt: &Path,
    report_path: Option<&Path>,
) -> Result<(TrainState, PretrainReport)> {
    let mut state = TrainState::new(&cfg.train)?;
    let report = pretrain_decoder(&mut state, &cfg.train, ds)?;
    if let Some(parent) = ckpt.parent() {
        create_dir(parent)?;
    }
    save_checkpoint(ckpt, &state, &cfg.train)?;
    if let Some(p) = report_path {
        write_json(p, &report)?;
    }
    Ok((state, report))
}

#[derive(Debug, Clone, Default)]
pub struct TrainRequest {
    pub resume: bool,
    /// Pre-train the decoder first when the run needs one and has none.
    pub pretrain: bool,
    pub stop_after_epochs: Option<u64>,
    /// Shared pre-trained decoder to start from instead of `<run>/decoder.ckpt`.
    pub decoder_from: Option<PathBuf>,
}

/// Initial state for a run: the pre-trained decoder checkpoint when one
/// exists, otherwise a fresh initialization.
fn initial_state(cfg: &RunConfig, ds: &Dataset, dir: &Path, req: &TrainRequest) -> Result<TrainState> {
    let own = dir.join(DECODER_CHECKPOINT);
    let source = req.decoder_from.clone().unwrap_or(own.clone());
    if cfg.train.uses_decoder() {
        if source.exists() {
            return Ok(load_checkpoint(&source, &cfg.train)?.0);
        }
        if req.pretrain {
            return Ok(pretrain_into(cfg, ds, &source, Some(&dir.join(PRETRAIN_REPORT)))?.0);
        }
    }
    TrainState::new(&cfg.train)
}

pub fn run_train(cfg: &RunConfig, root: &Path, req: &TrainRequest) -> Result<TrainOutcome> {
    let ds = load_data(cfg, root)?;
    let dir = run_dir(cfg, root);
    prepare(cfg, &dir)?;
    train_on(cfg, &ds, &dir, req)
}

fn train_on(cfg: &RunConfig, ds: &Dataset, dir: &Path, req: &TrainRequest) -> Result<TrainOutcome> {
    let initial = initial_state(cfg, ds, dir, req)?;
    let opts = TrainOptions {
        resume: req.resume,
        stop_after_epochs: req.stop_after_epochs,
    };
    train(&cfg.train, ds, initial, dir, &opts)
}

/// Load the latest checkpoint of the run, or the one written after `epoch`.
pub fn load_trained(cfg: &RunConfig, root: &Path, epoch: Option<u64>) -> Result<TrainState> {
    let dir = run_dir(cfg, root);
    let path = match epoch {
        Some(e) => epoch_checkpoint_path(&dir, e),
        None => dir.join(LATEST_CHECKPOINT),
    };
    Ok(load_checkpoint(&path, &cfg.train)?.0)
}

fn linear_eval_all(cfg: &RunConfig, state: &TrainState, ds: &Dataset) -> Result<Vec<LinearEvalResult>> {
    cfg.eval
        .label_fractions
        .iter()
        .map(|&f| {
            let r = linear_eval(&state.encoder_q, ds, f, cfg.eval.seed, &cfg.eval.probe)?;
            log::info!("linear eval at {:.0}% labels: top-1 {:.2}%", 100.0 * f, r.top1);
            Ok(r)
        })
        .collect()
}

pub fn linear_eval_cmd(cfg: &RunConfig, root: &Path, epoch: Option<u64>) -> Result<Vec<LinearEvalResult>> {
    let ds = load_data(cfg, root)?;
    let state = load_trained(cfg, root, epoch)?;
    let dir = run_dir(cfg, root);
    let results = linear_eval_all(cfg, &state, &ds)?;
    write_json(&dir.join(eval_name("linear_eval", "json", epoch)), &results)?;
    Ok(results)
}

pub fn retrieval_cmd(cfg: &RunConfig, root: &Path, epoch: Option<u64>) -> Result<RetrievalResult> {
    let ds = load_data(cfg, root)?;
    let state = load_trained(cfg, root, epoch)?;
    let r = retrieval_eval(&state.encoder_q, &ds)?;
    log::info!("retrieval: rank-1 {:.2} rank-5 {:.2} mAP {:.2}", r.rank1, r.rank5, r.map);
    write_json(&run_dir(cfg, root).join(eval_name("retrieval", "json", epoch)), &r)?;
    Ok(r)
}

#[derive(Debug, Serialize)]
struct CollapseJson {
    argmin_dispersion: usize,
    argmax_dispersion: usize,
    argmax_separation: usize,
    mean_dispersion: f64,
    below_kappa: Vec<usize>,
    kappa: f64,
}

/// Per-dimension collapse report as CSV plus a JSON summary.
pub fn collapse_cmd(cfg: &RunConfig, root: &Path, epoch: Option<u64>) -> Result<CollapseReport> {
    let ds = load_data(cfg, root)?;
    let state = load_trained(cfg, root, epoch)?;
    let report = collapse_report(&state.encoder_q, &ds)?;
    let dir = run_dir(cfg, root);
    report.write_csv(&dir.join(eval_name("collapse", "csv", epoch)))?;
    let all: Vec<usize> = (0..report.dims.len()).collect();
    let kappa = cfg.train.noise.kappa;
    write_json(
        &dir.join(eval_name("collapse", "json", epoch)),
        &CollapseJson {
            argmin_dispersion: report.argmin_dispersion,
            argmax_dispersion: report.argmax_dispersion,
            argmax_separation: report.argmax_separation,
            mean_dispersion: report.mean_dispersion(&all).unwrap_or(0.0),
            below_kappa: report.below(kappa),
            kappa,
        },
    )?;
    Ok(report)
}

fn export_images(cfg: &RunConfig, ds: &Dataset) -> Result<crate::tensor::Tensor<f32>> {
    let test = ds.indices(Split::Test);
    let n = cfg.eval.export_count.min(test.len());
    if n < 2 {
        return Err(Error::Data("export needs at least two test images".into()));
    }
    Ok(ds.batch(&test[..n]))
}

pub fn export_pairs_cmd(cfg: &RunConfig, root: &Path, epoch: Option<u64>) -> Result<ExportSummary> {
    let ds = load_data(cfg, root)?;
    let state = load_trained(cfg, root, epoch)?;
    let out = run_dir(cfg, root).join("pairs");
    let summary = export_pairs(&state, &export_images(cfg, &ds)?, &cfg.train, &out)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn export_attention_cmd(cfg: &RunConfig, root: &Path, epoch: Option<u64>) -> Result<ExportSummary> {
    let ds = load_data(cfg, root)?;
    let state = load_trained(cfg, root, epoch)?;
    let out = run_dir(cfg, root).join("attention");
    export_attention(&state, &export_images(cfg, &ds)?, &cfg.train, &out)
}

/// Result of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub assignments: Vec<(String, String)>,
    pub replicate: usize,
    pub seed: u64,
    pub config_hash: String,
    pub linear_eval: Vec<LinearEvalResult>,
    pub retrieval: RetrievalResult,
}

impl CellResult {
    /// Top-1 at the first configured label fraction.
    pub fn top1(&self) -> f64 {
        self.linear_eval.first().map_or(f64::NAN, |r| r.top1)
    }
}

/// Directory name of a cell: its assignments joined by `__`.
pub fn cell_name(assignments: &[(String, String)], replicate: usize, replicates: usize) -> String {
    let mut parts: Vec<String> = assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
    if parts.is_empty() {
        parts.push("base".into());
    }
    if replicates > 1 {
        parts.push(format!("rep{replicate}"));
    }
    parts.join("__")
}

/// Seed of replicate `r`, shared by every cell so cells compare on matched
/// initializations.
pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    derive_seed(master, Stream::Sweep, &[replicate as u64])
}

/// Decoder pre-training depends only on these settings, so cells agreeing on
/// them share one pre-trained decoder.
fn decoder_cache_key(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    crate::trainer::digest(&format!(
        "{:?}|{}|{}|{}|{}|{}|{}|{:?}|{}",
        t.model,
        t.seed,
        t.queue_capacity,
        t.bank_capacity,
        t.decoder_lr,
        t.decoder_epochs,
        t.decoder_batch_size,
        cfg.data.spec,
        cfg.data.dir
    ))
}

/// Train and evaluate one configuration in `dir`. A finished cell whose
/// stored config hash matches is read back instead of recomputed.
pub fn run_cell(cfg: &RunConfig, ds: &Dataset, dir: &Path, decoder_cache: &Path, meta: CellMeta) -> Result<CellResult> {
    let cell_file = dir.join(CELL_FILE);
    let hash = crate::trainer::digest(&cfg.echo());
    if let Ok(text) = fs::read_to_string(&cell_file) {
        if let Ok(prev) = serde_json::from_str::<CellResult>(&text) {
            if prev.config_hash == hash {
                log::info!("cell {} already complete", meta.name);
                return Ok(prev);
            }
        }
    }
    prepare(cfg, dir)?;
    let req = TrainRequest {
        resume: true,
        pretrain: true,
        stop_after_epochs: None,
        decoder_from: Some(decoder_cache.join(format!("{}.ckpt", decoder_cache_key(cfg)))),
    };
    // A stale checkpoint from another configuration cannot be resumed.
    let latest = dir.join(LATEST_CHECKPOINT);
    if latest.exists() {
        if let Ok((_, m)) = load_checkpoint(&latest, &cfg.train) {
            if m.config_hash != cfg.train.config_hash() {
                fs::remove_file(&latest).map_err(|e| Error::io(&latest, e))?;
            }
        } else {
            fs::remove_file(&latest).map_err(|e| Error::io(&latest, e))?;
        }
    }
    let outcome = train_on(cfg, ds, dir, &req)?;
    let linear = linear_eval_all(cfg, &outcome.state, ds)?;
    write_json(&dir.join(LINEAR_EVAL_FILE), &linear)?;
    let retrieval = retrieval_eval(&outcome.state.encoder_q, ds)?;
    write_json(&dir.join(RETRIEVAL_FILE), &retrieval)?;
    let result = CellResult {
        name: meta.name,
        assignments: meta.assignments,
        replicate: meta.replicate,
        seed: cfg.train.seed,
        config_hash: hash,
        linear_eval: linear,
        retrieval,
    };
    write_json(&cell_file, &result)?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct CellMeta {
    pub name: String,
    pub assignments: Vec<(String, String)>,
    pub replicate: usize,
}

/// Ensure the dataset exists, generating it when the manifest is missing.
pub fn ensure_data(cfg: &RunConfig, root: &Path) -> Result<Dataset> {
    if !data_dir(cfg, root).join(MANIFEST_FILE).exists() {
        gen_data(cfg, root)?;
    }
    load_data(cfg, root)
}

/// Run every cell of the sweep grid under `<run>/<cell>` and write a
/// summary of all cells.
pub fn sweep(cfg: &RunConfig, root: &Path) -> Result<Vec<CellResult>> {
    let ds = ensure_data(cfg, root)?;
    let dir = run_dir(cfg, root);
    prepare(cfg, &dir)?;
    let cache = dir.join("decoders");
    let replicates = cfg.sweep.replicates;
    let mut results = Vec::new();
    for assignments in cfg.sweep_cells() {
        for rep in 0..replicates {
            let mut cell = cfg.clone();
            cell.sweep = Default::default();
            for (k, v) in &assignments {
                cell.set(k, v)?;
            }
            cell.train.seed = replicate_seed(cfg.train.seed, rep);
            cell.validate()?;
            let name = cell_name(&assignments, rep, replicates);
            log::info!("sweep cell {name} (seed {})", cell.train.seed);
            let r = run_cell(
                &cell,
                &ds,
                &dir.join(&name),
                &cache,
                CellMeta {
                    name,
                    assignments: assignments.clone(),
                    replicate: rep,
                },
            )?;
            results.push(r);
        }
    }
    write_json(&dir.join(SWEEP_SUMMARY), &results)?;
    Ok(results)
}
