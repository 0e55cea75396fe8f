use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use synpair::config::RunConfig;
use synpair::experiment::{self, TrainRequest};
use synpair::Category;
use tracing::{info, Level};

#[derive(Parser, Debug)]
#[command(name = "synpair", version, about = "Contrastive pre-training with decoder-synthesized pairs")]
struct Cli {
    /// Output root; every path in the config is relative to it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Config file of `key = value` lines.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one key (`key=value`); repeatable, applied after the file.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// More log output (repeat for debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Checkpoint {
    /// Use the checkpoint written after this epoch instead of the latest.
    #[arg(long)]
    epoch: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset into `data.dir`.
    GenData,
    /// Fit the decoder to the frozen initial encoder.
    PretrainDecoder,
    /// Run the training loop.
    Train {
        /// Continue from the latest checkpoint of the run.
        #[arg(long)]
        resume: bool,
        /// Pre-train the decoder first when the run has none.
        #[arg(long)]
        pretrain: bool,
        /// Stop after this many epochs (the run stays resumable).
        #[arg(long)]
        stop_after_epochs: Option<u64>,
    },
    /// Linear probe at every `eval.label_fractions` entry.
    LinearEval(Checkpoint),
    /// Leave-one-out retrieval over the test split.
    RetrievalEval(Checkpoint),
    /// Per-dimension dispersion and class separation.
    CollapseReport(Checkpoint),
    /// Original / reconstruction / perturbed reconstruction grids.
    ExportPairs(Checkpoint),
    /// Original / spatial attention / blend grids.
    ExportAttention(Checkpoint),
    /// Train and evaluate every cell of the `sweep.*` grid.
    Sweep,
    /// Print the resolved configuration.
    ShowConfig,
}

fn exit_code(category: Category) -> u8 {
    match category {
        Category::Config => 1,
        Category::Data => 2,
        Category::Numeric => 3,
        Category::Io => 4,
    }
}

fn category_of(err: &anyhow::Error) -> Category {
    err.chain()
        .find_map(|e| e.downcast_ref::<synpair::Error>())
        .map_or(Category::Io, synpair::Error::category)
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => Level::ERROR,
        (false, 0) => Level::INFO,
        (false, _) => Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .try_init();
}

fn print(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let root: &Path = &cli.out;
    match &cli.command {
        Command::GenData => {
            let manifest = experiment::gen_data(&cfg, root)?;
            info!("dataset written to {}", experiment::data_dir(&cfg, root).display());
            print(json!({ "images": manifest.rows.len() }))
        }
        Command::PretrainDecoder => {
            let report = experiment::pretrain(&cfg, root)?;
            print(json!({ "heldout_mse": report.heldout_mse, "epochs": report.epoch_losses.len() }))
        }
        Command::Train {
            resume,
            pretrain,
            stop_after_epochs,
        } => {
            let req = TrainRequest {
                resume: *resume,
                pretrain: *pretrain,
                stop_after_epochs: *stop_after_epochs,
                decoder_from: None,
            };
            let outcome = experiment::run_train(&cfg, root, &req)?;
            let last = outcome.records.last();
            print(json!({
                "steps": outcome.state.step,
                "epochs": outcome.state.epoch,
                "final_total": last.map(|r| r.total),
            }))
        }
        Command::LinearEval(c) => print(serde_json::to_value(experiment::linear_eval_cmd(&cfg, root, c.epoch)?)?),
        Command::RetrievalEval(c) => print(serde_json::to_value(experiment::retrieval_cmd(&cfg, root, c.epoch)?)?),
        Command::CollapseReport(c) => {
            let report = experiment::collapse_cmd(&cfg, root, c.epoch)?;
            print(json!({
                "dims": report.dims.len(),
                "argmin_dispersion": report.argmin_dispersion,
                "argmax_dispersion": report.argmax_dispersion,
                "argmax_separation": report.argmax_separation,
                "below_kappa": report.below(cfg.train.noise.kappa).len(),
            }))
        }
        Command::ExportPairs(c) => {
            let s = experiment::export_pairs_cmd(&cfg, root, c.epoch)?;
            print(json!({ "files": s.files.len(), "mean_abs_diff": s.mean_abs_diff }))
        }
        Command::ExportAttention(c) => {
            let s = experiment::export_attention_cmd(&cfg, root, c.epoch)?;
            print(json!({ "files": s.files.len() }))
        }
        Command::Sweep => {
            let cells = experiment::sweep(&cfg, root).context("sweep failed")?;
            let rows: Vec<_> = cells
                .iter()
                .map(|c| json!({ "cell": c.name, "top1": c.top1(), "rank1": c.retrieval.rank1 }))
                .collect();
            print(json!(rows))
        }
        Command::ShowConfig => {
            print!("{}", cfg.echo());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = category_of(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category.as_str());
            ExitCode::from(exit_code(category))
        }
    }
}
