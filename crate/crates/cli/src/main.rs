use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use moelab::evaluator::{evaluate, write_audit};
use moelab::experiment::{compression_summary, emit_report, run_experiment, ExperimentConfig};
use moelab::model::{ModelConfig, MoEModel};
use moelab::offload::TransferParams;
use moelab::stats::{export_heatmap, summarize};
use moelab::workbench::{generate_dataset, generate_split, train, Split, TaskKind, TaskSpec, TrainConfig};
use moelab_codec::{compress_eb, decompress_bytes, CodecError, CompressedBlock};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "moelab", version, about = "Error-sensitivity experiments on mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a synthetic task and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a clean model and export activation statistics.
    Inspect(InspectArgs),
    /// Run a perturbation experiment from a JSON config.
    Perturb(PerturbArgs),
    /// Compress a raw little-endian f64 file with a hard error bound.
    Compress(CompressArgs),
    /// Restore a raw f64 file from a `.melc` stream.
    Decompress(DecompressArgs),
    /// Compress every expert of a checkpoint and model fetch latency.
    OffloadReport(OffloadArgs),
}

#[derive(Args)]
struct TaskFlags {
    /// Task family: modular_sum, copy_reverse or comparison.
    #[arg(long)]
    task: Option<String>,
    /// Modulus or maximum length of the task.
    #[arg(long)]
    task_param: Option<u32>,
    #[arg(long)]
    task_seed: Option<u64>,
}

impl TaskFlags {
    fn apply(&self, task: &mut TaskSpec) -> Result<()> {
        if let Some(kind) = &self.task {
            task.kind = serde_json::from_value(serde_json::Value::String(kind.clone()))
                .map_err(|_| ConfigError(format!("unknown task family {kind:?}")))?;
        }
        if let Some(p) = self.task_param {
            task.param = p;
        }
        if let Some(s) = self.task_seed {
            task.seed = s;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainJob {
    model: ModelConfig,
    task: TaskSpec,
    train: TrainConfig,
    train_samples: usize,
    eval_samples: usize,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskSpec::new(TaskKind::ModularSum, 10, 0),
            train: TrainConfig::default(),
            train_samples: 2000,
            eval_samples: 200,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with `model`, `task`, `train`, `train_samples`, `eval_samples`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    task: TaskFlags,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target: Option<f64>,
    /// Checkpoint output path.
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the training split as JSON lines.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    task: TaskFlags,
    #[arg(long, default_value_t = 200)]
    eval_samples: usize,
    /// Directory for heatmap.csv, metrics.json and audit.jsonl.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated p values.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Absolute error bound.
    #[arg(long)]
    error_bound: f64,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct OffloadArgs {
    #[arg(long)]
    model: PathBuf,
    /// Error bound as a fraction of each expert's mean absolute value.
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    #[arg(long)]
    pcie_bandwidth: Option<f64>,
    #[arg(long)]
    decompress_throughput: Option<f64>,
    #[arg(long)]
    no_overlap: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| moelab::Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| moelab::Error::io(path, e).into())
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| moelab::Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        bail!(ConfigError(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut job: TrainJob = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainJob::default(),
    };
    args.task.apply(&mut job.task)?;
    let tc = &mut job.train;
    tc.steps = args.steps.unwrap_or(tc.steps);
    tc.learning_rate = args.lr.unwrap_or(tc.learning_rate);
    tc.batch_size = args.batch_size.unwrap_or(tc.batch_size);
    tc.seed = args.seed.unwrap_or(tc.seed);
    tc.target_accuracy = args.target.unwrap_or(tc.target_accuracy);

    let data = generate_dataset(&job.task, job.train_samples)?;
    if let Some(path) = &args.dataset_out {
        data.write_jsonl(path)?;
    }
    let held_out = generate_split(&job.task, job.eval_samples, Split::Eval)?;
    let out = train(&job.model, &data, &held_out, &job.train)?;
    out.model.save(&args.out)?;
    let summary = serde_json::json!({
        "checkpoint": args.out,
        "steps_run": out.steps_run,
        "final_loss": out.loss_history.last(),
        "eval_ica": out.eval_ica,
        "eval_pia": out.eval_pia,
        "reached_target": out.reached_target,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let model = MoEModel::load(&args.model)?;
    let mut task = TaskSpec::new(TaskKind::ModularSum, 10, 0);
    args.task.apply(&mut task)?;
    let data = generate_split(&task, args.eval_samples, Split::Eval)?;
    let eval = evaluate(&model, &data, true)?;
    let log = eval.log.as_ref().expect("activations requested");
    log.check_conservation()?;
    fs::create_dir_all(&args.out).map_err(|e| moelab::Error::io(&args.out, e))?;
    export_heatmap(log, &args.out.join("heatmap.csv"))?;
    let metrics = serde_json::json!({
        "ica": eval.outcome.ica,
        "pia": eval.outcome.pia,
        "tokens_processed": log.tokens_processed(),
        "metrics": summarize(log)?,
    });
    write(
        &args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    write_audit(&data, &eval, &args.out.join("audit.jsonl"))?;
    println!("ica {:.4} pia {:.4}", eval.outcome.ica, eval.outcome.pia);
    Ok(())
}

fn cmd_perturb(args: PerturbArgs) -> Result<()> {
    let mut config: ExperimentConfig = read_json(&args.config)?;
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    if let Some(p) = args.p {
        config.p_values = p;
    }
    if let Some(s) = args.seeds {
        config.seeds = s;
    }
    if args.clamp {
        config.clamp = true;
    }
    if let Some(path) = args.model {
        config.model = moelab::experiment::ModelSource::Checkpoint { path };
    }
    let report = run_experiment(&config)?;
    for path in emit_report(&report, &config.output_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    let data = read_f64s(&args.input)?;
    let block = compress_eb(&data, args.error_bound)?;
    let bytes = block.to_bytes();
    write(&args.output, &bytes)?;
    println!(
        "{} values, {} bytes, ratio {:.4}, {} outliers",
        data.len(),
        bytes.len(),
        moelab_codec::ratio(&block, &data),
        block.outlier_count()
    );
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<()> {
    let bytes = fs::read(&args.input).map_err(|e| moelab::Error::io(&args.input, e))?;
    let values = decompress_bytes(&bytes)?;
    let raw: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write(&args.output, raw)?;
    let block = CompressedBlock::from_bytes(&bytes)?;
    println!("{} values, error bound {}", values.len(), block.error_bound());
    Ok(())
}

fn cmd_offload(args: OffloadArgs) -> Result<()> {
    let model = MoEModel::load(&args.model)?;
    let defaults = TransferParams::default();
    let params = TransferParams {
        pcie_bandwidth: args.pcie_bandwidth.unwrap_or(defaults.pcie_bandwidth),
        decompress_throughput: args
            .decompress_throughput
            .unwrap_or(defaults.decompress_throughput),
        overlap: !args.no_overlap,
        ..defaults
    };
    let summary = compression_summary(&model, args.p, &params)?;
    write(&args.out, summary.offload.to_csv())?;
    let total_raw: f64 = summary.offload.layers.iter().map(|l| l.t_uncompressed).sum();
    let total: f64 = summary.offload.layers.iter().map(|l| l.t_compressed).sum();
    println!("all experts: {total_raw:.3e} s raw, {total:.3e} s compressed");
    Ok(())
}

/// 1 for configuration problems, 2 for I/O and unreadable files, 3 for
/// violated internal invariants.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<moelab::Error>() {
        return match e {
            moelab::Error::Io { .. } | moelab::Error::Format(_) => 2,
            moelab::Error::Codec(CodecError::Format { .. }) => 2,
            moelab::Error::Invariant(_) => 3,
            _ => 1,
        };
    }
    match err.downcast_ref::<CodecError>() {
        Some(CodecError::Format { .. }) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(u8::from(usage));
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::OffloadReport(a) => cmd_offload(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
