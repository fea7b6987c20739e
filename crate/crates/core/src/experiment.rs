//! Config-driven sensitivity experiments and their reports.
//!
//! Pipeline: obtain a model (load or train), evaluate it cleanly while
//! recording activations, resolve every protocol arm against that clean log,
//! then evaluate each `(arm, p, seed)` cell on its own perturbed copy.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use moelab_codec::{compress_eb, decompress_eb, ratio};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOutcome};
use crate::model::{ExpertId, ModelConfig, MoEModel};
use crate::offload::{speedup_report, SpeedupReport, TransferParams};
use crate::perturbation::{compute_error_bound, resolve_plan, ErrorSpec, LayerRange, TargetBound, TargetStrategy};
use crate::rng::GENERATOR;
use crate::stats::{heatmap_csv, mann_whitney_u, summarize, ActivationLog, MannWhitney, MetricSummary};
use crate::workbench::{generate_dataset, generate_split, train, Split, TaskSpec, TrainConfig};

/// Fraction of unparseable outputs above which a cell is flagged degenerate.
pub const DEGENERATE_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ModelSource {
    Checkpoint {
        path: PathBuf,
    },
    Train {
        #[serde(default)]
        config: ModelConfig,
        #[serde(default)]
        train: TrainConfig,
        #[serde(default = "default_train_samples")]
        train_samples: usize,
    },
}

fn default_train_samples() -> usize {
    2000
}

/// Named protocol presets; each expands into one or more arms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "kebab-case")]
pub enum ProtocolPreset {
    SingleExpert {
        layer: usize,
        expert: usize,
    },
    HighestFrequent {
        layer: usize,
    },
    /// The most activated expert of each layer, one arm per layer.
    CrossLayer,
    Topk {
        layer: usize,
        ks: Vec<usize>,
    },
    /// Every expert of a layer; one arm per listed layer, all layers if none.
    AllInLayer {
        #[serde(default)]
        layers: Option<Vec<usize>>,
    },
    /// The most activated expert of every layer in a group, one arm per
    /// group. Without explicit groups, three overlapping groups of about
    /// 10/26 of the depth cover the first, middle and last layers.
    Grouped {
        #[serde(default)]
        groups: Option<Vec<LayerRange>>,
    },
    Randomize {
        layer: usize,
        expert: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub strategy: TargetStrategy,
}

/// Three overlapping groups spanning `num_layers`: first, middle, last.
pub fn default_groups(num_layers: usize) -> Vec<LayerRange> {
    let size = ((num_layers as f64 * 10.0 / 26.0).round() as usize).clamp(1, num_layers);
    let last = num_layers - size;
    let mut starts = vec![0, last / 2, last];
    starts.dedup();
    starts
        .into_iter()
        .map(|s| LayerRange::new(s, s + size - 1))
        .collect()
}

impl ProtocolPreset {
    pub fn arms(&self, num_layers: usize) -> Vec<Arm> {
        let arm = |label: String, strategy| Arm { label, strategy };
        match self {
            Self::SingleExpert { layer, expert } => vec![arm(
                format!("L{layer}.E{expert}"),
                TargetStrategy::SingleExpert(ExpertId::new(*layer, *expert)),
            )],
            Self::HighestFrequent { layer } => vec![arm(
                format!("L{layer}"),
                TargetStrategy::HighestFrequent { layer: *layer },
            )],
            Self::CrossLayer => (0..num_layers)
                .map(|layer| arm(format!("L{layer}"), TargetStrategy::HighestFrequent { layer }))
                .collect(),
            Self::Topk { layer, ks } => ks
                .iter()
                .map(|&k| {
                    arm(
                        format!("L{layer}.top{k}"),
                        TargetStrategy::TopKFrequent { layer: *layer, k },
                    )
                })
                .collect(),
            Self::AllInLayer { layers } => layers
                .clone()
                .unwrap_or_else(|| (0..num_layers).collect())
                .into_iter()
                .map(|layer| arm(format!("L{layer}"), TargetStrategy::AllInLayer { layer }))
                .collect(),
            Self::Grouped { groups } => groups
                .clone()
                .unwrap_or_else(|| default_groups(num_layers))
                .into_iter()
                .map(|g| {
                    arm(
                        format!("L{}-L{}", g.start, g.end),
                        TargetStrategy::GroupedHighestFrequent {
                            ranges: (g.start..=g.end).map(LayerRange::single).collect(),
                        },
                    )
                })
                .collect(),
            Self::Randomize { layer, expert } => vec![arm(
                format!("L{layer}.E{expert}"),
                TargetStrategy::RandomizeExpert(ExpertId::new(*layer, *expert)),
            )],
        }
    }
}

fn default_eval_samples() -> usize {
    200
}

fn default_compression_p() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub task: TaskSpec,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    pub protocol: ProtocolPreset,
    pub p_values: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub clamp: bool,
    /// Error bound fraction used for the compression summary.
    #[serde(default = "default_compression_p")]
    pub compression_p: f64,
    #[serde(default)]
    pub transfer: TransferParams,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one p value and one seed".into()));
        }
        if let Some(p) = self.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("p values must lie in [0, 1], got {p}")));
        }
        if !(self.compression_p > 0.0 && self.compression_p.is_finite()) {
            return Err(Error::Config("compression_p must be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        self.task.validate()?;
        self.transfer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let ModelSource::Train { config, train, train_samples } = &self.model {
            config.validate()?;
            train.validate()?;
            if *train_samples == 0 {
                return Err(Error::Config("train_samples must be positive".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the config's JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub eval_ica: f64,
    pub eval_pia: f64,
    pub reached_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub param_count: usize,
    /// SHA-256 of the checkpoint bytes.
    pub checkpoint_sha256: String,
    pub training: Option<TrainingSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ica: f64,
    pub pia: f64,
    pub unparseable_fraction: f64,
    pub degenerate: bool,
}

impl Score {
    fn of(outcome: &EvalOutcome) -> Self {
        let unparseable_fraction = outcome.unparseable_fraction();
        Self {
            ica: outcome.ica,
            pia: outcome.pia,
            unparseable_fraction,
            degenerate: unparseable_fraction > DEGENERATE_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTargets {
    pub p: f64,
    pub targets: Vec<TargetBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub label: String,
    pub strategy: TargetStrategy,
    pub resolved: Vec<ResolvedTargets>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: String,
    pub p: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGroup {
    pub arm: String,
    pub p: f64,
    pub seeds: usize,
    pub mean_ica: f64,
    pub mean_pia: f64,
    pub std_pia: f64,
    pub degenerate_cells: usize,
}

/// PIA at the smallest p against PIA at the largest p of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponse {
    pub arm: String,
    pub p_low: f64,
    pub p_high: f64,
    pub test: MannWhitney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCompression {
    pub expert: ExpertId,
    pub error_bound: f64,
    pub ratio: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub p: f64,
    pub experts: Vec<ExpertCompression>,
    pub offload: SpeedupReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub generator: String,
    pub rng: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub model: ModelInfo,
    pub baseline: Score,
    pub activation: MetricSummary,
    pub activation_log: ActivationLog,
    pub arms: Vec<ArmReport>,
    pub cells: Vec<Cell>,
    pub groups: Vec<CellGroup>,
    pub dose_response: Vec<DoseResponse>,
    pub compression: CompressionSummary,
}

fn obtain_model(config: &ExperimentConfig) -> Result<(MoEModel, Option<TrainingSummary>)> {
    match &config.model {
        ModelSource::Checkpoint { path } => Ok((MoEModel::load(path)?, None)),
        ModelSource::Train {
            config: model_config,
            train: tc,
            train_samples,
        } => {
            let data = generate_dataset(&config.task, *train_samples)?;
            let held_out = generate_split(&config.task, config.eval_samples, Split::Eval)?;
            let out = train(model_config, &data, &held_out, tc)?;
            let summary = TrainingSummary {
                steps_run: out.steps_run,
                final_loss: out.loss_history.last().copied().unwrap_or(f64::NAN),
                eval_ica: out.eval_ica,
                eval_pia: out.eval_pia,
                reached_target: out.reached_target,
            };
            Ok((out.model, Some(summary)))
        }
    }
}

/// Compresses every routed expert at `p` times its mean absolute value and
/// feeds the measured ratios to the offload model.
pub fn compression_summary(model: &MoEModel, p: f64, transfer: &TransferParams) -> Result<CompressionSummary> {
    let c = &model.config;
    let ids: Vec<ExpertId> = (0..c.num_layers)
        .flat_map(|l| (0..c.num_experts).map(move |e| ExpertId::new(l, e)))
        .collect();
    let experts = ids
        .par_iter()
        .map(|&id| {
            let w = model.expert(id)?;
            let values: Vec<f64> = w.params().collect();
            let error_bound = compute_error_bound(w, p)?;
            let block = compress_eb(&values, error_bound)?;
            let back = decompress_eb(&block)?;
            let max_abs_error = values
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if max_abs_error > error_bound {
                return Err(Error::Invariant(format!(
                    "{id}: reconstruction error {max_abs_error} exceeds bound {error_bound}"
                )));
            }
            Ok(ExpertCompression {
                expert: id,
                error_bound,
                ratio: ratio(&block, &values),
                max_abs_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<(ExpertId, f64)> = experts.iter().map(|e| (e.expert, e.ratio)).collect();
    Ok(CompressionSummary {
        p,
        experts,
        offload: speedup_report(c, &ratios, transfer)?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let (model, training) = obtain_model(config)?;
    let cfg = &model.config;
    let arms = config.protocol.arms(cfg.num_layers);
    for a in &arms {
        a.strategy.validate(cfg.num_layers, cfg.num_experts)?;
    }
    let eval_set = generate_split(&config.task, config.eval_samples, Split::Eval)?;
    if eval_set.task.max_sequence_len() > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "task sequences need {} positions, model allows {}",
            eval_set.task.max_sequence_len(),
            cfg.max_seq_len
        )));
    }

    let clean = evaluate(&model, &eval_set, true)?;
    let log = clean.log.expect("activations requested");
    log.check_conservation()?;
    let activation = summarize(&log)?;

    let mut arm_reports = Vec::with_capacity(arms.len());
    let mut jobs = Vec::new();
    for arm in &arms {
        let mut resolved = Vec::with_capacity(config.p_values.len());
        for &p in &config.p_values {
            let spec = ErrorSpec {
                clamp_to_bound: config.clamp,
                ..ErrorSpec::new(p, 0)
            };
            let plan = resolve_plan(&model, &arm.strategy, spec, &log)?;
            resolved.push(ResolvedTargets {
                p,
                targets: plan.targets.clone(),
            });
            for &seed in &config.seeds {
                let mut seeded = plan.clone();
                seeded.error.seed = seed;
                jobs.push((arm.label.clone(), seeded));
            }
        }
        arm_reports.push(ArmReport {
            label: arm.label.clone(),
            strategy: arm.strategy.clone(),
            resolved,
        });
    }

    let cells = jobs
        .par_iter()
        .map(|(label, plan)| {
            let perturbed = plan.apply(&model)?;
            let outcome = evaluate(&perturbed, &eval_set, false)?.outcome;
            Ok(Cell {
                arm: label.clone(),
                p: plan.error.p,
                seed: plan.error.seed,
                score: Score::of(&outcome),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups = Vec::new();
    let mut dose_response = Vec::new();
    for arm in &arms {
        for &p in &config.p_values {
            let rows: Vec<&Cell> = cells.iter().filter(|c| c.arm == arm.label && c.p == p).collect();
            let pia: Vec<f64> = rows.iter().map(|c| c.score.pia).collect();
            let ica: Vec<f64> = rows.iter().map(|c| c.score.ica).collect();
            groups.push(CellGroup {
                arm: arm.label.clone(),
                p,
                seeds: rows.len(),
                mean_ica: mean(&ica),
                mean_pia: mean(&pia),
                std_pia: std_dev(&pia),
                degenerate_cells: rows.iter().filter(|c| c.score.degenerate).count(),
            });
        }
        let p_low = config.p_values.iter().copied().fold(f64::INFINITY, f64::min);
        let p_high = config.p_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if p_low < p_high {
            let pia_at = |p: f64| -> Vec<f64> {
                cells
                    .iter()
                    .filter(|c| c.arm == arm.label && c.p == p)
                    .map(|c| c.score.pia)
                    .collect()
            };
            dose_response.push(DoseResponse {
                arm: arm.label.clone(),
                p_low,
                p_high,
                test: mann_whitney_u(&pia_at(p_low), &pia_at(p_high))?,
            });
        }
    }

    let compression = compression_summary(&model, config.compression_p, &config.transfer)?;
    Ok(Report {
        generator: format!("moelab {}", env!("CARGO_PKG_VERSION")),
        rng: GENERATOR.to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        model: ModelInfo {
            config: *cfg,
            param_count: model.param_count(),
            checkpoint_sha256: hex::encode(Sha256::digest(model.to_bytes())),
            training,
        },
        baseline: Score::of(&clean.outcome),
        activation,
        activation_log: log,
        arms: arm_reports,
        cells,
        groups,
        dose_response,
        compression,
    })
}

/// `arm,p,seed,ica,pia,degenerate` with the clean baseline first.
pub fn summary_csv(report: &Report) -> String {
    let mut out = String::from("arm,p,seed,ica,pia,degenerate\n");
    let b = &report.baseline;
    writeln!(out, "baseline,,,{},{},{}", b.ica, b.pia, b.degenerate).expect("writing to a String");
    for c in &report.cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.arm, c.p, c.seed, c.score.ica, c.score.pia, c.score.degenerate
        )
        .expect("writing to a String");
    }
    out
}

/// Writes `report.json`, `summary.csv`, `heatmap.csv` and `compression.csv`
/// into `dir`, creating it if needed. Returns the written paths.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    let files = [
        ("report.json", json),
        ("summary.csv", summary_csv(report)),
        ("heatmap.csv", heatmap_csv(&report.activation_log)),
        ("compression.csv", report.compression.offload.to_csv()),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
