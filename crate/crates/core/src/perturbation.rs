//! Error injection into expert parameters.
//!
//! For a target expert with parameters `θ` (both matrices, `n` values) the
//! error bound is `ê = p · Σ|θᵢ| / n`, and every parameter receives an
//! independent draw from a normal distribution with standard deviation `ê`,
//! optionally clamped to `[-ê, ê]`. Each expert draws from its own stream
//! derived from `(seed, layer, expert)`, so the values an expert receives do
//! not depend on which other experts share the plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertId, ExpertWeights, MoEModel};
use crate::rng::RngStream;
use crate::stats::ActivationLog;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSpec {
    /// Fraction of the mean absolute parameter value, in `[0, 1]`.
    pub p: f64,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub clamp_to_bound: bool,
    pub seed: u64,
}

impl ErrorSpec {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            distribution: Distribution::Normal,
            clamp_to_bound: false,
            seed,
        }
    }

    pub fn clamped(self) -> Self {
        Self {
            clamp_to_bound: true,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p must lie in [0, 1], got {}", self.p)));
        }
        Ok(())
    }
}

/// Inclusive layer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(layer: usize) -> Self {
        Self::new(layer, layer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", content = "params", rename_all = "snake_case")]
pub enum TargetStrategy {
    SingleExpert(ExpertId),
    HighestFrequent { layer: usize },
    TopKFrequent { layer: usize, k: usize },
    AllInLayer { layer: usize },
    /// One pick per range: the most activated (layer, expert) within it.
    GroupedHighestFrequent { ranges: Vec<LayerRange> },
    RandomizeExpert(ExpertId),
}

impl TargetStrategy {
    fn needs_frequencies(&self) -> bool {
        matches!(
            self,
            Self::HighestFrequent { .. } | Self::TopKFrequent { .. } | Self::GroupedHighestFrequent { .. }
        )
    }

    /// Range-checks every referenced layer and expert.
    pub fn validate(&self, num_layers: usize, num_experts: usize) -> Result<()> {
        let layer_ok = |l: usize| {
            if l < num_layers {
                Ok(())
            } else {
                Err(Error::Config(format!("layer {l} out of range for {num_layers} layers")))
            }
        };
        let id_ok = |id: &ExpertId| {
            layer_ok(id.layer)?;
            if id.expert < num_experts {
                Ok(())
            } else {
                Err(Error::Config(format!("expert {id} out of range for {num_experts} experts")))
            }
        };
        match self {
            Self::SingleExpert(id) | Self::RandomizeExpert(id) => id_ok(id),
            Self::HighestFrequent { layer } | Self::AllInLayer { layer } => layer_ok(*layer),
            Self::TopKFrequent { layer, k } => {
                layer_ok(*layer)?;
                if (1..=num_experts).contains(k) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("K must be in 1..={num_experts}, got {k}")))
                }
            }
            Self::GroupedHighestFrequent { ranges } => {
                if ranges.is_empty() {
                    return Err(Error::Config("grouped strategy needs at least one range".into()));
                }
                for r in ranges {
                    if r.start > r.end {
                        return Err(Error::Config(format!("empty layer range {}..={}", r.start, r.end)));
                    }
                    layer_ok(r.end)?;
                }
                Ok(())
            }
        }
    }
}

/// Expert indices of `row` sorted by descending count, ties to the lower index.
fn by_frequency(row: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// Resolves a strategy to distinct expert ids using the activation log.
pub fn select_targets(strategy: &TargetStrategy, log: &ActivationLog) -> Result<Vec<ExpertId>> {
    strategy.validate(log.num_layers(), log.num_experts())?;
    if strategy.needs_frequencies() && log.is_empty() {
        return Err(Error::Protocol(
            "frequency-based targeting needs a non-empty activation log".into(),
        ));
    }
    let ids = match strategy {
        TargetStrategy::SingleExpert(id) | TargetStrategy::RandomizeExpert(id) => vec![*id],
        TargetStrategy::HighestFrequent { layer } => {
            vec![ExpertId::new(*layer, by_frequency(log.counts_row(*layer))[0])]
        }
        TargetStrategy::TopKFrequent { layer, k } => by_frequency(log.counts_row(*layer))
            .into_iter()
            .take(*k)
            .map(|e| ExpertId::new(*layer, e))
            .collect(),
        TargetStrategy::AllInLayer { layer } => (0..log.num_experts())
            .map(|e| ExpertId::new(*layer, e))
            .collect(),
        TargetStrategy::GroupedHighestFrequent { ranges } => {
            let mut picks: Vec<ExpertId> = Vec::new();
            for r in ranges {
                let mut best: Option<(u64, ExpertId)> = None;
                for l in r.start..=r.end {
                    for (e, &c) in log.counts_row(l).iter().enumerate() {
                        // strict comparison keeps the lowest (layer, expert) on ties
                        if best.is_none_or(|(bc, _)| c > bc) {
                            best = Some((c, ExpertId::new(l, e)));
                        }
                    }
                }
                let (_, id) = best.expect("validated non-empty range");
                if !picks.contains(&id) {
                    picks.push(id);
                }
            }
            picks
        }
    };
    Ok(ids)
}

/// `p` times the mean absolute parameter value of the expert.
pub fn compute_error_bound(expert: &ExpertWeights, p: f64) -> Result<f64> {
    if !(p.is_finite() && p >= 0.0) {
        return Err(Error::Domain(format!("p must be finite and non-negative, got {p}")));
    }
    let n = expert.param_count();
    if n == 0 {
        return Err(Error::Domain("expert has no parameters".into()));
    }
    Ok(p * (expert.params().map(f64::abs).sum::<f64>() / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetBound {
    pub id: ExpertId,
    pub error_bound: f64,
}

/// A strategy resolved against a model and activation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub strategy: TargetStrategy,
    pub error: ErrorSpec,
    pub targets: Vec<TargetBound>,
}

impl PerturbationPlan {
    pub fn ids(&self) -> Vec<ExpertId> {
        self.targets.iter().map(|t| t.id).collect()
    }

    /// Applies the plan: fresh weights for `RandomizeExpert`, error injection
    /// otherwise.
    pub fn apply(&self, model: &MoEModel) -> Result<MoEModel> {
        match &self.strategy {
            TargetStrategy::RandomizeExpert(id) => randomize_expert(model, *id, self.error.seed),
            _ => inject_errors(model, self),
        }
    }
}

pub fn resolve_plan(
    model: &MoEModel,
    strategy: &TargetStrategy,
    error: ErrorSpec,
    log: &ActivationLog,
) -> Result<PerturbationPlan> {
    error.validate()?;
    let targets = select_targets(strategy, log)?
        .into_iter()
        .map(|id| {
            Ok(TargetBound {
                id,
                error_bound: compute_error_bound(model.expert(id)?, error.p)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationPlan {
        strategy: strategy.clone(),
        error,
        targets,
    })
}

/// Serializable plan request: `{strategy, params, p, clamp, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    #[serde(flatten)]
    pub strategy: TargetStrategy,
    pub p: f64,
    #[serde(default)]
    pub clamp: bool,
    pub seed: u64,
}

impl PlanSpec {
    pub fn error_spec(&self) -> ErrorSpec {
        ErrorSpec {
            p: self.p,
            distribution: Distribution::Normal,
            clamp_to_bound: self.clamp,
            seed: self.seed,
        }
    }

    pub fn resolve(&self, model: &MoEModel, log: &ActivationLog) -> Result<PerturbationPlan> {
        resolve_plan(model, &self.strategy, self.error_spec(), log)
    }
}

fn expert_stream(seed: u64, id: ExpertId) -> RngStream {
    RngStream::new(seed).child(&[id.layer as u64, id.expert as u64])
}

/// Returns a copy of `model` with the plan's errors added to each targeted
/// expert. Everything else is bitwise unchanged; a zero bound leaves the
/// expert untouched.
pub fn inject_errors(model: &MoEModel, plan: &PerturbationPlan) -> Result<MoEModel> {
    let mut out = model.clone();
    for t in &plan.targets {
        let e = t.error_bound;
        if !(e.is_finite() && e >= 0.0) {
            return Err(Error::Domain(format!("error bound for {} must be finite and non-negative", t.id)));
        }
        let expert = out.expert_mut(t.id)?;
        if e == 0.0 {
            continue;
        }
        let mut rng = expert_stream(plan.error.seed, t.id);
        for tensor in expert.tensors_mut() {
            for w in tensor.data_mut() {
                let delta = rng.normal(e);
                *w = if plan.error.clamp_to_bound {
                    clamped_add(*w, delta, e)
                } else {
                    *w + delta
                };
            }
        }
    }
    Ok(out)
}

/// `w + delta` with the stored result, not just `delta`, kept within `e` of
/// `w`: rounding of the sum can otherwise overshoot by an ulp.
fn clamped_add(w: f64, delta: f64, e: f64) -> f64 {
    let mut out = w + delta.clamp(-e, e);
    while (out - w).abs() > e {
        out = if out > w { out.next_down() } else { out.next_up() };
    }
    out
}

/// Replaces one expert with freshly initialized parameters.
pub fn randomize_expert(model: &MoEModel, id: ExpertId, seed: u64) -> Result<MoEModel> {
    let mut out = model.clone();
    let mut rng = expert_stream(seed, id);
    *out.expert_mut(id)? = ExpertWeights::fresh(&model.config, &mut rng);
    Ok(out)
}
