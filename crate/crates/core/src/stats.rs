//! Expert activation accounting and load-balance metrics.
//!
//! An [`ActivationLog`] counts, per layer and expert, how often the router
//! selected that expert and the total routing weight it received. The four
//! balance metrics operate on one layer's count row:
//!
//! * utilization: fraction of experts selected at least once
//! * normalized entropy: `H(p) / ln(E)` with `p = counts / Σcounts`
//! * Gini coefficient: `Σᵢ Σⱼ |xᵢ - xⱼ| / (2 E² μ)`
//! * imbalance score: coefficient of variation, population `std / mean`.
//!   This formula is defined by this crate; it is scale invariant.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{ExpertId, MoEModel, Routing, RoutingObserver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationLog {
    num_layers: usize,
    num_experts: usize,
    top_k: usize,
    /// Row-major `[num_layers × num_experts]`.
    counts: Vec<u64>,
    weight_sums: Vec<f64>,
    tokens_processed: u64,
}

impl ActivationLog {
    pub fn new(num_layers: usize, num_experts: usize, top_k: usize) -> Self {
        Self {
            num_layers,
            num_experts,
            top_k,
            counts: vec![0; num_layers * num_experts],
            weight_sums: vec![0.0; num_layers * num_experts],
            tokens_processed: 0,
        }
    }

    pub fn for_model(model: &MoEModel) -> Self {
        let c = &model.config;
        Self::new(c.num_layers, c.num_experts, c.top_k)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn tokens_processed(&self) -> u64 {
        self.tokens_processed
    }

    pub fn counts_row(&self, layer: usize) -> &[u64] {
        &self.counts[layer * self.num_experts..(layer + 1) * self.num_experts]
    }

    pub fn weight_row(&self, layer: usize) -> &[f64] {
        &self.weight_sums[layer * self.num_experts..(layer + 1) * self.num_experts]
    }

    pub fn count(&self, id: ExpertId) -> u64 {
        self.counts[id.layer * self.num_experts + id.expert]
    }

    pub fn all_counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_processed == 0
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.num_layers == other.num_layers
            && self.num_experts == other.num_experts
            && self.top_k == other.top_k
    }

    /// Elementwise sum of two logs of the same shape.
    pub fn merge(&self, other: &ActivationLog) -> Result<ActivationLog> {
        let mut out = self.clone();
        out.absorb(other)?;
        Ok(out)
    }

    pub fn absorb(&mut self, other: &ActivationLog) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot merge {}x{} (k={}) log with {}x{} (k={})",
                self.num_layers,
                self.num_experts,
                self.top_k,
                other.num_layers,
                other.num_experts,
                other.top_k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.weight_sums.iter_mut().zip(&other.weight_sums) {
            *a += b;
        }
        self.tokens_processed += other.tokens_processed;
        Ok(())
    }

    /// Checks the accounting invariants: every layer's counts sum to
    /// `tokens × k` and its weights to `tokens` (within `1e-6`).
    pub fn check_conservation(&self) -> Result<()> {
        let expected = self.tokens_processed * self.top_k as u64;
        for l in 0..self.num_layers {
            let total: u64 = self.counts_row(l).iter().sum();
            if total != expected {
                return Err(Error::Invariant(format!(
                    "layer {l}: {total} activations, expected {expected}"
                )));
            }
            let w: f64 = self.weight_row(l).iter().sum();
            if (w - self.tokens_processed as f64).abs() > 1e-6 {
                return Err(Error::Invariant(format!(
                    "layer {l}: routing weight {w}, expected {}",
                    self.tokens_processed
                )));
            }
        }
        Ok(())
    }
}

impl RoutingObserver for ActivationLog {
    fn record(&mut self, layer: usize, routing: &Routing) {
        for (&e, &w) in routing.experts.iter().zip(&routing.weights) {
            let i = layer * self.num_experts + e;
            self.counts[i] += 1;
            self.weight_sums[i] += w;
        }
    }

    fn token_processed(&mut self) {
        self.tokens_processed += 1;
    }
}

fn require_positive(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain("metric undefined for an all-zero row".into()));
    }
    Ok(total as f64)
}

pub fn expert_utilization(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len() as f64
}

/// Normalized Shannon entropy. A single-expert row has no uncertainty and
/// scores 0.
pub fn normalized_entropy(counts: &[u64]) -> Result<f64> {
    let total = require_positive(counts)?;
    if counts.len() < 2 {
        return Ok(0.0);
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (counts.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Gini coefficient via the sorted-rank form, `O(E log E)`.
pub fn gini(counts: &[u64]) -> Result<f64> {
    let total = require_positive(counts)?;
    let n = counts.len() as f64;
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    // Σᵢ (2i - n - 1) x₍ᵢ₎ with 1-based ranks
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x as f64)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Coefficient of variation of the counts.
pub fn imbalance_score(counts: &[u64]) -> Result<f64> {
    let total = require_positive(counts)?;
    let n = counts.len() as f64;
    let mean = total / n;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(var.sqrt() / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceMetrics {
    pub utilization: f64,
    pub entropy: f64,
    pub gini: f64,
    pub imbalance: f64,
}

impl BalanceMetrics {
    pub fn of(counts: &[u64]) -> Result<Self> {
        Ok(Self {
            utilization: expert_utilization(counts),
            entropy: normalized_entropy(counts)?,
            gini: gini(counts)?,
            imbalance: imbalance_score(counts)?,
        })
    }
}

/// Per-layer metrics plus one aggregate over every (layer, expert) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub layers: BTreeMap<usize, BalanceMetrics>,
    pub global: BalanceMetrics,
}

pub fn summarize(log: &ActivationLog) -> Result<MetricSummary> {
    if log.is_empty() {
        return Err(Error::Protocol("activation log is empty".into()));
    }
    let layers = (0..log.num_layers)
        .map(|l| Ok((l, BalanceMetrics::of(log.counts_row(l))?)))
        .collect::<Result<_>>()?;
    Ok(MetricSummary {
        layers,
        global: BalanceMetrics::of(&log.counts)?,
    })
}

/// Heatmap rows `layer,expert,count,weight_sum`, layer-major.
pub fn heatmap_csv(log: &ActivationLog) -> String {
    let mut out = String::from("layer,expert,count,weight_sum\n");
    for l in 0..log.num_layers {
        for e in 0..log.num_experts {
            let i = l * log.num_experts + e;
            writeln!(out, "{l},{e},{},{}", log.counts[i], log.weight_sums[i])
                .expect("writing to a String");
        }
    }
    out
}

pub fn export_heatmap(log: &ActivationLog, path: &Path) -> Result<()> {
    fs::write(path, heatmap_csv(log)).map_err(|e| Error::io(path, e))
}

/// Result of a two-sample Mann-Whitney U test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "first sample tends to be larger".
    pub p_greater: f64,
    pub p_two_sided: f64,
}

/// Mann-Whitney U test with average ranks for ties, tie-corrected variance,
/// and a continuity-corrected normal approximation.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("Mann-Whitney needs two non-empty samples".into()));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = pooled.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += pooled[i..=j].iter().filter(|p| p.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    if var <= 0.0 {
        // every value tied: no evidence either way
        return Ok(MannWhitney {
            u,
            z: 0.0,
            p_greater: 1.0,
            p_two_sided: 1.0,
        });
    }
    let sd = var.sqrt();
    let z = (u - mean) / sd;
    let z_greater = (u - mean - 0.5) / sd;
    let z_two = ((u - mean).abs() - 0.5).max(0.0) / sd;
    Ok(MannWhitney {
        u,
        z,
        p_greater: 1.0 - normal.cdf(z_greater),
        p_two_sided: (2.0 * (1.0 - normal.cdf(z_two))).min(1.0),
    })
}
