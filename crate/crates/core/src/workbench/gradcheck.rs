//! Finite-difference verification of the analytic gradient.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::backprop::{batch_logits, loss_and_grad, Example, SequenceRun};
use crate::error::{Error, Result};
use crate::model::{ExpertId, MoEModel};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Central differences at
/// [`FD_STEP`] carry an absolute rounding error near `1e-11`, so gradient
/// components below the floor are effectively compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Largest dimension accepted by [`gradient_check`].
pub const MAX_CHECK_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters of experts never selected for the batch.
    pub inactive: usize,
    /// Parameters whose perturbation changed a routing decision.
    pub route_flips: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn selected_experts(model: &MoEModel, runs: &[SequenceRun]) -> BTreeSet<ExpertId> {
    let mut set = BTreeSet::new();
    for run in runs {
        // layer-major: `positions` entries per layer
        let positions = run.routes.len() / model.config.num_layers;
        for (i, sel) in run.routes.iter().enumerate() {
            set.extend(sel.iter().map(|&e| ExpertId::new(i / positions, e)));
        }
    }
    set
}

/// `Σ (CE⁺ - CE⁻)` over supervised positions, evaluated from logit deltas
/// so the two nearly equal losses are never subtracted directly.
fn loss_delta(batch: &[Example], plus: &[SequenceRun], minus: &[SequenceRun]) -> f64 {
    let mut total = 0.0;
    for ((ex, p), m) in batch.iter().zip(plus).zip(minus) {
        for ((zp, zm), target) in p.logits.iter().zip(&m.logits).zip(&ex.targets) {
            let Some(y) = target else { continue };
            let max = zm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = zm.iter().map(|v| (v - max).exp()).sum();
            // lse⁺ - lse⁻ = ln Σ softmax⁻ᵢ · exp(Δᵢ)
            let shift: f64 = zp
                .iter()
                .zip(zm)
                .map(|(a, b)| (b - max).exp() / z * (a - b).exp_m1())
                .sum();
            let y = *y as usize;
            total += shift.ln_1p() - (zp[y] - zm[y]);
        }
    }
    total
}

/// Compares the analytic gradient with central differences for every
/// parameter on the active routing path and returns the worst relative error.
pub fn gradient_check(model: &MoEModel, batch: &[Example]) -> Result<GradCheckReport> {
    let c = &model.config;
    if [c.num_layers, c.num_experts, c.d_model, c.d_ff]
        .iter()
        .any(|&d| d > MAX_CHECK_DIM)
    {
        return Err(Error::Config(format!(
            "gradient check needs every model dimension ≤ {MAX_CHECK_DIM}"
        )));
    }
    let (_, grad) = loss_and_grad(model, batch);
    let count = batch.iter().map(Example::target_count).sum::<usize>().max(1) as f64;
    let base = batch_logits(model, batch);
    let active = selected_experts(model, &base);
    let same_routes = |runs: &[SequenceRun]| runs.iter().zip(&base).all(|(a, b)| a.routes == b.routes);
    let owners = model.tensor_owners();

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        inactive: 0,
        route_flips: 0,
    };
    for (t, (g, owner)) in grad.tensors().into_iter().zip(owners).enumerate() {
        if owner.is_some_and(|id| !active.contains(&id)) {
            report.inactive += g.len();
            continue;
        }
        for (i, &analytic) in g.data().iter().enumerate() {
            let original = model.tensors()[t].data()[i];
            let mut loss_at = |v: f64| {
                probe.tensors_mut()[t].data_mut()[i] = v;
                batch_logits(&probe, batch)
            };
            let plus = loss_at(original + FD_STEP);
            let minus = loss_at(original - FD_STEP);
            probe.tensors_mut()[t].data_mut()[i] = original;
            if !same_routes(&plus) || !same_routes(&minus) {
                report.route_flips += 1;
                continue;
            }
            let numeric = loss_delta(batch, &plus, &minus) / count / (2.0 * FD_STEP);
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
