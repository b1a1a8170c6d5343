//! Finite-difference verification of the analytic gradients of the total
//! loss, for every scalar parameter of a model.
//!
//! Every loss evaluation rebuilds the graph with the same dropout seed, so
//! stochastic masks are identical across the central-difference probes and
//! the analytic pass; the comparison therefore covers the dropout path
//! too.

use std::collections::BTreeMap;

use crate::data::PaddedConversation;
use crate::loss::{variant_loss, LossConfig};
use crate::model::Model;
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::train::TrainError;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for gradients of ordinary magnitude.
pub const REL_TOL: f64 = 1e-4;
/// Below this analytic magnitude the absolute criterion applies instead.
pub const ABS_SWITCH: f64 = 1e-4;
/// Absolute tolerance for near-zero gradients.
pub const ABS_TOL: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor, over the elements large
    /// enough for the relative rule to apply.
    pub max_rel_error: BTreeMap<String, f64>,
    /// Parameters with at least one element outside tolerance.
    pub failures: Vec<String>,
    /// Total scalar parameters compared.
    pub scalars_checked: usize,
    /// Worst absolute deviation among near-zero analytic gradients.
    pub worst_small_abs: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Largest relative error over all parameters (relative-rule elements).
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().cloned().fold(0.0, f64::max)
    }
}

/// Element-wise tolerance rule: relative error <= `REL_TOL`, except that
/// gradients with analytic magnitude below `ABS_SWITCH` only need absolute
/// agreement within `ABS_TOL`.
fn element_ok(analytic: f64, numeric: f64) -> bool {
    if analytic.abs() < ABS_SWITCH {
        (analytic - numeric).abs() <= ABS_TOL
    } else {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        rel <= REL_TOL
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares two gradient maps with the tolerance rule; exposed separately
/// so corrupted-gradient fixtures can exercise the failure path.
pub fn compare_grads(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> GradCheckReport {
    let mut max_rel_error = BTreeMap::new();
    let mut failures = Vec::new();
    let mut scalars = 0usize;
    let mut worst_small_abs = 0.0f64;
    for (name, a) in analytic {
        let n = &numeric[name];
        let mut worst = 0.0f64;
        let mut ok = true;
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            scalars += 1;
            if av.abs() >= ABS_SWITCH {
                worst = worst.max(rel_error(av, nv));
            } else {
                worst_small_abs = worst_small_abs.max((av - nv).abs());
            }
            if !element_ok(av, nv) {
                ok = false;
            }
        }
        max_rel_error.insert(name.clone(), worst);
        if !ok {
            failures.push(name.clone());
        }
    }
    GradCheckReport { max_rel_error, failures, scalars_checked: scalars, worst_small_abs }
}

/// Mean total loss over the batch for a given parameter assignment. The
/// fixed `graph_seed` pins dropout masks across evaluations.
fn loss_of(
    model: &Model,
    params: &ParameterSet,
    batch: &[PaddedConversation],
    loss_cfg: &LossConfig,
    graph_seed: u64,
) -> Result<f64, TrainError> {
    let g = crate::graph::Graph::new(graph_seed);
    g.set_training(true);
    let bound = params.bind(&g);
    let mut total: Option<crate::graph::Value> = None;
    for item in batch {
        let fwd = model.forward(&bound, &g, item)?;
        let terms = variant_loss(&fwd, model.variant, &item.labels, &item.mask, loss_cfg)?;
        total = Some(match total {
            Some(t) => t.add(terms.total),
            None => terms.total,
        });
    }
    let total = total.expect("nonempty batch").scale(1.0 / batch.len() as f64);
    g.check_finite().map_err(crate::loss::LossError::Graph)?;
    Ok(total.item())
}

/// Analytic gradients of the mean batch loss.
fn analytic_grads(
    model: &Model,
    batch: &[PaddedConversation],
    loss_cfg: &LossConfig,
    graph_seed: u64,
) -> Result<BTreeMap<String, Tensor>, TrainError> {
    let g = crate::graph::Graph::new(graph_seed);
    g.set_training(true);
    let bound = model.params.bind(&g);
    let mut total: Option<crate::graph::Value> = None;
    for item in batch {
        let fwd = model.forward(&bound, &g, item)?;
        let terms = variant_loss(&fwd, model.variant, &item.labels, &item.mask, loss_cfg)?;
        total = Some(match total {
            Some(t) => t.add(terms.total),
            None => terms.total,
        });
    }
    let total = total.expect("nonempty batch").scale(1.0 / batch.len() as f64);
    total.backward().map_err(crate::loss::LossError::Graph)?;
    Ok(bound.grads())
}

/// Checks analytic gradients of the variant's total loss against central
/// finite differences for every scalar parameter.
pub fn grad_check(
    model: &Model,
    batch: &[PaddedConversation],
    loss_cfg: &LossConfig,
    graph_seed: u64,
) -> Result<GradCheckReport, TrainError> {
    assert!(!batch.is_empty(), "grad check needs at least one conversation");
    let analytic = analytic_grads(model, batch, loss_cfg, graph_seed)?;

    let mut numeric = BTreeMap::new();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let base = model.params.get(&name).unwrap().clone();
        let mut grads = Tensor::zeros(base.shape().to_vec());
        for i in 0..base.numel() {
            let mut probe = model.params.clone();
            probe.get_mut(&name).unwrap().data_mut()[i] = base.data()[i] + FD_STEP;
            let plus = loss_of(model, &probe, batch, loss_cfg, graph_seed)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = base.data()[i] - FD_STEP;
            let minus = loss_of(model, &probe, batch, loss_cfg, graph_seed)?;
            grads.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        numeric.insert(name, grads);
    }
    Ok(compare_grads(&analytic, &numeric))
}
