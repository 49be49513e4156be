use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adjacency::AdjacencyOp;
use super::features::encode_unchecked;
use super::loss::{loss, LossWeights, Targets};
use super::network::{forward_with, Activations, Model};
use super::train::PreparedGraph;
use crate::error::Result;
use crate::graph::{MetGraph, NodeId};

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flips a ReLU.
    pub skipped_kinks: usize,
    /// `(parameter index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn relu_pattern(act: &Activations) -> Vec<bool> {
    act.layers.iter().flat_map(|l| l.pre.iter().map(|&z| z > 0.0)).collect()
}

/// Compare analytic gradients of the full objective against central
/// differences on every parameter.
pub fn gradient_check(
    m: &Model,
    g: &MetGraph,
    targets: &BTreeMap<NodeId, [f64; 4]>,
    lambda_recon: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..m.n_params()).collect();
    check_coords(m, g, targets, lambda_recon, eps, &coords)
}

/// [`gradient_check`] on `n` parameter coordinates drawn without replacement.
pub fn gradient_check_sampled(
    m: &Model,
    g: &MetGraph,
    targets: &BTreeMap<NodeId, [f64; 4]>,
    lambda_recon: f64,
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = m.n_params();
    let coords = sample(&mut rng, total, n.min(total)).into_vec();
    check_coords(m, g, targets, lambda_recon, eps, &coords)
}

fn check_coords(
    m: &Model,
    g: &MetGraph,
    targets: &BTreeMap<NodeId, [f64; 4]>,
    lambda_recon: f64,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    // test graphs need not be normalized
    let prepared = PreparedGraph {
        input: encode_unchecked(g),
        adjacency: AdjacencyOp::new(g),
        targets: Targets::from_map(g, targets)?,
    };
    let weights = LossWeights::full(lambda_recon);
    let (_, grads) = prepared.loss_and_grads(m, weights)?;
    let analytic: Vec<f64> = grads.params().copied().collect();
    let base_pattern = relu_pattern(&forward_with(m, &prepared.input, &prepared.adjacency)?);

    let eval = |model: &Model| -> Result<(f64, Vec<bool>)> {
        let act = forward_with(model, &prepared.input, &prepared.adjacency)?;
        let value = loss(&act.predictions, &act.reconstructions, &prepared.targets, &prepared.input, weights)?;
        Ok((value.total, relu_pattern(&act)))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut probe = m.clone();
    for &k in coords {
        let original = *probe.param_mut(k);
        *probe.param_mut(k) = original + eps;
        let (plus, pattern_plus) = eval(&probe)?;
        *probe.param_mut(k) = original - eps;
        let (minus, pattern_minus) = eval(&probe)?;
        *probe.param_mut(k) = original;

        if pattern_plus != base_pattern || pattern_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[k], numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((k, analytic[k], numeric));
        }
    }
    Ok(report)
}
