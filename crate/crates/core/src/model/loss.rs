use std::collections::BTreeMap;

use ndarray::{s, Array2};

use super::features::{FeatureMatrix, MASK_OFFSET, VALUE_OFFSET};
use super::network::N_TARGETS;
use crate::error::{Error, Result};
use crate::graph::{MetGraph, NodeId, N_VARIABLES};

/// Regression targets aligned with graph rows; only grid rows carry one.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub values: Array2<f64>,
    pub present: Vec<bool>,
}

impl Targets {
    pub fn from_map(g: &MetGraph, targets: &BTreeMap<NodeId, [f64; N_TARGETS]>) -> Result<Self> {
        let mut values = Array2::zeros((g.len(), N_TARGETS));
        let mut present = vec![false; g.len()];
        for (id, t) in targets {
            let i = g.position(*id).ok_or(Error::UnknownNode(*id))?;
            if !g.nodes()[i].kind.is_grid() {
                return Err(Error::NotGridTarget(*id));
            }
            values.row_mut(i).assign(&ndarray::aview1(t));
            present[i] = true;
        }
        Ok(Targets { values, present })
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// Weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub regression: f64,
    pub recon: f64,
}

impl LossWeights {
    /// Full objective `MSE + lambda * masked MSE`.
    pub fn full(lambda_recon: f64) -> Self {
        LossWeights {
            regression: 1.0,
            recon: lambda_recon,
        }
    }

    /// Reconstruction pretraining.
    pub fn recon_only() -> Self {
        LossWeights {
            regression: 0.0,
            recon: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// Mean squared error over grid rows and the four state channels.
    pub regression: f64,
    /// Squared error over present value slots, averaged over present slots.
    pub recon: f64,
}

pub fn loss(pred: &Array2<f64>, recon: &Array2<f64>, targets: &Targets, features: &FeatureMatrix, w: LossWeights) -> Result<LossValue> {
    loss_impl(pred, recon, targets, features, w, false).map(|(v, _, _)| v)
}

/// Loss value plus its gradients with respect to `pred` and `recon`.
pub fn loss_and_grads(
    pred: &Array2<f64>,
    recon: &Array2<f64>,
    targets: &Targets,
    features: &FeatureMatrix,
    w: LossWeights,
) -> Result<(LossValue, Array2<f64>, Array2<f64>)> {
    loss_impl(pred, recon, targets, features, w, true)
}

fn loss_impl(
    pred: &Array2<f64>,
    recon: &Array2<f64>,
    targets: &Targets,
    features: &FeatureMatrix,
    w: LossWeights,
    want_grads: bool,
) -> Result<(LossValue, Array2<f64>, Array2<f64>)> {
    let n = features.rows();
    if pred.dim() != (n, N_TARGETS) || recon.dim() != (n, N_VARIABLES) || targets.values.nrows() != n {
        return Err(Error::Dimension(format!(
            "loss inputs: pred {:?}, recon {:?}, targets {:?}, {} feature rows",
            pred.dim(),
            recon.dim(),
            targets.values.dim(),
            n
        )));
    }
    let n_targets = targets.count();
    if n_targets == 0 {
        return Err(Error::NoGridNodes);
    }
    let mut d_pred = Array2::zeros(if want_grads { (n, N_TARGETS) } else { (0, 0) });
    let mut d_recon = Array2::zeros(if want_grads { (n, N_VARIABLES) } else { (0, 0) });

    let denom = (n_targets * N_TARGETS) as f64;
    let mut sse = 0.0;
    for i in (0..n).filter(|&i| targets.present[i]) {
        for k in 0..N_TARGETS {
            let e = pred[[i, k]] - targets.values[[i, k]];
            sse += e * e;
            if want_grads {
                d_pred[[i, k]] = w.regression * 2.0 * e / denom;
            }
        }
    }
    let regression = sse / denom;

    let values = features.0.slice(s![.., VALUE_OFFSET..MASK_OFFSET]);
    let mask = features.0.slice(s![.., MASK_OFFSET..]);
    let n_present = mask.sum();
    let mut recon_sse = 0.0;
    if n_present > 0.0 {
        for i in 0..n {
            for k in 0..N_VARIABLES {
                if mask[[i, k]] == 0.0 {
                    continue;
                }
                let e = recon[[i, k]] - values[[i, k]];
                recon_sse += e * e;
                if want_grads {
                    d_recon[[i, k]] = w.recon * 2.0 * e / n_present;
                }
            }
        }
    }
    let recon_term = if n_present > 0.0 { recon_sse / n_present } else { 0.0 };

    let value = LossValue {
        total: w.regression * regression + w.recon * recon_term,
        regression,
        recon: recon_term,
    };
    Ok((value, d_pred, d_recon))
}
