use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adjacency::AdjacencyOp;
use super::features::{encode_features, FeatureMatrix};
use super::loss::{loss, loss_and_grads, LossValue, LossWeights, Targets};
use super::network::{backward, forward_with, Model, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::synthetic::{Dataset, Snapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Passes over the training split minimizing the reconstruction term only.
    pub epochs_pretrain: usize,
    /// Passes over the training split on the full objective.
    pub epochs_finetune: usize,
    pub lambda_recon: f64,
    pub seed: u64,
    /// Global L2 norm limit on each step's gradient.
    pub grad_clip: f64,
    /// Hidden widths used when a fresh model is initialised from this config.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs_pretrain: 50,
            epochs_finetune: 200,
            lambda_recon: 0.5,
            seed: 42,
            grad_clip: 5.0,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(self.lambda_recon >= 0.0) {
            return Err(Error::InvalidConfig("lambda_recon must be non-negative".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Glorot-initialised model for this config's widths and seed.
    pub fn init_model(&self) -> Model {
        Model::new(&self.hidden, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based across both phases.
    pub epoch: usize,
    pub phase: Phase,
    /// Mean objective over the epoch's steps.
    pub train_loss: f64,
    /// Objective on the held-out split after the epoch, if it is non-empty.
    pub val_loss: Option<f64>,
    /// Held-out regression MSE after the epoch.
    pub val_regression: Option<f64>,
}

/// A snapshot with its features, operator and targets precomputed.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub input: FeatureMatrix,
    pub adjacency: AdjacencyOp,
    pub targets: Targets,
}

impl PreparedGraph {
    pub fn new(s: &Snapshot) -> Result<Self> {
        Ok(PreparedGraph {
            input: encode_features(&s.graph)?,
            adjacency: AdjacencyOp::new(&s.graph),
            targets: Targets::from_map(&s.graph, &s.targets)?,
        })
    }

    pub fn loss(&self, m: &Model, w: LossWeights) -> Result<LossValue> {
        let act = forward_with(m, &self.input, &self.adjacency)?;
        loss(&act.predictions, &act.reconstructions, &self.targets, &self.input, w)
    }

    /// Objective and parameter gradients.
    pub fn loss_and_grads(&self, m: &Model, w: LossWeights) -> Result<(LossValue, Model)> {
        let act = forward_with(m, &self.input, &self.adjacency)?;
        let (value, d_pred, d_recon) = loss_and_grads(&act.predictions, &act.reconstructions, &self.targets, &self.input, w)?;
        Ok((value, backward(m, &act, &self.adjacency, &d_pred, &d_recon)))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Model,
    v: Model,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, &g), m), v) in model
            .params_mut()
            .zip(grads.params())
            .zip(self.m.params_mut())
            .zip(self.v.params_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

fn clip_global_norm(grads: &mut Model, limit: f64) {
    let norm = grads.params().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let scale = limit / norm;
        grads.params_mut().for_each(|g| *g *= scale);
    }
}

/// Reconstruction pretraining followed by joint fine-tuning, one graph per step.
pub fn train(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochRecord>)> {
    train_with_observer(model, ds, cfg, |_| {})
}

/// [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    model: &Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    model.check_shapes()?;
    if !ds.is_normalized() {
        return Err(Error::Unnormalized);
    }
    let train_set = ds.train().map(PreparedGraph::new).collect::<Result<Vec<_>>>()?;
    let val_set = ds.test().map(PreparedGraph::new).collect::<Result<Vec<_>>>()?;
    if train_set.is_empty() && cfg.epochs_pretrain + cfg.epochs_finetune > 0 {
        return Err(Error::Empty("training split"));
    }

    let mut model = model.clone();
    let mut history = Vec::with_capacity(cfg.epochs_pretrain + cfg.epochs_finetune);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let phases = [
        (Phase::Pretrain, cfg.epochs_pretrain, LossWeights::recon_only()),
        (Phase::Finetune, cfg.epochs_finetune, LossWeights::full(cfg.lambda_recon)),
    ];
    for (phase, epochs, weights) in phases {
        let mut opt = Adam::new(&model, cfg.lr);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let (value, mut grads) = train_set[i].loss_and_grads(&model, weights)?;
                if !value.total.is_finite() {
                    return Err(Error::Diverged {
                        phase: phase.as_str(),
                        epoch: history.len(),
                        loss: value.total,
                    });
                }
                total += value.total;
                clip_global_norm(&mut grads, cfg.grad_clip);
                opt.step(&mut model, &grads);
            }
            let (val_loss, val_regression) = if val_set.is_empty() {
                (None, None)
            } else {
                let mut sum = 0.0;
                let mut reg = 0.0;
                for g in &val_set {
                    let v = g.loss(&model, weights)?;
                    sum += v.total;
                    reg += v.regression;
                }
                let n = val_set.len() as f64;
                (Some(sum / n), Some(reg / n))
            };
            let record = EpochRecord {
                epoch: history.len(),
                phase,
                train_loss: total / train_set.len() as f64,
                val_loss,
                val_regression,
            };
            if !record.train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    phase: phase.as_str(),
                    epoch: record.epoch,
                    loss: record.train_loss,
                });
            }
            observer(&record);
            history.push(record);
        }
    }
    Ok((model, history))
}

/// Mean objective over a split, for before/after comparisons.
pub fn mean_loss<'a>(model: &Model, snapshots: impl IntoIterator<Item = &'a Snapshot>, weights: LossWeights) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in snapshots {
        sum += PreparedGraph::new(s)?.loss(model, weights)?.total;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("snapshot set"));
    }
    Ok(sum / n as f64)
}
