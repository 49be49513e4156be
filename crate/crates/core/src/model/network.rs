use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adjacency::AdjacencyOp;
use super::features::{encode_features, FeatureMatrix, N_FEATURES};
use crate::error::{Error, Result};
use crate::graph::{MetGraph, N_VARIABLES};

/// Number of predicted state variables (U, V, T, Q).
pub const N_TARGETS: usize = 4;

/// Affine map `x W + b`, with `W` stored `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        DenseLayer {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        DenseLayer {
            weight: Array2::from_shape_fn((d_in, d_out), |_| rng.random_range(-limit..=limit)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// GCN stack with a reconstruction head (6 value slots) and a regression
/// head (U, V, T, Q), both reading the last hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub gcn: Vec<DenseLayer>,
    pub recon_head: DenseLayer,
    pub regress_head: DenseLayer,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

impl Model {
    /// Glorot-initialised model with the given hidden widths.
    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(hidden, |i, o| DenseLayer::glorot(i, o, &mut rng))
    }

    pub fn zeros(hidden: &[usize]) -> Self {
        Self::build(hidden, DenseLayer::zeros)
    }

    fn build(hidden: &[usize], mut layer: impl FnMut(usize, usize) -> DenseLayer) -> Self {
        assert!(!hidden.is_empty(), "at least one GCN layer");
        let mut gcn = Vec::with_capacity(hidden.len());
        let mut d_in = N_FEATURES;
        for &d in hidden {
            gcn.push(layer(d_in, d));
            d_in = d;
        }
        let recon_head = layer(d_in, N_VARIABLES);
        let regress_head = layer(d_in, N_TARGETS);
        Model {
            gcn,
            recon_head,
            regress_head,
        }
    }

    /// `[input, hidden...]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.gcn[0].d_in()).chain(self.gcn.iter().map(DenseLayer::d_out)).collect()
    }

    pub fn n_layers(&self) -> usize {
        self.gcn.len()
    }

    /// All layers in a fixed order: GCN layers, reconstruction head, regression head.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.gcn.iter().chain([&self.recon_head, &self.regress_head])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.gcn.iter_mut().chain([&mut self.recon_head, &mut self.regress_head])
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(DenseLayer::n_params).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(DenseLayer::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().flat_map(DenseLayer::params_mut)
    }

    /// Mutable access to the `k`-th parameter in [`Model::params`] order.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for layer in self.layers_mut() {
            let (nw, nb) = (layer.weight.len(), layer.bias.len());
            if k < nw {
                return layer.weight.iter_mut().nth(k).expect("in range");
            }
            k -= nw;
            if k < nb {
                return &mut layer.bias[k];
            }
            k -= nb;
        }
        panic!("parameter index out of range");
    }

    /// A zero model of the same shape, used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        Model {
            gcn: self.gcn.iter().map(|l| DenseLayer::zeros(l.d_in(), l.d_out())).collect(),
            recon_head: DenseLayer::zeros(self.recon_head.d_in(), self.recon_head.d_out()),
            regress_head: DenseLayer::zeros(self.regress_head.d_in(), self.regress_head.d_out()),
        }
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dims().hash(&mut h);
        for p in self.params() {
            p.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let mut d = N_FEATURES;
        for (k, l) in self.gcn.iter().enumerate() {
            if l.d_in() != d || l.bias.len() != l.d_out() {
                return Err(Error::Dimension(format!("GCN layer {k} is {}x{}, expected input {d}", l.d_in(), l.d_out())));
            }
            d = l.d_out();
        }
        for (name, head, out) in [("recon", &self.recon_head, N_VARIABLES), ("regress", &self.regress_head, N_TARGETS)] {
            if head.d_in() != d || head.d_out() != out || head.bias.len() != out {
                return Err(Error::Dimension(format!("{name} head is {}x{}, expected {d}x{out}", head.d_in(), head.d_out())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// `Â H_l`.
    pub aggregated: Array2<f64>,
    /// `Â H_l W_l + b_l`.
    pub pre: Array2<f64>,
    /// `ReLU(pre)`.
    pub post: Array2<f64>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub layers: Vec<LayerCache>,
    /// Regression head output, node × 4.
    pub predictions: Array2<f64>,
    /// Reconstruction head output, node × 6.
    pub reconstructions: Array2<f64>,
}

impl Activations {
    pub fn last_hidden(&self) -> ArrayView2<'_, f64> {
        self.layers.last().expect("at least one layer").post.view()
    }
}

/// A forward pass bundled with the inputs and operator it ran on, so that
/// relevance can be replayed later.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub adjacency: AdjacencyOp,
    pub input: FeatureMatrix,
    pub activations: Activations,
    graph_fingerprint: u64,
}

impl std::ops::Deref for ActivationCache {
    type Target = Activations;

    fn deref(&self) -> &Activations {
        &self.activations
    }
}

impl ActivationCache {
    pub fn graph_fingerprint(&self) -> u64 {
        self.graph_fingerprint
    }

    /// Input to GCN layer `l` (the features for `l = 0`).
    pub fn layer_input(&self, l: usize) -> ArrayView2<'_, f64> {
        if l == 0 {
            self.input.0.view()
        } else {
            self.activations.layers[l - 1].post.view()
        }
    }
}

/// Encode `g`, build its adjacency and run the model.
pub fn forward(m: &Model, g: &MetGraph) -> Result<ActivationCache> {
    let input = encode_features(g)?;
    let adjacency = AdjacencyOp::new(g);
    let activations = forward_with(m, &input, &adjacency)?;
    Ok(ActivationCache {
        adjacency,
        input,
        activations,
        graph_fingerprint: g.fingerprint(),
    })
}

/// Forward pass over pre-encoded inputs.
pub fn forward_with(m: &Model, input: &FeatureMatrix, adjacency: &AdjacencyOp) -> Result<Activations> {
    m.check_shapes()?;
    if input.0.ncols() != N_FEATURES || input.rows() != adjacency.n() {
        return Err(Error::Dimension(format!(
            "features {}x{} vs adjacency over {} nodes",
            input.rows(),
            input.0.ncols(),
            adjacency.n()
        )));
    }
    let mut layers: Vec<LayerCache> = Vec::with_capacity(m.gcn.len());
    for layer in &m.gcn {
        let h = layers.last().map_or(input.0.view(), |c| c.post.view());
        let aggregated = adjacency.apply(h);
        let pre = layer.apply(aggregated.view());
        let post = pre.mapv(|z| z.max(0.0));
        layers.push(LayerCache { aggregated, pre, post });
    }
    let last = layers.last().expect("at least one layer").post.view();
    let predictions = m.regress_head.apply(last);
    let reconstructions = m.recon_head.apply(last);
    Ok(Activations {
        layers,
        predictions,
        reconstructions,
    })
}

/// Parameter gradients given output gradients `d_pred` (node × 4) and
/// `d_recon` (node × 6). ReLU'(0) is taken as 0.
pub fn backward(m: &Model, act: &Activations, adjacency: &AdjacencyOp, d_pred: &Array2<f64>, d_recon: &Array2<f64>) -> Model {
    let mut grads = m.zeros_like();
    let last = act.last_hidden();

    grads.regress_head.weight = last.t().dot(d_pred);
    grads.regress_head.bias = d_pred.sum_axis(Axis(0));
    grads.recon_head.weight = last.t().dot(d_recon);
    grads.recon_head.bias = d_recon.sum_axis(Axis(0));

    let mut d_h = d_pred.dot(&m.regress_head.weight.t()) + d_recon.dot(&m.recon_head.weight.t());
    for l in (0..m.gcn.len()).rev() {
        let lc = &act.layers[l];
        let d_pre = ndarray::Zip::from(&d_h).and(&lc.pre).map_collect(|&g, &z| if z > 0.0 { g } else { 0.0 });
        grads.gcn[l].weight = lc.aggregated.t().dot(&d_pre);
        grads.gcn[l].bias = d_pre.sum_axis(Axis(0));
        if l > 0 {
            // Â is symmetric, so Âᵀ dA = Â dA
            let d_agg = d_pre.dot(&m.gcn[l].weight.t());
            d_h = adjacency.apply(d_agg.view());
        }
    }
    grads
}
