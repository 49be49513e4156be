//! ε-rule layer-wise relevance propagation through a cached forward pass.
//!
//! Relevance starts at the predicted value of the explained channel(s) on one
//! grid node and flows back through the regression head and every GCN layer.
//! At each affine stage a unit's relevance is shared among its inputs in
//! proportion to their contributions `Â_ji · h_if · w_fg`, stabilised by
//! `ε·sign(z)`; bias shares are dropped. Only rows reachable from the target
//! are ever touched, so the cost scales with the context size.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{context_positions, MetGraph, MetNode, NodeId, Variable};
use crate::model::{forward, ActivationCache, Model, N_FEATURES, N_TARGETS};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Predicted channel to explain; `All` sums the four.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TargetVariable {
    One(Variable),
    All,
}

impl TargetVariable {
    pub fn channels(self) -> Vec<usize> {
        match self {
            TargetVariable::One(v) => vec![v.index()],
            TargetVariable::All => (0..N_TARGETS).collect(),
        }
    }
}

impl fmt::Display for TargetVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetVariable::One(v) => v.fmt(f),
            TargetVariable::All => f.write_str("ALL"),
        }
    }
}

impl FromStr for TargetVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TargetVariable::All);
        }
        let v: Variable = s.parse()?;
        if v.index() >= N_TARGETS {
            return Err(Error::InvalidConfig(format!("{v} is not a predicted variable")));
        }
        Ok(TargetVariable::One(v))
    }
}

impl TryFrom<String> for TargetVariable {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TargetVariable> for String {
    fn from(t: TargetVariable) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExplainTarget {
    pub node_id: NodeId,
    pub variable: TargetVariable,
}

/// Relevance of every input feature (node × 24) for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub target: ExplainTarget,
    pub epsilon: f64,
    /// Row ids, ascending (the graph's node order).
    pub node_ids: Vec<NodeId>,
    pub rel: Array2<f64>,
    /// Value of the explained output (sum of channels for `All`).
    pub target_output: f64,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.rel.sum()
    }

    /// `|Σ R − f| / |f|`, or the absolute gap when the output is zero.
    pub fn conservation_residual(&self) -> f64 {
        let gap = (self.total() - self.target_output).abs();
        if self.target_output == 0.0 {
            gap
        } else {
            gap / self.target_output.abs()
        }
    }
}

fn stabilize(z: f64, eps: f64) -> f64 {
    // sign(0) taken as +1 so the denominator never vanishes
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Relevance of rows `rows` of a layer input, given relevance `r_out` on the
/// same rows of that layer's output (heads: `Â = I`).
fn through_head(h_in: ArrayView2<'_, f64>, weight: &Array2<f64>, z: ArrayView2<'_, f64>, rows: &[usize], r_out: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut s = r_out.clone();
    for (k, &i) in rows.iter().enumerate() {
        for g in 0..s.ncols() {
            s[[k, g]] /= stabilize(z[[i, g]], eps);
        }
    }
    let c = s.dot(&weight.t());
    let mut r_in = c;
    for (k, &i) in rows.iter().enumerate() {
        for f in 0..r_in.ncols() {
            r_in[[k, f]] *= h_in[[i, f]];
        }
    }
    r_in
}

/// Propagate relevance through the regression head and all GCN layers.
/// Returns the positions reached and their input-feature relevance.
fn propagate(m: &Model, cache: &ActivationCache, target: usize, channels: &[usize], eps: f64) -> (Vec<usize>, Array2<f64>) {
    let mut r_out = Array2::zeros((1, N_TARGETS));
    for &c in channels {
        r_out[[0, c]] = cache.predictions[[target, c]];
    }
    let mut rows = vec![target];
    let last = cache.layers.len();
    let mut r = through_head(
        cache.layer_input(last),
        &m.regress_head.weight,
        cache.predictions.view(),
        &rows,
        &r_out,
        eps,
    );

    for l in (0..last).rev() {
        let lc = &cache.layers[l];
        // ReLU: only active units pass relevance
        let mut s = r;
        for (k, &i) in rows.iter().enumerate() {
            for g in 0..s.ncols() {
                let z = lc.pre[[i, g]];
                s[[k, g]] = if lc.post[[i, g]] > 0.0 { s[[k, g]] / stabilize(z, eps) } else { 0.0 };
            }
        }
        // C_i = Σ_j Â_ji S_j over the rows that feed the current ones
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut next_rows: Vec<usize> = Vec::new();
        for &j in &rows {
            for (i, _) in cache.adjacency.row(j) {
                slot.entry(i).or_insert_with(|| {
                    next_rows.push(i);
                    0
                });
            }
        }
        next_rows.sort_unstable();
        for (k, &i) in next_rows.iter().enumerate() {
            slot.insert(i, k);
        }
        let mut c = Array2::<f64>::zeros((next_rows.len(), s.ncols()));
        for (kj, &j) in rows.iter().enumerate() {
            for (i, w) in cache.adjacency.row(j) {
                c.row_mut(slot[&i]).scaled_add(w, &s.row(kj));
            }
        }
        let h_in = cache.layer_input(l);
        let mut r_in = c.dot(&m.gcn[l].weight.t());
        for (k, &i) in next_rows.iter().enumerate() {
            for f in 0..r_in.ncols() {
                r_in[[k, f]] *= h_in[[i, f]];
            }
        }
        r = r_in;
        rows = next_rows;
    }
    (rows, r)
}

/// Explain one grid-node prediction of `m` on `g`.
pub fn lrp_explain(m: &Model, g: &MetGraph, cache: &ActivationCache, target: ExplainTarget, epsilon: f64) -> Result<RelevanceMap> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    if cache.graph_fingerprint() != g.fingerprint() || cache.input.rows() != g.len() {
        return Err(Error::StaleCache);
    }
    if cache.layers.len() != m.n_layers() {
        return Err(Error::Dimension(format!("cache has {} layers, model {}", cache.layers.len(), m.n_layers())));
    }
    let t = g.position(target.node_id).ok_or(Error::UnknownNode(target.node_id))?;
    if !g.nodes()[t].kind.is_grid() {
        return Err(Error::NotGridTarget(target.node_id));
    }
    let channels = target.variable.channels();
    let (rows, r) = propagate(m, cache, t, &channels, epsilon);
    let mut rel = Array2::zeros((g.len(), N_FEATURES));
    for (k, &i) in rows.iter().enumerate() {
        rel.row_mut(i).assign(&r.row(k));
    }
    Ok(RelevanceMap {
        target,
        epsilon,
        node_ids: g.nodes().iter().map(|n| n.id).collect(),
        rel,
        target_output: channels.iter().map(|&c| cache.predictions[[t, c]]).sum(),
    })
}

/// Per-node relevance totals.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeImportance {
    pub node_ids: Vec<NodeId>,
    pub signed: Array1<f64>,
    pub abs: Array1<f64>,
}

impl NodeImportance {
    pub fn get(&self, id: NodeId) -> Option<(f64, f64)> {
        let i = self.node_ids.binary_search(&id).ok()?;
        Some((self.signed[i], self.abs[i]))
    }
}

pub fn node_importance(r: &RelevanceMap) -> NodeImportance {
    NodeImportance {
        node_ids: r.node_ids.clone(),
        signed: r.rel.sum_axis(ndarray::Axis(1)),
        abs: r.rel.mapv(f64::abs).sum_axis(ndarray::Axis(1)),
    }
}

/// Running statistics of one observation's importance across contexts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextImpact {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl ContextImpact {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &ContextImpact) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    /// Mean over contexts; zero when the observation is in none.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    /// Population standard deviation over contexts.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let n = self.count as f64;
        let m = self.sum / n;
        (self.sum_sq / n - m * m).max(0.0).sqrt()
    }
}

/// Every (target grid node, context member) abs importance of one graph,
/// explaining all four channels with the context radius equal to the layer count.
pub fn graph_contexts(m: &Model, g: &MetGraph, epsilon: f64) -> Result<Vec<(NodeId, Vec<(usize, f64)>)>> {
    let cache = forward(m, g)?;
    let hops = m.n_layers();
    let mut out = Vec::new();
    for (t, node) in g.nodes().iter().enumerate().filter(|(_, n)| n.kind.is_grid()) {
        let target = ExplainTarget {
            node_id: node.id,
            variable: TargetVariable::All,
        };
        let imp = node_importance(&lrp_explain(m, g, &cache, target, epsilon)?);
        let members = context_positions(g, t, hops).into_iter().map(|i| (i, imp.abs[i])).collect();
        out.push((node.id, members));
    }
    Ok(out)
}

/// Mean abs importance of each selected observation over every (graph,
/// target grid node) context containing it. Observations in no context get 0.
pub fn aggregate_contexts<'a>(
    m: &Model,
    graphs: impl IntoIterator<Item = &'a MetGraph>,
    obs_selector: impl Fn(&MetNode) -> bool,
) -> Result<BTreeMap<NodeId, ContextImpact>> {
    let mut out: BTreeMap<NodeId, ContextImpact> = BTreeMap::new();
    let mut any = false;
    for g in graphs {
        any = true;
        out.extend(graph_impacts(m, g, &obs_selector, DEFAULT_EPSILON)?);
    }
    if !any {
        return Err(Error::Empty("graph slice"));
    }
    Ok(out)
}

/// [`aggregate_contexts`] for a single graph.
pub fn graph_impacts(
    m: &Model,
    g: &MetGraph,
    obs_selector: impl Fn(&MetNode) -> bool,
    epsilon: f64,
) -> Result<BTreeMap<NodeId, ContextImpact>> {
    let mut out: BTreeMap<NodeId, ContextImpact> = g
        .observation_nodes()
        .filter(|n| obs_selector(n))
        .map(|n| (n.id, ContextImpact::default()))
        .collect();
    for (_, members) in graph_contexts(m, g, epsilon)? {
        for (i, abs) in members {
            if let Some(acc) = out.get_mut(&g.nodes()[i].id) {
                acc.push(abs);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub id: NodeId,
    pub signed: f64,
    pub abs: f64,
}

/// Serializable summary of one explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationExport {
    pub target: ExplainTarget,
    pub epsilon: f64,
    pub target_output: f64,
    pub conservation_residual: f64,
    pub nodes: Vec<NodeScore>,
}

impl From<&RelevanceMap> for ExplanationExport {
    fn from(r: &RelevanceMap) -> Self {
        let imp = node_importance(r);
        ExplanationExport {
            target: r.target,
            epsilon: r.epsilon,
            target_output: r.target_output,
            conservation_residual: r.conservation_residual(),
            nodes: imp
                .node_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| NodeScore {
                    id,
                    signed: imp.signed[i],
                    abs: imp.abs[i],
                })
                .collect(),
        }
    }
}
