//! Prediction metrics, occlusion fidelity and grouped impact tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::RegionName;
use crate::graph::{MetGraph, NodeId, NodeKind};
use crate::lrp::{graph_impacts, ContextImpact};
use crate::model::{forward, Model, N_TARGETS};
use crate::synthetic::Snapshot;

pub const DEFAULT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub acc: f64,
    /// Number of pooled (node, variable) pairs.
    pub n: usize,
}

/// Pooled RMSE/MAE and anomaly correlation over every (row, variable) pair.
pub fn compute_metrics(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>, climatology: [f64; N_TARGETS]) -> Result<Metrics> {
    if pred.dim() != truth.dim() || pred.ncols() != N_TARGETS {
        return Err(Error::Dimension(format!("pred {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::Empty("metric inputs"));
    }
    let nf = n as f64;
    let (mut se, mut ae, mut sp, mut st) = (0.0, 0.0, 0.0, 0.0);
    for ((i, k), &p) in pred.indexed_iter() {
        let e = p - truth[[i, k]];
        se += e * e;
        ae += e.abs();
        sp += p - climatology[k];
        st += truth[[i, k]] - climatology[k];
    }
    let (mp, mt) = (sp / nf, st / nf);
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for ((i, k), &p) in pred.indexed_iter() {
        let a = p - climatology[k] - mp;
        let b = truth[[i, k]] - climatology[k] - mt;
        cov += a * b;
        vp += a * a;
        vt += b * b;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::UndefinedAcc);
    }
    Ok(Metrics {
        rmse: (se / nf).sqrt(),
        mae: ae / nf,
        acc: (cov / (vp * vt).sqrt()).clamp(-1.0, 1.0),
        n,
    })
}

/// Grid-row predictions and targets of one snapshot, in node order.
pub fn grid_rows(pred: &Array2<f64>, s: &Snapshot) -> (Array2<f64>, Array2<f64>) {
    let rows: Vec<(usize, [f64; N_TARGETS])> = s
        .graph
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(i, n)| s.targets.get(&n.id).map(|t| (i, *t)))
        .collect();
    let mut p = Array2::zeros((rows.len(), N_TARGETS));
    let mut t = Array2::zeros((rows.len(), N_TARGETS));
    for (k, (i, target)) in rows.iter().enumerate() {
        p.row_mut(k).assign(&pred.row(*i));
        t.row_mut(k).assign(&ndarray::aview1(target));
    }
    (p, t)
}

fn stack(parts: Vec<(Array2<f64>, Array2<f64>)>) -> (Array2<f64>, Array2<f64>) {
    let n: usize = parts.iter().map(|(p, _)| p.nrows()).sum();
    let mut p = Array2::zeros((n, N_TARGETS));
    let mut t = Array2::zeros((n, N_TARGETS));
    let mut at = 0;
    for (a, b) in parts {
        let k = a.nrows();
        p.slice_mut(ndarray::s![at..at + k, ..]).assign(&a);
        t.slice_mut(ndarray::s![at..at + k, ..]).assign(&b);
        at += k;
    }
    (p, t)
}

/// Model skill pooled over every grid target of `snapshots`.
pub fn evaluate<'a>(m: &Model, snapshots: impl IntoIterator<Item = &'a Snapshot>, climatology: [f64; N_TARGETS]) -> Result<Metrics> {
    let mut parts = Vec::new();
    for s in snapshots {
        let cache = forward(m, &s.graph)?;
        parts.push(grid_rows(&cache.predictions, s));
    }
    let (p, t) = stack(parts);
    compute_metrics(p.view(), t.view(), climatology)
}

/// Skill of predicting the background (previous step) unchanged.
pub fn persistence<'a>(snapshots: impl IntoIterator<Item = &'a Snapshot>, climatology: [f64; N_TARGETS]) -> Result<Metrics> {
    let mut parts = Vec::new();
    for s in snapshots {
        let mut bg = Array2::zeros((s.graph.len(), N_TARGETS));
        for (i, n) in s.graph.nodes().iter().enumerate() {
            for k in 0..N_TARGETS {
                bg[[i, k]] = n.values()[k];
            }
        }
        parts.push(grid_rows(&bg, s));
    }
    let (p, t) = stack(parts);
    compute_metrics(p.view(), t.view(), climatology)
}

/// Copy of `g` with every listed node's measurements removed. Edges, kinds
/// and positions stay as they are.
pub fn occlude(g: &MetGraph, ids: &BTreeSet<NodeId>) -> Result<MetGraph> {
    for &id in ids {
        let node = g.node(id).ok_or(Error::UnknownNode(id))?;
        if node.kind.is_grid() {
            return Err(Error::OccludeTarget(id));
        }
    }
    Ok(g.map_nodes(g.is_normalized(), |n| {
        if ids.contains(&n.id) {
            n.clear();
        }
    }))
}

/// Per-observation ranking score for one graph: mean abs importance over the
/// contexts (all four channels) of that graph's grid targets.
pub fn observation_scores(m: &Model, g: &MetGraph, epsilon: f64) -> Result<BTreeMap<NodeId, f64>> {
    Ok(graph_impacts(m, g, |_| true, epsilon)?
        .into_iter()
        .map(|(id, c)| (id, c.mean()))
        .collect())
}

/// Observation ids ordered by descending score, ties by ascending id.
pub fn rank_observations(scores: &BTreeMap<NodeId, f64>) -> Vec<NodeId> {
    let mut ids: Vec<(NodeId, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ids.into_iter().map(|(id, _)| id).collect()
}

/// Number of observations occluded out of `n_obs` at `fraction`.
pub fn occlusion_count(n_obs: usize, fraction: f64) -> usize {
    if n_obs == 0 {
        return 0;
    }
    ((fraction * n_obs as f64).ceil() as usize).clamp(1, n_obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Mean ACC drop after occluding the most important observations.
    pub fi_plus: f64,
    /// Mean ACC drop after occluding the least important observations.
    pub fi_minus: f64,
    pub fraction: f64,
    /// Grid targets scored across all contributing graphs.
    pub n_targets: usize,
    pub n_graphs: usize,
    /// Mean RMSE increase for the same two occlusions.
    pub rmse_plus: f64,
    pub rmse_minus: f64,
}

/// Per-graph fidelity contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphFidelity {
    pub time_index: u32,
    pub region: RegionName,
    pub n_occluded: usize,
    pub acc_drop_plus: f64,
    pub acc_drop_minus: f64,
    pub rmse_rise_plus: f64,
    pub rmse_rise_minus: f64,
}

fn snapshot_metrics(m: &Model, s: &Snapshot, g: &MetGraph, climatology: [f64; N_TARGETS]) -> Result<Metrics> {
    let cache = forward(m, g)?;
    let (p, t) = grid_rows(&cache.predictions, s);
    compute_metrics(p.view(), t.view(), climatology)
}

/// Fidelity contribution of one snapshot, or `None` without observations.
pub fn graph_fidelity(
    m: &Model,
    s: &Snapshot,
    scores: &BTreeMap<NodeId, f64>,
    climatology: [f64; N_TARGETS],
    fraction: f64,
) -> Result<Option<GraphFidelity>> {
    let ranked = rank_observations(scores);
    let k = occlusion_count(ranked.len(), fraction);
    if k == 0 {
        return Ok(None);
    }
    let base = snapshot_metrics(m, s, &s.graph, climatology)?;
    let top: BTreeSet<NodeId> = ranked[..k].iter().copied().collect();
    let bottom: BTreeSet<NodeId> = ranked[ranked.len() - k..].iter().copied().collect();
    let plus = snapshot_metrics(m, s, &occlude(&s.graph, &top)?, climatology)?;
    let minus = snapshot_metrics(m, s, &occlude(&s.graph, &bottom)?, climatology)?;
    Ok(Some(GraphFidelity {
        time_index: s.time_index,
        region: s.region.name,
        n_occluded: k,
        acc_drop_plus: base.acc - plus.acc,
        acc_drop_minus: base.acc - minus.acc,
        rmse_rise_plus: plus.rmse - base.rmse,
        rmse_rise_minus: minus.rmse - base.rmse,
    }))
}

/// Fidelity over `snapshots` with one score map per snapshot.
pub fn fidelity(
    m: &Model,
    snapshots: &[&Snapshot],
    scores: &[BTreeMap<NodeId, f64>],
    climatology: [f64; N_TARGETS],
    fraction: f64,
) -> Result<(FidelityReport, Vec<GraphFidelity>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig("fraction must lie in (0, 1]".into()));
    }
    if snapshots.len() != scores.len() {
        return Err(Error::Dimension(format!("{} snapshots vs {} score maps", snapshots.len(), scores.len())));
    }
    let mut per_graph = Vec::new();
    let mut n_targets = 0;
    for (s, sc) in snapshots.iter().zip(scores) {
        if let Some(f) = graph_fidelity(m, s, sc, climatology, fraction)? {
            n_targets += s.targets.len();
            per_graph.push(f);
        }
    }
    if per_graph.is_empty() {
        return Err(Error::Empty("graphs with observations"));
    }
    let n = per_graph.len() as f64;
    let mean = |f: fn(&GraphFidelity) -> f64| per_graph.iter().map(f).sum::<f64>() / n;
    let report = FidelityReport {
        fi_plus: mean(|g| g.acc_drop_plus),
        fi_minus: mean(|g| g.acc_drop_minus),
        fraction,
        n_targets,
        n_graphs: per_graph.len(),
        rmse_plus: mean(|g| g.rmse_rise_plus),
        rmse_minus: mean(|g| g.rmse_rise_minus),
    };
    Ok((report, per_graph))
}

/// Score every snapshot with [`observation_scores`] and run [`fidelity`].
pub fn fidelity_with_lrp(
    m: &Model,
    snapshots: &[&Snapshot],
    climatology: [f64; N_TARGETS],
    fraction: f64,
    epsilon: f64,
) -> Result<(FidelityReport, Vec<GraphFidelity>)> {
    let scores = snapshots
        .iter()
        .map(|s| observation_scores(m, &s.graph, epsilon))
        .collect::<Result<Vec<_>>>()?;
    fidelity(m, snapshots, &scores, climatology, fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    ObservationType,
    Region,
    TimeWindow,
    GridCell,
}

impl GroupKey {
    pub const ALL: [GroupKey; 4] = [GroupKey::ObservationType, GroupKey::Region, GroupKey::TimeWindow, GroupKey::GridCell];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::ObservationType => "observation_type",
            GroupKey::Region => "region",
            GroupKey::TimeWindow => "time_window",
            GroupKey::GridCell => "grid_cell",
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupKey::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownGroupKey(s.to_string()))
    }
}

/// Value of a grouping key; ordering defines table row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupValue {
    Kind(NodeKind),
    Region(RegionName),
    /// Window index `floor(t / window)`.
    Window(u32),
    /// Cell indices counted from (−90°, −180°).
    Cell(i64, i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    pub time_window: u32,
    pub grid_cell_deg: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        GroupingParams {
            time_window: 5,
            grid_cell_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactRow {
    pub key: String,
    pub mean: f64,
    pub count: usize,
    pub std: f64,
    pub n_observations: usize,
    /// Sum of impacts; `mean * count` without the rounding.
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactTable {
    pub group_by: GroupKey,
    pub time_window: u32,
    pub grid_cell_deg: f64,
    pub rows: Vec<ImpactRow>,
}

impl ImpactTable {
    pub fn total_count(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Count-weighted mean over every row.
    pub fn grand_mean(&self) -> Option<f64> {
        let n = self.total_count();
        (n > 0).then(|| self.rows.iter().map(|r| r.sum).sum::<f64>() / n as f64)
    }

    pub const CSV_HEADER: [&'static str; 6] = ["group_by", "key", "mean", "std", "count", "n_observations"];

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "{}", Self::CSV_HEADER.join(","))?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", self.group_by, r.key, r.mean, r.std, r.count, r.n_observations)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

fn group_value(key: GroupKey, p: &GroupingParams, s: &Snapshot, n: &crate::graph::MetNode) -> GroupValue {
    match key {
        GroupKey::ObservationType => GroupValue::Kind(n.kind),
        GroupKey::Region => GroupValue::Region(s.region.name),
        GroupKey::TimeWindow => GroupValue::Window(s.time_index / p.time_window),
        GroupKey::GridCell => GroupValue::Cell(
            ((n.location.lat() + 90.0) / p.grid_cell_deg).floor() as i64,
            ((n.location.lon() + 180.0) / p.grid_cell_deg).floor() as i64,
        ),
    }
}

fn group_label(v: GroupValue, p: &GroupingParams) -> String {
    match v {
        GroupValue::Kind(k) => k.name().to_string(),
        GroupValue::Region(r) => r.as_str().to_string(),
        GroupValue::Window(w) => format!("t{}-{}", w * p.time_window, (w + 1) * p.time_window - 1),
        GroupValue::Cell(i, j) => {
            let lat = i as f64 * p.grid_cell_deg - 90.0;
            let lon = j as f64 * p.grid_cell_deg - 180.0;
            format!("{lat:.2}:{lon:.2}")
        }
    }
}

/// Group per-observation context statistics from `snapshots` by `key`.
/// Observations absent from `impacts` or with no contexts are skipped.
pub fn aggregate_impacts<'a>(
    snapshots: impl IntoIterator<Item = &'a Snapshot>,
    impacts: &BTreeMap<NodeId, ContextImpact>,
    key: GroupKey,
    params: GroupingParams,
) -> Result<ImpactTable> {
    if params.time_window == 0 || !(params.grid_cell_deg > 0.0) {
        return Err(Error::InvalidConfig("time_window and grid_cell_deg must be positive".into()));
    }
    let mut groups: BTreeMap<GroupValue, (ContextImpact, usize)> = BTreeMap::new();
    for s in snapshots {
        for n in s.graph.observation_nodes() {
            let Some(c) = impacts.get(&n.id).filter(|c| c.count > 0) else { continue };
            let entry = groups.entry(group_value(key, &params, s, n)).or_default();
            entry.0.merge(c);
            entry.1 += 1;
        }
    }
    Ok(ImpactTable {
        group_by: key,
        time_window: params.time_window,
        grid_cell_deg: params.grid_cell_deg,
        rows: groups
            .into_iter()
            .map(|(v, (c, n_obs))| ImpactRow {
                key: group_label(v, &params),
                mean: c.mean(),
                count: c.count,
                std: c.std(),
                n_observations: n_obs,
                sum: c.sum,
            })
            .collect(),
    })
}
