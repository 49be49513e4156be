use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use obsimpact_core::eval::{
    aggregate_impacts, compute_metrics, fidelity, grid_rows, occlude, FidelityReport, GraphFidelity, GroupKey, GroupingParams,
    ImpactTable, Metrics, DEFAULT_FRACTION,
};
use obsimpact_core::graph::{context_positions, GraphDoc};
use obsimpact_core::lrp::{lrp_explain, ContextImpact, ExplainTarget, ExplanationExport, DEFAULT_EPSILON};
use obsimpact_core::{forward, Dataset, NodeId, NodeKind, NormStats, Region, RegionName, Snapshot, TargetVariable, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, ExplainKey, JobStatus};

type Shared = Arc<AppState>;
type Params = Query<BTreeMap<String, String>>;

pub fn api_router() -> Router<Shared> {
    Router::new()
        .route("/health", get(health))
        .route("/regions", get(regions))
        .route("/graph", get(graph))
        .route("/model", get(model_info))
        .route("/explain", post(explain))
        .route("/impacts", get(impacts))
        .route("/fidelity", post(fidelity_handler))
        .route("/occlude", post(occlude_handler))
        .route("/train", post(train))
        .route("/jobs/{id}", get(job))
        .route("/observations/search", get(search))
}

/// Serialize to a JSON response; byte output depends only on `value`.
fn json_bytes<T: Serialize>(value: &T) -> ApiResult<Vec<u8>> {
    serde_json::to_vec(value).map_err(|e| ApiError::internal(e.to_string()))
}

fn json_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], Body::from(bytes)).into_response()
}

fn body<T: DeserializeOwned>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn param<T: std::str::FromStr>(q: &BTreeMap<String, String>, name: &str) -> ApiResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    q.get(name)
        .map(|raw| raw.parse::<T>().map_err(|e| ApiError::bad_request(format!("`{name}`: {e}"))))
        .transpose()
}

fn required<T: std::str::FromStr>(q: &BTreeMap<String, String>, name: &str) -> ApiResult<T>
where
    T::Err: std::fmt::Display,
{
    param(q, name)?.ok_or_else(|| ApiError::bad_request(format!("missing `{name}`")))
}

fn region_name(raw: &str) -> ApiResult<RegionName> {
    raw.parse().map_err(|_| ApiError::bad_request(format!("unknown region `{raw}`")))
}

fn find_snapshot(ds: &Dataset, region: RegionName, time: u32) -> ApiResult<&Snapshot> {
    ds.find(region, time)
        .ok_or_else(|| ApiError::not_found(format!("no snapshot for {region} at t={time}")))
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    dataset: bool,
    model: bool,
    training: bool,
}

async fn health(State(st): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok",
        dataset: st.dataset().is_ok(),
        model: st.try_model().is_some(),
        training: st.is_training(),
    })
}

#[derive(Serialize)]
struct RegionSummary {
    region: Region,
    snapshots: usize,
    train_snapshots: usize,
    test_snapshots: usize,
    time_min: u32,
    time_max: u32,
}

#[derive(Serialize)]
struct RegionsResponse {
    regions: Vec<RegionSummary>,
    norm_stats: Option<NormStats>,
}

async fn regions(State(st): State<Shared>) -> ApiResult<Response> {
    let ds = st.dataset()?;
    let mut by_region: BTreeMap<RegionName, RegionSummary> = BTreeMap::new();
    for s in &ds.snapshots {
        let e = by_region.entry(s.region.name).or_insert(RegionSummary {
            region: s.region,
            snapshots: 0,
            train_snapshots: 0,
            test_snapshots: 0,
            time_min: u32::MAX,
            time_max: 0,
        });
        e.snapshots += 1;
        if ds.is_train(s) {
            e.train_snapshots += 1;
        } else {
            e.test_snapshots += 1;
        }
        e.time_min = e.time_min.min(s.time_index);
        e.time_max = e.time_max.max(s.time_index);
    }
    let resp = RegionsResponse {
        regions: by_region.into_values().collect(),
        norm_stats: ds.norm_stats,
    };
    Ok(json_response(json_bytes(&resp)?))
}

#[derive(Serialize)]
struct NodeValues {
    id: NodeId,
    values: [f64; 4],
}

#[derive(Serialize)]
struct NodeImpact {
    id: NodeId,
    /// Mean abs importance over the grid-target contexts containing the node.
    impact: f64,
    contexts: usize,
}

#[derive(Serialize)]
struct GraphResponse {
    split: &'static str,
    region_box: Region,
    graph: GraphDoc,
    targets: Vec<NodeValues>,
    predictions: Option<Vec<NodeValues>>,
    importances: Option<Vec<NodeImpact>>,
    model_hash: Option<String>,
    norm_stats: Option<NormStats>,
}

async fn graph(State(st): State<Shared>, Query(q): Params) -> ApiResult<Response> {
    let ds = st.dataset()?;
    let region = region_name(&required::<String>(&q, "region")?)?;
    let time: u32 = required(&q, "time")?;
    find_snapshot(&ds, region, time)?;
    let model = st.try_model();
    blocking(move || {
        let s = find_snapshot(&ds, region, time)?;
        let (predictions, importances) = match &model {
            Some(m) => {
                let cache = forward(&m.model, &s.graph)?;
                let preds = s
                    .graph
                    .nodes()
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| n.kind.is_grid())
                    .map(|(i, n)| NodeValues {
                        id: n.id,
                        values: std::array::from_fn(|k| cache.predictions[[i, k]]),
                    })
                    .collect();
                let impacts = st.snapshot_impacts(m, s)?;
                let imps = impacts
                    .iter()
                    .map(|(&id, c)| NodeImpact {
                        id,
                        impact: c.mean(),
                        contexts: c.count,
                    })
                    .collect();
                (Some(preds), Some(imps))
            }
            None => (None, None),
        };
        let resp = GraphResponse {
            split: if ds.is_train(s) { "train" } else { "test" },
            region_box: s.region,
            graph: s.graph.to_doc(),
            targets: s.targets.iter().map(|(&id, &values)| NodeValues { id, values }).collect(),
            predictions,
            importances,
            model_hash: model.as_ref().map(|m| m.hash_hex()),
            norm_stats: ds.norm_stats,
        };
        Ok(json_response(json_bytes(&resp)?))
    })
    .await
}

#[derive(Serialize)]
struct ModelInfo {
    loaded: bool,
    hash: Option<String>,
    dims: Option<Vec<usize>>,
    n_params: Option<usize>,
    train_config: Option<TrainConfig>,
}

async fn model_info(State(st): State<Shared>) -> ApiResult<Response> {
    let m = st.try_model();
    let info = ModelInfo {
        loaded: m.is_some(),
        hash: m.as_ref().map(|m| m.hash_hex()),
        dims: m.as_ref().map(|m| m.model.dims()),
        n_params: m.as_ref().map(|m| m.model.n_params()),
        train_config: m.as_ref().and_then(|m| m.train_config.clone()),
    };
    Ok(json_response(json_bytes(&info)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainRequest {
    region: String,
    time: u32,
    node_id: NodeId,
    #[serde(default = "all_variables")]
    variable: String,
    epsilon: Option<f64>,
}

fn all_variables() -> String {
    "ALL".into()
}

#[derive(Serialize)]
struct ExplainResponse {
    region: RegionName,
    time_index: u32,
    model_hash: String,
    /// Nodes within the target's two-hop context, ascending.
    context: Vec<NodeId>,
    #[serde(flatten)]
    explanation: ExplanationExport,
}

async fn explain(State(st): State<Shared>, payload: Result<Json<ExplainRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(payload)?;
    let model = st.model()?;
    let ds = st.dataset()?;
    let region = region_name(&req.region)?;
    let variable: TargetVariable = req.variable.parse().map_err(|e: obsimpact_core::Error| ApiError::bad_request(e.to_string()))?;
    let epsilon = req.epsilon.unwrap_or(DEFAULT_EPSILON);
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ApiError::bad_request("epsilon must be a positive number"));
    }
    let key = ExplainKey {
        region,
        time: req.time,
        node: req.node_id,
        variable,
        epsilon_bits: epsilon.to_bits(),
        model_hash: model.hash,
    };
    if let Some(hit) = st.cached_explanation(&key) {
        return Ok(json_response(hit.as_ref().clone()));
    }
    let bytes = blocking(move || {
        let s = find_snapshot(&ds, region, req.time)?;
        let cache = forward(&model.model, &s.graph)?;
        let target = ExplainTarget {
            node_id: req.node_id,
            variable,
        };
        let rel = lrp_explain(&model.model, &s.graph, &cache, target, epsilon)?;
        let pos = s.graph.position(req.node_id).expect("explained node exists");
        let context = context_positions(&s.graph, pos, model.model.n_layers())
            .into_iter()
            .map(|i| s.graph.nodes()[i].id)
            .collect();
        let resp = ExplainResponse {
            region,
            time_index: req.time,
            model_hash: model.hash_hex(),
            context,
            explanation: ExplanationExport::from(&rel),
        };
        json_bytes(&resp)
    })
    .await?;
    let bytes = Arc::new(bytes);
    st.store_explanation(key, bytes.clone());
    Ok(json_response(bytes.as_ref().clone()))
}

#[derive(Serialize)]
struct ImpactsResponse {
    region: Option<RegionName>,
    time_from: Option<u32>,
    time_to: Option<u32>,
    n_snapshots: usize,
    model_hash: String,
    #[serde(flatten)]
    table: ImpactTable,
}

async fn impacts(State(st): State<Shared>, Query(q): Params) -> ApiResult<Response> {
    let group_by: GroupKey = param::<String>(&q, "group_by")?
        .unwrap_or_else(|| GroupKey::ObservationType.as_str().to_string())
        .parse()?;
    let time_from: Option<u32> = param(&q, "time_from")?;
    let time_to: Option<u32> = param(&q, "time_to")?;
    let region = param::<String>(&q, "region")?.map(|r| region_name(&r)).transpose()?;
    let defaults = GroupingParams::default();
    let grouping = GroupingParams {
        time_window: param(&q, "time_window")?.unwrap_or(defaults.time_window),
        grid_cell_deg: param(&q, "grid_cell_deg")?.unwrap_or(defaults.grid_cell_deg),
    };
    if grouping.time_window == 0 || !(grouping.grid_cell_deg > 0.0) {
        return Err(ApiError::bad_request("time_window and grid_cell_deg must be positive"));
    }
    let csv = match param::<String>(&q, "format")?.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown format `{other}`"))),
    };
    let ds = st.dataset()?;
    let model = st.model()?;
    blocking(move || {
        let slice: Vec<&Snapshot> = ds
            .snapshots
            .iter()
            .filter(|s| time_from.is_none_or(|t| s.time_index >= t))
            .filter(|s| time_to.is_none_or(|t| s.time_index <= t))
            .filter(|s| region.is_none_or(|r| s.region.name == r))
            .collect();
        let mut merged: BTreeMap<NodeId, ContextImpact> = BTreeMap::new();
        for s in &slice {
            merged.extend(st.snapshot_impacts(&model, s)?.iter().map(|(&k, &v)| (k, v)));
        }
        let table = aggregate_impacts(slice.iter().copied(), &merged, group_by, grouping)?;
        if csv {
            let text = table.to_csv();
            return Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response());
        }
        let resp = ImpactsResponse {
            region,
            time_from,
            time_to,
            n_snapshots: slice.len(),
            model_hash: model.hash_hex(),
            table,
        };
        Ok(json_response(json_bytes(&resp)?))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FidelityRequest {
    region: Option<String>,
    fraction: Option<f64>,
    /// `test` (default), `train` or `all`.
    split: Option<String>,
}

#[derive(Serialize)]
struct FidelityResponse {
    region: Option<RegionName>,
    split: String,
    climatology: [f64; 4],
    #[serde(flatten)]
    report: FidelityReport,
    per_graph: Vec<GraphFidelity>,
}

async fn fidelity_handler(State(st): State<Shared>, payload: Result<Json<FidelityRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(payload)?;
    let model = st.model()?;
    let ds = st.dataset()?;
    let region = req.region.as_deref().map(region_name).transpose()?;
    let fraction = req.fraction.unwrap_or(DEFAULT_FRACTION);
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ApiError::bad_request("fraction must lie in (0, 1]"));
    }
    let split = req.split.unwrap_or_else(|| "test".into());
    if !matches!(split.as_str(), "test" | "train" | "all") {
        return Err(ApiError::bad_request(format!("unknown split `{split}`")));
    }
    blocking(move || {
        let snaps: Vec<&Snapshot> = ds
            .snapshots
            .iter()
            .filter(|s| region.is_none_or(|r| s.region.name == r))
            .filter(|s| match split.as_str() {
                "train" => ds.is_train(s),
                "test" => !ds.is_train(s),
                _ => true,
            })
            .collect();
        let scores = snaps
            .iter()
            .map(|s| {
                let imp = st.snapshot_impacts(&model, s)?;
                Ok(imp.iter().map(|(&id, c)| (id, c.mean())).collect())
            })
            .collect::<ApiResult<Vec<BTreeMap<NodeId, f64>>>>()?;
        let climatology = ds.climatology();
        let (report, per_graph) = fidelity(&model.model, &snaps, &scores, climatology, fraction)?;
        let resp = FidelityResponse {
            region,
            split,
            climatology,
            report,
            per_graph,
        };
        Ok(json_response(json_bytes(&resp)?))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OccludeRequest {
    region: String,
    time: u32,
    node_ids: Vec<NodeId>,
}

#[derive(Serialize)]
struct OccludeResponse {
    region: RegionName,
    time_index: u32,
    occluded: Vec<NodeId>,
    before: Metrics,
    after: Metrics,
    acc_drop: f64,
    rmse_rise: f64,
}

async fn occlude_handler(State(st): State<Shared>, payload: Result<Json<OccludeRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(payload)?;
    let model = st.model()?;
    let ds = st.dataset()?;
    let region = region_name(&req.region)?;
    blocking(move || {
        let s = find_snapshot(&ds, region, req.time)?;
        let ids: BTreeSet<NodeId> = req.node_ids.iter().copied().collect();
        let occluded = occlude(&s.graph, &ids)?;
        let clim = ds.climatology();
        let metrics = |g| -> ApiResult<Metrics> {
            let cache = forward(&model.model, g)?;
            let (p, t) = grid_rows(&cache.predictions, s);
            Ok(compute_metrics(p.view(), t.view(), clim)?)
        };
        let before = metrics(&s.graph)?;
        let after = metrics(&occluded)?;
        let resp = OccludeResponse {
            region,
            time_index: req.time,
            occluded: ids.into_iter().collect(),
            before,
            after,
            acc_drop: before.acc - after.acc,
            rmse_rise: after.rmse - before.rmse,
        };
        Ok(json_response(json_bytes(&resp)?))
    })
    .await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    #[serde(default)]
    config: TrainConfig,
}

async fn train(State(st): State<Shared>, payload: Result<Json<TrainRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(payload)?;
    let status = st.start_training(req.config)?;
    Ok((StatusCode::ACCEPTED, json_response(json_bytes(&status)?)).into_response())
}

async fn job(State(st): State<Shared>, Path(id): Path<u64>) -> ApiResult<Json<JobStatus>> {
    st.job(id).map(Json).ok_or_else(|| ApiError::not_found(format!("no job {id}")))
}

/// Inclusive box; `lon_min > lon_max` wraps across the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl std::str::FromStr for BBox {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
            .collect::<Result<_, _>>()?;
        let [lat_min, lon_min, lat_max, lon_max] = parts[..] else {
            return Err("expected lat_min,lon_min,lat_max,lon_max".into());
        };
        if parts.iter().any(|v| !v.is_finite()) {
            return Err("coordinates must be finite".into());
        }
        if !(-90.0..=90.0).contains(&lat_min) || !(-90.0..=90.0).contains(&lat_max) || lat_min > lat_max {
            return Err("latitudes must satisfy -90 <= lat_min <= lat_max <= 90".into());
        }
        if !(-180.0..=180.0).contains(&lon_min) || !(-180.0..=180.0).contains(&lon_max) {
            return Err("longitudes must lie in [-180, 180]".into());
        }
        Ok(BBox {
            lat_min,
            lon_min,
            lat_max,
            lon_max,
        })
    }
}

impl BBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        let lat_ok = lat >= self.lat_min && lat <= self.lat_max;
        let lon_ok = if self.lon_min <= self.lon_max {
            lon >= self.lon_min && lon <= self.lon_max
        } else {
            lon >= self.lon_min || lon <= self.lon_max
        };
        lat_ok && lon_ok
    }
}

#[derive(Serialize)]
struct ObservationHit {
    id: NodeId,
    kind: NodeKind,
    region: RegionName,
    time: u32,
    lat: f64,
    lon: f64,
    values: [f64; 6],
    mask: [bool; 6],
}

#[derive(Serialize)]
struct SearchResponse {
    count: usize,
    truncated: bool,
    results: Vec<ObservationHit>,
}

const SEARCH_LIMIT: usize = 10_000;

async fn search(State(st): State<Shared>, Query(q): Params) -> ApiResult<Response> {
    let bbox = match q.get("bbox") {
        Some(raw) => Some(raw.parse::<BBox>().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_bbox", e))?),
        None => None,
    };
    let kind: Option<NodeKind> = param::<String>(&q, "type")?
        .map(|t| t.parse::<NodeKind>().map_err(|_| ApiError::bad_request(format!("unknown observation type `{t}`"))))
        .transpose()?;
    if kind == Some(NodeKind::GridPoint) {
        return Err(ApiError::bad_request("grid points are not observations"));
    }
    let time: Option<u32> = param(&q, "time")?;
    let region = param::<String>(&q, "region")?.map(|r| region_name(&r)).transpose()?;
    let limit: usize = param(&q, "limit")?.unwrap_or(1000).min(SEARCH_LIMIT);
    let ds = st.dataset()?;

    let mut results = Vec::new();
    let mut count = 0;
    for s in &ds.snapshots {
        if time.is_some_and(|t| t != s.time_index) || region.is_some_and(|r| r != s.region.name) {
            continue;
        }
        for n in s.graph.observation_nodes() {
            if kind.is_some_and(|k| k != n.kind) {
                continue;
            }
            if bbox.is_some_and(|b| !b.contains(n.location.lat(), n.location.lon())) {
                continue;
            }
            count += 1;
            if results.len() < limit {
                results.push(ObservationHit {
                    id: n.id,
                    kind: n.kind,
                    region: s.region.name,
                    time: s.time_index,
                    lat: n.location.lat(),
                    lon: n.location.lon(),
                    values: *n.values(),
                    mask: *n.mask(),
                });
            }
        }
    }
    let resp = SearchResponse {
        count,
        truncated: count > results.len(),
        results,
    };
    Ok(json_response(json_bytes(&resp)?))
}

#[cfg(test)]
mod tests {
    use super::BBox;

    #[test]
    fn bbox_parsing() {
        let b: BBox = "30,120,40,130".parse().unwrap();
        assert!(b.contains(35.0, 125.0));
        assert!(b.contains(30.0, 130.0));
        assert!(!b.contains(29.9, 125.0));
        assert!("30,120,40".parse::<BBox>().is_err());
        assert!("a,b,c,d".parse::<BBox>().is_err());
        assert!("40,120,30,130".parse::<BBox>().is_err());
        assert!("91,0,92,1".parse::<BBox>().is_err());

        let wrap: BBox = "-10,170,10,-170".parse().unwrap();
        assert!(wrap.contains(0.0, 179.0) && wrap.contains(0.0, -179.0));
        assert!(!wrap.contains(0.0, 0.0));

        let point: BBox = "35.5,127.25,35.5,127.25".parse().unwrap();
        assert!(point.contains(35.5, 127.25));
        assert!(!point.contains(35.5, 127.2500001));
    }
}
