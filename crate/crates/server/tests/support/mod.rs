#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use obsimpact_core::eval::{aggregate_impacts, GroupKey, GroupingParams};
use obsimpact_core::lrp::aggregate_contexts;
use obsimpact_core::{Dataset, Model, NodeKind, RegionName, TrainConfig};
use obsimpact_server::{load_state, ServiceConfig};
use reqwest::StatusCode;
use serde_json::{json, Value};

pub struct TestServer {
    pub base: String,
    pub client: reqwest::Client,
}

/// Bind an ephemeral port and serve `config` in the background of the current runtime.
pub async fn start(config: ServiceConfig) -> TestServer {
    let state = Arc::new(load_state(config).expect("state loads"));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(obsimpact_server::serve(listener, state, std::future::pending()));
    TestServer {
        base,
        client: reqwest::Client::new(),
    }
}

impl TestServer {
    pub async fn get(&self, path: &str) -> (StatusCode, Vec<u8>) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.expect("request");
        let status = r.status();
        (status, r.bytes().await.unwrap().to_vec())
    }

    pub async fn get_json(&self, path: &str) -> (StatusCode, Value) {
        let (s, b) = self.get(path).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn post(&self, path: &str, body: &Value) -> (StatusCode, Vec<u8>) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .expect("request");
        let status = r.status();
        (status, r.bytes().await.unwrap().to_vec())
    }

    pub async fn post_json(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        let (s, b) = self.post(path, body).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }
}

/// Named check outcomes, in the order they ran.
#[derive(Default)]
pub struct Checks(pub Vec<(String, Result<(), String>)>);

impl Checks {
    pub fn record(&mut self, name: &str, r: Result<(), String>) {
        self.0.push((name.to_string(), r));
    }

    pub fn failures(&self) -> Vec<String> {
        self.0
            .iter()
            .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
            .collect()
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn status_is(got: StatusCode, want: u16, body: &Value) -> Result<(), String> {
    ensure(got.as_u16() == want, format!("status {got}, want {want}: {body}"))
}

fn error_code(body: &Value, code: &str) -> Result<(), String> {
    ensure(
        body["code"] == code && body["message"].is_string(),
        format!("expected error code `{code}`, got {body}"),
    )
}

fn region_file_count(data_dir: &Path, region: RegionName) -> usize {
    std::fs::read_dir(data_dir.join("snapshots"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(&format!("{}_", region.as_str())))
        .count()
}

/// Every endpoint example against a server holding `ds` (saved at `data_dir`) and `model`.
pub async fn contract_checks(srv: &TestServer, data_dir: &Path, ds: &Dataset, model: &Model) -> Checks {
    let mut c = Checks::default();

    let (s, v) = srv.get_json("/api/regions").await;
    c.record("regions: one entry per dataset region", (|| {
        status_is(s, 200, &v)?;
        let want: std::collections::BTreeSet<_> = ds.snapshots.iter().map(|s| s.region.name).collect();
        ensure(v["regions"].as_array().map(|a| a.len()) == Some(want.len()), format!("{v}"))
    })());
    c.record("regions: counts equal snapshot files on disk", (|| {
        for r in v["regions"].as_array().ok_or("no regions")? {
            let name: RegionName = r["region"]["name"].as_str().ok_or("no name")?.parse().map_err(|_| "bad name")?;
            ensure(r["snapshots"].as_u64() == Some(region_file_count(data_dir, name) as u64), format!("{name}: {r}"))?;
        }
        Ok(())
    })());

    let probe = ds.test().next().expect("held-out snapshot");
    let (region, time) = (probe.region.name, probe.time_index);
    let graph_url = format!("/api/graph?region={region}&time={time}");
    let (s, v) = srv.get_json(&graph_url).await;
    c.record("graph: node and edge counts match the snapshot file", (|| {
        status_is(s, 200, &v)?;
        let file = data_dir.join("snapshots").join(probe.file_name());
        let disk: Value = serde_json::from_slice(&std::fs::read(file).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(v["graph"]["nodes"].as_array().map(Vec::len) == disk["nodes"].as_array().map(Vec::len), "node count")?;
        ensure(v["graph"]["edges"].as_array().map(Vec::len) == disk["edges"].as_array().map(Vec::len), "edge count")?;
        ensure(v["graph"] == json!({ "edges": disk["edges"], "nodes": disk["nodes"], "normalized": disk["normalized"], "region": disk["region"], "time_index": disk["time_index"] }), "graph document differs from file")
    })());
    c.record("graph: response carries norm_stats, predictions and importances", (|| {
        ensure(v["norm_stats"]["mean"].as_array().map(Vec::len) == Some(6), "norm_stats")?;
        ensure(v["predictions"].as_array().map(Vec::len) == Some(probe.targets.len()), "predictions")?;
        ensure(v["importances"].as_array().map(Vec::len) == Some(probe.obs_nodes().count()), "importances")
    })());
    let (s, v) = srv.get_json(&format!("/api/graph?region={region}&time=99999")).await;
    c.record("graph: unknown time is 404", status_is(s, 404, &v).and_then(|_| error_code(&v, "not_found")));
    let (s, v) = srv.get_json("/api/graph?region=Atlantis&time=1").await;
    c.record("graph: unknown region is 400", status_is(s, 400, &v));

    let grid = probe.grid_nodes().nth(probe.targets.len() / 2).unwrap().id;
    let req = |var: &str| json!({ "region": region.as_str(), "time": time, "node_id": grid.0, "variable": var });
    let (s1, b1) = srv.post("/api/explain", &req("ALL")).await;
    let (s2, b2) = srv.post("/api/explain", &req("ALL")).await;
    c.record("explain: repeated call returns identical bytes", ensure(s1 == 200 && s2 == 200 && b1 == b2, format!("{s1} {s2}")));
    let all: Value = serde_json::from_slice(&b1).unwrap_or(Value::Null);
    let mut sum: BTreeMap<u64, f64> = BTreeMap::new();
    for var in ["U", "V", "T", "Q"] {
        let (_, v) = srv.post_json("/api/explain", &req(var)).await;
        for n in v["nodes"].as_array().cloned().unwrap_or_default() {
            *sum.entry(n["id"].as_u64().unwrap()).or_default() += n["signed"].as_f64().unwrap();
        }
    }
    c.record("explain: ALL equals the sum of the four variables within 1e-9", (|| {
        let nodes = all["nodes"].as_array().ok_or("no nodes")?;
        ensure(!nodes.is_empty() && nodes.len() == sum.len(), "node lists differ")?;
        for n in nodes {
            let id = n["id"].as_u64().unwrap();
            let d = (n["signed"].as_f64().unwrap() - sum[&id]).abs();
            ensure(d < 1e-9, format!("node {id}: {d}"))?;
        }
        Ok(())
    })());
    c.record("explain: context is the two-hop neighbourhood", (|| {
        let ctx = obsimpact_core::extract_context(&probe.graph, grid, 2).map_err(|e| e.to_string())?;
        let want: Vec<u64> = ctx.nodes().iter().map(|n| n.id.0).collect();
        let got: Vec<u64> = all["context"].as_array().ok_or("no context")?.iter().filter_map(Value::as_u64).collect();
        ensure(got == want, "context differs")?;
        for n in all["nodes"].as_array().unwrap() {
            if !want.contains(&n["id"].as_u64().unwrap()) {
                ensure(n["abs"].as_f64() == Some(0.0), "relevance outside context")?;
            }
        }
        Ok(())
    })());
    let obs = probe.obs_nodes().next().unwrap().id;
    let (s, v) = srv.post_json("/api/explain", &json!({ "region": region.as_str(), "time": time, "node_id": obs.0 })).await;
    c.record("explain: observation target is 400", status_is(s, 400, &v).and_then(|_| error_code(&v, "not_grid_target")));
    let (s, v) = srv.post_json("/api/explain", &json!({ "region": region.as_str() })).await;
    c.record("explain: malformed body is 400", status_is(s, 400, &v).and_then(|_| error_code(&v, "bad_request")));

    let (s, v) = srv.get_json("/api/impacts?group_by=observation_type").await;
    c.record("impacts: by observation type over the dataset has at most 11 rows", (|| {
        status_is(s, 200, &v)?;
        let n = v["rows"].as_array().ok_or("no rows")?.len();
        ensure(n >= 1 && n <= NodeKind::sources().len(), format!("{n} rows"))
    })());
    let (s, v) = srv.get_json(&format!("/api/impacts?group_by=observation_type&time_from={time}&time_to={time}&region={region}")).await;
    c.record("impacts: single-snapshot window equals direct aggregation", (|| {
        status_is(s, 200, &v)?;
        let direct = aggregate_contexts(model, [&probe.graph], |_| true).map_err(|e| e.to_string())?;
        let table = aggregate_impacts([probe], &direct, GroupKey::ObservationType, GroupingParams::default()).map_err(|e| e.to_string())?;
        let rows = v["rows"].as_array().ok_or("no rows")?;
        ensure(rows.len() == table.rows.len(), "row count")?;
        for (got, want) in rows.iter().zip(&table.rows) {
            ensure(got["key"] == want.key.as_str() && got["count"].as_u64() == Some(want.count as u64), format!("{got}"))?;
            ensure(got["mean"].as_f64() == Some(want.mean) && got["std"].as_f64() == Some(want.std), format!("{got}"))?;
        }
        Ok(())
    })());
    let (s, v) = srv.get_json("/api/impacts?group_by=region&time_from=100000").await;
    c.record("impacts: empty window is an empty 200 table", status_is(s, 200, &v).and_then(|_| ensure(v["rows"] == json!([]), format!("{v}"))));
    let (s, v) = srv.get_json("/api/impacts?group_by=station").await;
    c.record("impacts: unknown group key is 400", status_is(s, 400, &v).and_then(|_| error_code(&v, "bad_group_key")));
    let (s, b) = srv.get("/api/impacts?group_by=grid_cell&format=csv").await;
    c.record("impacts: CSV export", ensure(s == 200 && b.starts_with(b"group_by,key,mean,std,count,n_observations\n"), "csv header"));

    let (s, v) = srv.post_json("/api/fidelity", &json!({ "region": region.as_str() })).await;
    c.record("fidelity: report for one region's held-out split", (|| {
        status_is(s, 200, &v)?;
        let n = ds.test().filter(|s| s.region.name == region).count() as u64;
        ensure(v["n_graphs"].as_u64() == Some(n), format!("{v}"))?;
        ensure(v["fi_plus"].is_f64() && v["fi_minus"].is_f64() && v["fraction"].as_f64() == Some(0.2), format!("{v}"))
    })());
    let (s, v) = srv.post_json("/api/fidelity", &json!({ "fraction": 0.0 })).await;
    c.record("fidelity: fraction outside (0, 1] is 400", status_is(s, 400, &v));

    let (s, v) = srv.post_json("/api/occlude", &json!({ "region": region.as_str(), "time": time, "node_ids": [] })).await;
    c.record("occlude: empty selection leaves metrics unchanged", status_is(s, 200, &v).and_then(|_| {
        ensure(v["before"] == v["after"] && v["acc_drop"].as_f64() == Some(0.0), format!("{v}"))
    }));
    let (s, v) = srv.post_json("/api/occlude", &json!({ "region": region.as_str(), "time": time, "node_ids": [grid.0] })).await;
    c.record("occlude: grid node is 400", status_is(s, 400, &v).and_then(|_| error_code(&v, "occlude_target")));

    let b = probe.region;
    let (s, v) = srv
        .get_json(&format!("/api/observations/search?bbox={},{},{},{}&type=SONDE&region={region}&limit=10000", b.lat_min, b.lon_min, b.lat_max, b.lon_max))
        .await;
    c.record("search: region box returns every observation of the type", (|| {
        status_is(s, 200, &v)?;
        let want = ds.snapshots.iter().filter(|s| s.region.name == region).flat_map(|s| s.obs_nodes()).filter(|n| n.kind == NodeKind::Sonde).count();
        ensure(v["count"].as_u64() == Some(want as u64) && v["results"].as_array().map(Vec::len) == Some(want), format!("want {want}, got {}", v["count"]))
    })());
    let target = probe.obs_nodes().next().unwrap();
    let (lat, lon) = (target.location.lat(), target.location.lon());
    let (s, v) = srv.get_json(&format!("/api/observations/search?bbox={lat},{lon},{lat},{lon}")).await;
    c.record("search: point box returns only nodes at that coordinate", (|| {
        status_is(s, 200, &v)?;
        let hits = v["results"].as_array().ok_or("no results")?;
        ensure(hits.iter().any(|h| h["id"].as_u64() == Some(target.id.0)), "target missing")?;
        ensure(hits.iter().all(|h| h["lat"].as_f64() == Some(lat) && h["lon"].as_f64() == Some(lon)), "stray hit")
    })());
    for bad in ["1,2,3", "a,b,c,d", "50,0,40,10"] {
        let (s, v) = srv.get_json(&format!("/api/observations/search?bbox={bad}")).await;
        c.record(&format!("search: malformed bbox `{bad}` is 400"), status_is(s, 400, &v).and_then(|_| error_code(&v, "bad_bbox")));
    }

    let gets = [
        "/api/regions".to_string(),
        graph_url.clone(),
        "/api/impacts?group_by=region".into(),
        "/api/impacts?group_by=time_window&time_window=3".into(),
        format!("/api/observations/search?type=AIRCRAFT&time={time}"),
        "/api/model".into(),
    ];
    let mut first = Vec::new();
    for g in &gets {
        first.push(srv.get(g).await);
    }
    srv.post("/api/explain", &req("T")).await;
    let mut stable = Ok(());
    for (g, before) in gets.iter().zip(&first) {
        let again = srv.get(g).await;
        if &again != before || before.0 != 200 {
            stable = Err(format!("{g} changed or failed ({})", before.0));
            break;
        }
    }
    c.record("GET endpoints are byte-stable across repeated calls", stable);
    c
}

/// Endpoints that need a model must answer 409 without one.
pub async fn no_model_checks(srv: &TestServer, ds: &Dataset) -> Checks {
    let mut c = Checks::default();
    let s0 = ds.snapshots.first().unwrap();
    let grid = s0.grid_nodes().next().unwrap().id;
    let (s, v) = srv.post_json("/api/explain", &json!({ "region": s0.region.name.as_str(), "time": s0.time_index, "node_id": grid.0 })).await;
    c.record("explain without a model is 409", status_is(s, 409, &v).and_then(|_| error_code(&v, "no_model")));
    let (s, v) = srv.post_json("/api/fidelity", &json!({})).await;
    c.record("fidelity without a model is 409", status_is(s, 409, &v).and_then(|_| error_code(&v, "no_model")));
    let (s, v) = srv.get_json("/api/impacts?group_by=region").await;
    c.record("impacts without a model is 409", status_is(s, 409, &v));
    let (s, v) = srv.get_json(&format!("/api/graph?region={}&time={}", s0.region.name, s0.time_index)).await;
    c.record("graph without a model has no predictions", status_is(s, 200, &v).and_then(|_| ensure(v["predictions"].is_null(), "predictions present")));
    c
}

pub async fn no_dataset_checks(srv: &TestServer) -> Checks {
    let mut c = Checks::default();
    let (s, v) = srv.get_json("/api/regions").await;
    c.record("regions with an empty data directory is 409", status_is(s, 409, &v).and_then(|_| error_code(&v, "no_dataset")));
    let (s, v) = srv.post_json("/api/train", &json!({})).await;
    c.record("train without a dataset is 409", status_is(s, 409, &v));
    c
}

async fn wait_job(srv: &TestServer, id: u64, timeout: Duration) -> Value {
    let start = Instant::now();
    loop {
        let (_, v) = srv.get_json(&format!("/api/jobs/{id}")).await;
        if v["state"] == "done" || v["state"] == "failed" || start.elapsed() > timeout {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

/// Training jobs: failure keeps the old model, a second concurrent job is
/// refused, success swaps the model in.
pub async fn training_checks(srv: &TestServer, run: TrainConfig, timeout: Duration) -> Checks {
    let mut c = Checks::default();
    let (_, before) = srv.get_json("/api/model").await;

    let diverge = TrainConfig { lr: 1e300, epochs_pretrain: 0, epochs_finetune: 2, ..run.clone() };
    let (s, v) = srv.post_json("/api/train", &json!({ "config": diverge })).await;
    let failed = match (s.as_u16(), v["id"].as_u64()) {
        (202, Some(id)) => wait_job(srv, id, timeout).await,
        _ => v.clone(),
    };
    let (_, after) = srv.get_json("/api/model").await;
    c.record("train: diverging run fails and leaves the model untouched", (|| {
        ensure(failed["state"] == "failed", format!("{failed}"))?;
        ensure(before["hash"] == after["hash"], "model changed")
    })());

    let (s, v) = srv.post_json("/api/train", &json!({ "config": { "lr": -1.0 } })).await;
    c.record("train: invalid config is 400", status_is(s, 400, &v));

    let (s1, v1) = srv.post_json("/api/train", &json!({ "config": run })).await;
    let (s2, v2) = srv.post_json("/api/train", &json!({ "config": run })).await;
    c.record("train: second concurrent job is 409 busy", (|| {
        status_is(s1, 202, &v1)?;
        status_is(s2, 409, &v2)?;
        error_code(&v2, "busy")
    })());
    if let Some(id) = v1["id"].as_u64() {
        let done = wait_job(srv, id, timeout).await;
        let (_, now) = srv.get_json("/api/model").await;
        c.record("train: finished job installs the new model", (|| {
            ensure(done["state"] == "done" && done["progress"].as_f64() == Some(1.0), format!("{done}"))?;
            ensure(now["hash"] == done["model_hash"] && now["hash"] != before["hash"], format!("{now}"))
        })());
        let (_, again) = srv.get_json(&format!("/api/jobs/{id}")).await;
        c.record("train: terminal job status is stable", ensure(again == done, "job changed"));
    }
    let (s, v) = srv.get_json("/api/jobs/987654").await;
    c.record("jobs: unknown id is 404", status_is(s, 404, &v));
    c
}
