mod support;

use std::time::Duration;

use obsimpact_core::model::{train, Checkpoint};
use obsimpact_core::synthetic::{default_obs_counts, SnapshotConfig};
use obsimpact_core::{Dataset, DatasetConfig, RegionName, TrainConfig};
use obsimpact_server::ServiceConfig;

fn small_dataset() -> Dataset {
    Dataset::build(&DatasetConfig {
        snapshot: SnapshotConfig {
            rows: 5,
            cols: 5,
            obs_counts: default_obs_counts().into_iter().map(|(k, c)| (k, c / 3)).collect(),
            ..SnapshotConfig::default()
        },
        regions: vec![RegionName::Asia, RegionName::Europe],
        n_snapshots: 12,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs_pretrain: 2,
        epochs_finetune: 8,
        hidden: vec![8, 8],
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

fn assert_all(checks: support::Checks) {
    for (name, r) in &checks.0 {
        println!("{} {name}", if r.is_ok() { "ok  " } else { "FAIL" });
    }
    let failed = checks.failures();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoint_contract_on_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model_path = dir.path().join("model.json");
    let ds = small_dataset();
    ds.save(&data).unwrap();
    let cfg = tiny_config();
    let (model, _) = train(&cfg.init_model(), &ds, &cfg).unwrap();
    Checkpoint::new(model.clone()).save(&model_path).unwrap();

    let srv = support::start(ServiceConfig {
        data_dir: Some(data.clone()),
        model_path: Some(model_path),
        ..ServiceConfig::default()
    })
    .await;
    assert_all(support::contract_checks(&srv, &data, &ds, &model).await);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn missing_model_and_dataset_are_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = small_dataset();
    ds.save(&data).unwrap();
    let srv = support::start(ServiceConfig {
        data_dir: Some(data),
        model_path: Some(dir.path().join("absent.json")),
        ..ServiceConfig::default()
    })
    .await;
    assert_all(support::no_model_checks(&srv, &ds).await);

    let empty = tempfile::tempdir().unwrap();
    let srv = support::start(ServiceConfig {
        data_dir: Some(empty.path().to_path_buf()),
        ..ServiceConfig::default()
    })
    .await;
    assert_all(support::no_dataset_checks(&srv).await);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn training_jobs_swap_on_success_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model_path = dir.path().join("model.json");
    let ds = small_dataset();
    ds.save(&data).unwrap();
    let cfg = tiny_config();
    let (model, _) = train(&cfg.init_model(), &ds, &cfg).unwrap();
    Checkpoint::new(model).save(&model_path).unwrap();
    let srv = support::start(ServiceConfig {
        data_dir: Some(data),
        model_path: Some(model_path.clone()),
        ..ServiceConfig::default()
    })
    .await;
    let run = TrainConfig {
        epochs_pretrain: 5,
        epochs_finetune: 400,
        seed: 7,
        ..tiny_config()
    };
    assert_all(support::training_checks(&srv, run, Duration::from_secs(120)).await);
    let saved = Checkpoint::load(&model_path).unwrap();
    assert_eq!(saved.train_config.unwrap().seed, 7);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let srv = support::start(ServiceConfig::default()).await;
    let r = srv
        .client
        .request(reqwest::Method::OPTIONS, format!("{}/api/health", srv.base))
        .header("Origin", "http://localhost:5173")
        .header("Access-Control-Request-Method", "GET")
        .send()
        .await
        .unwrap();
    assert!(r.status().is_success());
    assert_eq!(r.headers()["access-control-allow-origin"], "*");
}
