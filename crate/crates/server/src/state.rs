use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use obsimpact_core::lrp::{graph_impacts, ContextImpact, DEFAULT_EPSILON};
use obsimpact_core::model::{train_with_observer, Checkpoint};
use obsimpact_core::{Dataset, Model, NodeId, RegionName, Snapshot, TargetVariable, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::{ApiError, ApiResult};

/// A frozen model plus the hash that keys every cache derived from it.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub hash: u64,
    pub train_config: Option<TrainConfig>,
}

impl LoadedModel {
    pub fn new(model: Model, train_config: Option<TrainConfig>) -> Self {
        LoadedModel {
            hash: model.content_hash(),
            model,
            train_config,
        }
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExplainKey {
    pub region: RegionName,
    pub time: u32,
    pub node: NodeId,
    pub variable: TargetVariable,
    pub epsilon_bits: u64,
    pub model_hash: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: String,
    pub state: JobState,
    pub progress: f64,
    pub message: String,
    /// Hash of the model a finished training job installed.
    pub model_hash: Option<String>,
}

type ImpactKey = (RegionName, u32, u64);

const EXPLAIN_CACHE_LIMIT: usize = 4096;

pub struct AppState {
    pub config: ServiceConfig,
    dataset: RwLock<Option<Arc<Dataset>>>,
    model: RwLock<Option<Arc<LoadedModel>>>,
    explain_cache: Mutex<HashMap<ExplainKey, Arc<Vec<u8>>>>,
    impact_cache: Mutex<HashMap<ImpactKey, Arc<BTreeMap<NodeId, ContextImpact>>>>,
    jobs: Mutex<BTreeMap<u64, JobStatus>>,
    next_job: AtomicU64,
    training: AtomicBool,
}

impl AppState {
    pub fn new(config: ServiceConfig, dataset: Option<Dataset>, model: Option<LoadedModel>) -> Self {
        AppState {
            config,
            dataset: RwLock::new(dataset.map(Arc::new)),
            model: RwLock::new(model.map(Arc::new)),
            explain_cache: Mutex::new(HashMap::new()),
            impact_cache: Mutex::new(HashMap::new()),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            training: AtomicBool::new(false),
        }
    }

    pub fn dataset(&self) -> ApiResult<Arc<Dataset>> {
        self.dataset.read().expect("dataset lock").clone().ok_or_else(ApiError::no_dataset)
    }

    pub fn model(&self) -> ApiResult<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone().ok_or_else(ApiError::no_model)
    }

    pub fn try_model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone()
    }

    /// Replace the model; caches keyed by the old hash are dropped.
    pub fn set_model(&self, m: LoadedModel) {
        *self.model.write().expect("model lock") = Some(Arc::new(m));
        self.explain_cache.lock().expect("explain cache").clear();
        self.impact_cache.lock().expect("impact cache").clear();
    }

    pub fn cached_explanation(&self, key: &ExplainKey) -> Option<Arc<Vec<u8>>> {
        self.explain_cache.lock().expect("explain cache").get(key).cloned()
    }

    pub fn store_explanation(&self, key: ExplainKey, body: Arc<Vec<u8>>) {
        let mut cache = self.explain_cache.lock().expect("explain cache");
        if cache.len() >= EXPLAIN_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, body);
    }

    /// Context statistics of every observation in `s`, computed once per model.
    pub fn snapshot_impacts(&self, m: &LoadedModel, s: &Snapshot) -> ApiResult<Arc<BTreeMap<NodeId, ContextImpact>>> {
        let key = (s.region.name, s.time_index, m.hash);
        if let Some(hit) = self.impact_cache.lock().expect("impact cache").get(&key) {
            return Ok(hit.clone());
        }
        let computed = Arc::new(graph_impacts(&m.model, &s.graph, |_| true, DEFAULT_EPSILON)?);
        self.impact_cache.lock().expect("impact cache").insert(key, computed.clone());
        Ok(computed)
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().expect("jobs").get(&id).cloned()
    }

    fn update_job(&self, id: u64, f: impl FnOnce(&mut JobStatus)) {
        let mut jobs = self.jobs.lock().expect("jobs");
        if let Some(job) = jobs.get_mut(&id) {
            if !job.state.is_terminal() {
                f(job);
            }
        }
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::SeqCst)
    }

    /// Start a background training run on the loaded dataset. Only one run
    /// may be active; the model is swapped in only if training succeeds.
    pub fn start_training(self: &Arc<Self>, cfg: TrainConfig) -> ApiResult<JobStatus> {
        let dataset = self.dataset()?;
        cfg.validate()?;
        if self.training.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return Err(ApiError::busy());
        }
        let id = self.next_job.fetch_add(1, Ordering::SeqCst);
        let status = JobStatus {
            id,
            kind: "train".into(),
            state: JobState::Queued,
            progress: 0.0,
            message: "queued".into(),
            model_hash: None,
        };
        self.jobs.lock().expect("jobs").insert(id, status.clone());

        let state = Arc::clone(self);
        std::thread::spawn(move || {
            state.update_job(id, |j| {
                j.state = JobState::Running;
                j.message = "training".into();
            });
            let total = (cfg.epochs_pretrain + cfg.epochs_finetune).max(1) as f64;
            let result = train_with_observer(&cfg.init_model(), &dataset, &cfg, |rec| {
                state.update_job(id, |j| {
                    j.progress = (rec.epoch + 1) as f64 / total;
                    j.message = format!("{} epoch {}: train loss {:.5}", rec.phase.as_str(), rec.epoch, rec.train_loss);
                });
            });
            let outcome = result.map_err(|e| e.to_string()).and_then(|(model, history)| {
                let loaded = LoadedModel::new(model, Some(cfg.clone()));
                if let Some(path) = &state.config.model_path {
                    let ckpt = Checkpoint {
                        model: loaded.model.clone(),
                        train_config: Some(cfg.clone()),
                        norm_stats: dataset.norm_stats,
                    };
                    ckpt.save(path).map_err(|e| format!("saving {}: {e}", path.display()))?;
                }
                let hash = loaded.hash_hex();
                let last = history.last().and_then(|r| r.val_regression);
                state.set_model(loaded);
                Ok((hash, last))
            });
            state.update_job(id, |j| match outcome {
                Ok((hash, val)) => {
                    j.state = JobState::Done;
                    j.progress = 1.0;
                    j.message = match val {
                        Some(v) => format!("done; held-out regression MSE {v:.5}"),
                        None => "done".into(),
                    };
                    j.model_hash = Some(hash);
                }
                Err(msg) => {
                    j.state = JobState::Failed;
                    j.message = msg;
                }
            });
            state.training.store(false, Ordering::SeqCst);
        });
        Ok(status)
    }
}
