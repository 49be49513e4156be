//! HTTP service over a dataset and a frozen model: browsing, explanation,
//! impact aggregation, occlusion fidelity and background training.

pub mod config;
pub mod error;
pub mod routes;
pub mod state;

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use axum::http::{HeaderValue, Method};
use axum::Router;
use obsimpact_core::model::Checkpoint;
use obsimpact_core::Dataset;
use tokio::net::TcpListener;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;

pub use config::ServiceConfig;
pub use error::{ApiError, ErrorBody};
pub use state::{AppState, JobState, JobStatus, LoadedModel};

/// Load whatever the config points at. A missing or empty data directory
/// leaves the service without a dataset; a missing checkpoint leaves it
/// without a model.
pub fn load_state(config: ServiceConfig) -> anyhow::Result<AppState> {
    let dataset = match &config.data_dir {
        Some(dir) if dir.join("meta.json").exists() => {
            Some(Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))?)
        }
        Some(dir) => {
            tracing::warn!("no dataset in {}", dir.display());
            None
        }
        None => None,
    };
    let model = match &config.model_path {
        Some(path) if path.exists() => Some(load_model(path)?),
        _ => None,
    };
    Ok(AppState::new(config, dataset, model))
}

pub fn load_model(path: &Path) -> anyhow::Result<LoadedModel> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading model from {}", path.display()))?;
    ckpt.model.check_shapes()?;
    Ok(LoadedModel::new(ckpt.model, ckpt.train_config))
}

fn cors(origins: &[String]) -> anyhow::Result<CorsLayer> {
    let layer = CorsLayer::new().allow_methods([Method::GET, Method::POST]).allow_headers(Any);
    if origins.is_empty() {
        return Ok(layer.allow_origin(Any));
    }
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).with_context(|| format!("bad CORS origin `{o}`")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(layer.allow_origin(values))
}

pub fn app(state: Arc<AppState>) -> anyhow::Result<Router> {
    let mut router = Router::new().nest("/api", routes::api_router());
    if let Some(ui) = &state.config.ui_dir {
        router = router.fallback_service(ServeDir::new(ui));
    }
    let cors = cors(&state.config.cors_origins)?;
    Ok(router.with_state(state).layer(cors).layer(TraceLayer::new_for_http()))
}

/// Serve until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    axum::serve(listener, app(state)?).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
