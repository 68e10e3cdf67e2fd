//! HTTP JSON service over the dose decision-support pipeline.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/cohorts` | multipart `states`, `outcomes` (CSV) and optional `schema` (JSON) |
//! | POST | `/models/train` | `{cohort_id, config?, wait?}`; 202 while training unless `wait` |
//! | GET | `/models/{id}/status` | `training`, `ready` or `failed` |
//! | POST | `/models/{id}/whatif` | `{state, doses?, grid?, seed?}` |
//! | POST | `/models/{id}/decide` | `{state, physician_dose, seed?}` |
//! | GET | `/models/{id}/compensation-map` | `?var1&var2&resolution` |
//! | GET | `/health` | |
//!
//! All values are in original clinical units. There is no authentication.

mod error;
mod routes;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Request};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::CorsLayer;

pub use error::{ApiError, ErrorBody};
pub use routes::UNITS_NOTE;
pub use state::AppState;

pub const ENV_BIND: &str = "DOSEGP_BIND";
pub const ENV_ARTIFACT_DIR: &str = "DOSEGP_ARTIFACT_DIR";
pub const ENV_SEED: &str = "DOSEGP_SEED";

const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub artifact_dir: PathBuf,
    /// Seed for training requests whose config has none.
    pub default_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: ([127, 0, 0, 1], 8080).into(),
            artifact_dir: PathBuf::from("artifacts"),
            default_seed: 0,
        }
    }
}

impl ServiceConfig {
    /// Read `DOSEGP_BIND`, `DOSEGP_ARTIFACT_DIR` and `DOSEGP_SEED`, falling
    /// back to the defaults for unset variables.
    pub fn from_env() -> Result<Self, String> {
        let mut c = ServiceConfig::default();
        if let Ok(v) = std::env::var(ENV_BIND) {
            c.bind = v.parse().map_err(|e| format!("{ENV_BIND}={v}: {e}"))?;
        }
        if let Ok(v) = std::env::var(ENV_ARTIFACT_DIR) {
            c.artifact_dir = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var(ENV_SEED) {
            c.default_seed = v.parse().map_err(|e| format!("{ENV_SEED}={v}: {e}"))?;
        }
        Ok(c)
    }
}

async fn log_requests(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_string());
    let started = std::time::Instant::now();
    let res = next.run(req).await;
    log::info!("{method} {path} {} {:.1?}", res.status().as_u16(), started.elapsed());
    res
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(routes::health))
        .route("/cohorts", post(routes::upload_cohort))
        .route("/models/train", post(routes::train_model))
        .route("/models/{id}/status", get(routes::model_status))
        .route("/models/{id}/whatif", post(routes::whatif))
        .route("/models/{id}/decide", post(routes::decide))
        .route("/models/{id}/compensation-map", get(routes::compensation_map))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(middleware::from_fn(log_requests))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Restore the artifact directory and serve until interrupted.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let state = Arc::new(AppState::open(&config.artifact_dir, config.default_seed)?);
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!(
        "listening on {} (artifacts in {})",
        listener.local_addr()?,
        config.artifact_dir.display()
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
