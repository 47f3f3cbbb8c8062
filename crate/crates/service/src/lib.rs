//! HTTP service over the pipeline for the expert workbench: query editing,
//! extraction jobs, training, coefficient inspection, explanations, and
//! what-if pruning.
//!
//! State lives in one directory:
//!
//! ```text
//! session.json             dataset, scorer, versioned query set
//! jobs/<id>.json           job status, progress, result or error
//! models/<id>.json         model record (task, variant, query version, ...)
//! models/<id>.model.json   model file, same format as `chill train --out`
//! annotations/<id>.json    expert alignment annotations per coefficient
//! features/<key>.csv       immutable feature snapshots
//! cache/features.csv       shared incremental extraction cache
//! experiments/<job id>/    study reports and manifest
//! ```

mod error;
mod jobs;
mod routes;
mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use error::{ApiError, ServiceError};
pub use jobs::{Job, JobKind, JobStatus, Progress};
pub use routes::router;
pub use state::{Annotation, ExperimentRequest, ModelRecord, Service, ServiceOptions, Session, SessionInit, SESSION_FILE};

/// Serves `service` on `addr` until Ctrl-C. State is written through on every
/// mutation, so shutdown only waits for in-flight requests.
pub async fn serve(addr: SocketAddr, service: Arc<Service>) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    log::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
        .map_err(|source| ServiceError::Io {
            path: addr.to_string(),
            source,
        })
}
