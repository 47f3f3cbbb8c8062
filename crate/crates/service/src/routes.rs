use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chill_core::data::FeatureQuery;
use chill_core::experiments::{AblationMode, Study, Variant};
use chill_core::linear::TrainConfig;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::jobs::Job;
use crate::state::{Annotation, ExperimentRequest, Service};

type AppState = Arc<Service>;
type ApiResult = Result<Response, ApiError>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/queries", get(list_queries).post(create_query))
        .route("/queries/{id}", get(get_query).put(replace_query).delete(delete_query))
        .route("/extract", post(extract))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/features", get(job_features))
        .route("/train", post(train))
        .route("/models", get(list_models))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/coefficients", get(coefficients))
        .route("/models/{id}/annotations", put(annotate))
        .route("/models/{id}/explain", post(explain))
        .route("/models/{id}/prune", post(prune))
        .route("/experiments/{study}", post(experiment))
        .layer(middleware::from_fn_with_state(Arc::clone(&service), require_token))
        .route("/health", get(health))
        .with_state(service)
}

async fn require_token(State(svc): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = svc.token() {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

/// Runs blocking service work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("handler panicked: {e}")))?
}

fn job_response(job: Job, created: bool) -> Response {
    let status = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
    (status, Json(job)).into_response()
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn list_queries(State(svc): State<AppState>) -> Json<Value> {
    Json(svc.queries_view())
}

async fn get_query(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(svc.query(&id)?).into_response())
}

async fn create_query(State(svc): State<AppState>, Json(query): Json<FeatureQuery>) -> ApiResult {
    let id = query.query_id.clone();
    let version = svc.create_query(query)?;
    let body = json!({"version": version, "query": svc.query(&id)?});
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn replace_query(State(svc): State<AppState>, Path(id): Path<String>, Json(query): Json<FeatureQuery>) -> ApiResult {
    let version = svc.replace_query(&id, query)?;
    Ok(Json(json!({"version": version, "query": svc.query(&id)?})).into_response())
}

async fn delete_query(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let version = svc.delete_query(&id)?;
    Ok(Json(json!({"version": version})).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractBody {
    doc_ids: Option<Vec<String>>,
    query_ids: Option<Vec<String>>,
}

async fn extract(State(svc): State<AppState>, body: Option<Json<ExtractBody>>) -> ApiResult {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let (job, created) = svc.extract(body.doc_ids, body.query_ids)?;
    Ok(job_response(job, created))
}

async fn get_job(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(svc.job(&id)?).into_response())
}

async fn job_features(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let body = blocking(move || svc.job_features(&id)).await?;
    Ok(Json(body).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainBody {
    task: String,
    #[serde(default = "Variant::continuous")]
    variant: Variant,
    #[serde(default)]
    config: TrainConfig,
}

async fn train(State(svc): State<AppState>, Json(body): Json<TrainBody>) -> ApiResult {
    let (model_id, job, created) = svc.train(body.task, body.variant, body.config)?;
    let status = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((status, Json(json!({"model_id": model_id, "job": job}))).into_response())
}

async fn list_models(State(svc): State<AppState>) -> Json<Value> {
    Json(svc.models_view())
}

async fn get_model(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(svc.model_view(&id)?).into_response())
}

async fn coefficients(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(svc.coefficients(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateBody {
    annotations: BTreeMap<String, Annotation>,
}

async fn annotate(State(svc): State<AppState>, Path(id): Path<String>, Json(body): Json<AnnotateBody>) -> ApiResult {
    Ok(Json(svc.annotate(&id, body.annotations)?).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainBody {
    doc_id: String,
}

async fn explain(State(svc): State<AppState>, Path(id): Path<String>, Json(body): Json<ExplainBody>) -> ApiResult {
    let out = blocking(move || svc.explain(&id, &body.doc_id)).await?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PruneBody {
    #[serde(default)]
    drop: BTreeSet<String>,
    #[serde(default)]
    retrain: bool,
}

async fn prune(State(svc): State<AppState>, Path(id): Path<String>, Json(body): Json<PruneBody>) -> ApiResult {
    let out = blocking(move || svc.prune(&id, body.drop, body.retrain)).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn experiment(
    State(svc): State<AppState>,
    Path(study): Path<String>,
    body: Option<Json<ExperimentRequest>>,
) -> ApiResult {
    let request = body.map(|Json(b)| b).unwrap_or_default();
    let study = match study.as_str() {
        "grid" => Study::Grid,
        "curve" => Study::Curve,
        "fidelity" => Study::Fidelity,
        "ablation" => Study::Ablation(request.mode.unwrap_or(AblationMode::Magnitude)),
        other => {
            return Err(ApiError::not_found(format!(
                "unknown study {other:?}; expected grid, curve, ablation, or fidelity"
            )))
        }
    };
    let (job, created) = svc.experiment(study, request)?;
    Ok(job_response(job, created))
}
