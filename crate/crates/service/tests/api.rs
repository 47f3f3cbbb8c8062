use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chill_core::experiments::{variant_features, Variant};
use chill_core::extract::{ExtractOptions, Extractor};
use chill_core::linear::{self, TrainConfig};
use chill_core::scorer::{MockScorer, ScorerError};
use chill_core::synth::{self, SynthConfig, SynthCorpus};
use chill_core::{ChunkingConfig, ScoreRequest, ScoreResponse, Scorer};
use chill_service::{router, Service, ServiceError, ServiceOptions, SessionInit};
use serde_json::{json, Value};
use tower::ServiceExt;

fn corpus() -> SynthCorpus {
    synth::generate(&SynthConfig {
        n_train: 150,
        n_test: 60,
        filler_vocabulary: 400,
        ..SynthConfig::default()
    })
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    state: std::path::PathBuf,
    corpus: SynthCorpus,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let corpus = corpus();
        corpus.write(&data).unwrap();
        Fixture {
            state: dir.path().join("state"),
            data,
            corpus,
            _dir: dir,
        }
    }

    fn init(&self) -> SessionInit {
        SessionInit {
            dataset: self.data.join("dataset.jsonl"),
            queries: self.data.join("queries.json"),
            scorer: format!("mock:{}", self.data.join("lexicon.json").display()),
            downstream_queries: Some(self.data.join("downstream.json")),
            seed: 42,
            chunking: ChunkingConfig::default(),
        }
    }

    fn open(&self, options: ServiceOptions) -> Arc<Service> {
        Service::open(&self.state, Some(self.init()), options).unwrap()
    }

    fn app(&self) -> Router {
        router(self.open(ServiceOptions::default()))
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(app, method, uri, body, None).await
}

async fn call_with(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut request = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        request = request.header("authorization", format!("Bearer {t}"));
    }
    let request = match body {
        Some(b) => request
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => request.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn wait_job(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, job) = call(app, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK, "{job}");
        if job["status"] == "done" || job["status"] == "failed" {
            return job;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "job {id} stuck: {job}");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

async fn train(app: &Router, body: Value) -> String {
    let (status, out) = call(app, "POST", "/train", Some(body)).await;
    assert!(status.is_success(), "{out}");
    let job = wait_job(app, out["job"]["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "done", "{job}");
    out["model_id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread")]
async fn health() {
    let fx = Fixture::new();
    let (status, body) = call(&fx.app(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok"}));
}

#[tokio::test(flavor = "multi_thread")]
async fn query_crud_round_trips_and_bumps_version() {
    let fx = Fixture::new();
    let app = fx.app();
    let (_, before) = call(&app, "GET", "/queries", None).await;
    assert_eq!(before["version"], 1);
    let (_, again) = call(&app, "GET", "/queries", None).await;
    assert_eq!(before, again);

    let query = json!({
        "query_id": "smoking",
        "question": "Does the patient smoke?",
        "template_id": "mimic",
        "custom": true,
        "expected_support": {"outcome": "supports"}
    });
    let (status, created) = call(&app, "POST", "/queries", Some(query.clone())).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    assert_eq!(created["version"], 2);
    let (_, fetched) = call(&app, "GET", "/queries/smoking", None).await;
    assert_eq!(fetched, query);

    let (status, _) = call(&app, "POST", "/queries", Some(query.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "PUT", "/queries/other", Some(query.clone())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let mut bad_task = query.clone();
    bad_task["query_id"] = json!("x");
    bad_task["expected_support"] = json!({"nope": "supports"});
    let (status, _) = call(&app, "POST", "/queries", Some(bad_task)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut edited = query.clone();
    edited["question"] = json!("Is the patient a current smoker?");
    let (status, out) = call(&app, "PUT", "/queries/smoking", Some(edited.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(out["version"], 3);
    assert_eq!(out["query"], edited);

    let (status, out) = call(&app, "DELETE", "/queries/smoking", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(out["version"], 4);
    let (status, err) = call(&app, "GET", "/queries/smoking", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "not_found");

    // Edits survive a restart.
    drop(app);
    let (_, after) = call(&fx.app(), "GET", "/queries", None).await;
    assert_eq!(after["version"], 4);
    assert_eq!(after["queries"], before["queries"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn extract_job_is_idempotent_and_reports_progress() {
    let fx = Fixture::new();
    let app = fx.app();
    let docs: Vec<String> = fx.corpus.dataset.documents()[..2].iter().map(|d| d.doc_id.clone()).collect();
    let body = json!({"doc_ids": docs, "query_ids": ["edema", "effusion", "sepsis"]});
    let (status, first) = call(&app, "POST", "/extract", Some(body.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = first["job_id"].as_str().unwrap().to_string();
    let (status, second) = call(&app, "POST", "/extract", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(second["job_id"], id);

    let job = wait_job(&app, &id).await;
    assert_eq!(job["status"], "done", "{job}");
    assert_eq!(job["progress"], json!({"completed": 6, "total": 6}));
    let (_, features) = call(&app, "GET", &format!("/jobs/{id}/features"), None).await;
    assert_eq!(features["query_ids"], json!(["edema", "effusion", "sepsis"]));
    let rows = features["values"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for (i, row) in rows.iter().enumerate() {
        for (j, q) in ["edema", "effusion", "sepsis"].iter().enumerate() {
            let doc = &fx.corpus.dataset.documents()[i];
            let v = row[j].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v > 0.5, doc.reference(q).unwrap());
        }
    }

    let (status, _) = call(&app, "POST", "/extract", Some(json!({"doc_ids": ["missing"]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/jobs/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

struct Down;

impl Scorer for Down {
    fn identity(&self) -> String {
        "down".into()
    }

    fn score(&self, _: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        Err(ScorerError::Unavailable {
            attempts: 3,
            message: "connection refused".into(),
        })
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn scorer_outage_fails_the_job_with_scorer_text() {
    let fx = Fixture::new();
    let app = router(fx.open(ServiceOptions {
        scorer: Some(Arc::new(Down)),
        ..ServiceOptions::default()
    }));
    let (_, job) = call(&app, "POST", "/extract", Some(json!({"query_ids": ["edema"]}))).await;
    let job = wait_job(&app, job["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "failed");
    let error = job["error"].as_str().unwrap();
    assert!(error.contains("scorer unavailable after 3 attempts: connection refused"), "{error}");

    // A failed job is retried on resubmission.
    let (status, again) = call(&app, "POST", "/extract", Some(json!({"query_ids": ["edema"]}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(again["status"], "queued");
}

#[tokio::test(flavor = "multi_thread")]
async fn trained_model_matches_core_output_byte_for_byte() {
    let fx = Fixture::new();
    let app = fx.app();
    let config = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let id = train(&app, json!({"task": "outcome", "variant": "binary", "config": config})).await;
    let (status, again) = call(&app, "POST", "/train", Some(json!({"task": "outcome", "variant": "binary", "config": config}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["model_id"], id);

    let served = std::fs::read_to_string(fx.state.join("models").join(format!("{id}.model.json"))).unwrap();
    let scorer = MockScorer::new(fx.corpus.lexicon.clone());
    let features = Extractor::new(&scorer, ChunkingConfig::default())
        .run(&fx.corpus.dataset, &fx.corpus.queries, ExtractOptions::default())
        .unwrap();
    let variant: Variant = "binary".parse().unwrap();
    let m = variant_features(&features, &fx.corpus.queries, variant).unwrap();
    let direct = linear::train_task(&m, &fx.corpus.dataset, "outcome", &config).unwrap();
    assert_eq!(served, direct.to_json());
}

#[tokio::test(flavor = "multi_thread")]
async fn coefficients_explanations_and_staleness() {
    let fx = Fixture::new();
    let app = fx.app();
    let id = train(&app, json!({"task": "finding/edema"})).await;

    let (status, view) = call(&app, "GET", &format!("/models/{id}/coefficients"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, repeat) = call(&app, "GET", &format!("/models/{id}/coefficients"), None).await;
    assert_eq!(view, repeat);
    assert_eq!(view["stale"], false);
    let rows = view["coefficients"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    let weights: Vec<f64> = rows.iter().map(|r| r["weight"].as_f64().unwrap()).collect();
    assert!(weights.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(rows[0]["query_id"], "edema");
    assert_eq!(rows[0]["rank"], 1);
    assert_eq!(rows[0]["expected_support"], "supports");
    assert_eq!(rows[0]["annotation"], "unannotated");
    assert!(view["expected_alignment"]["precision_at"].is_array());
    assert!(view["annotated_alignment"].is_null());

    let doc = fx.corpus.dataset.documents()[5].doc_id.clone();
    let (status, out) = call(&app, "POST", &format!("/models/{id}/explain"), Some(json!({"doc_id": doc}))).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let e = &out["explanation"];
    let sum: f64 = e["contributions"].as_array().unwrap().iter().map(|c| c["score"].as_f64().unwrap()).sum();
    let logit = e["logit"].as_f64().unwrap();
    assert!((sum + e["intercept"].as_f64().unwrap() - logit).abs() < 1e-9);
    assert!(out["reference_label"].is_boolean());
    let (status, _) = call(&app, "POST", &format!("/models/{id}/explain"), Some(json!({"doc_id": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // Deleting a query leaves the model retrievable but stale.
    call(&app, "DELETE", "/queries/stroke", None).await;
    let (status, view) = call(&app, "GET", &format!("/models/{id}/coefficients"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["stale"], true);
    assert_eq!(view["current_version"], 2);
    let (_, models) = call(&app, "GET", "/models", None).await;
    assert_eq!(models["models"][0]["stale"], true);
    let (status, _) = call(&app, "GET", "/models/m-missing/coefficients", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn annotations_drive_ranking_alignment() {
    let fx = Fixture::new();
    let app = fx.app();
    let id = train(&app, json!({"task": "outcome"})).await;
    let body = json!({"annotations": {"sepsis": "aligned", "pneumonia": "aligned", "fracture": "misaligned"}});
    let (status, view) = call(&app, "PUT", &format!("/models/{id}/annotations"), Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{view}");

    let ranked: Vec<(String, f64)> = view["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["query_id"].as_str().unwrap().to_string(), r["weight"].as_f64().unwrap()))
        .collect();
    let relevant = ["sepsis".to_string(), "pneumonia".to_string()].into_iter().collect();
    let expected = chill_core::eval::ranking_alignment(&ranked, &relevant, &chill_core::eval::RANKING_KS).unwrap();
    assert_eq!(view["annotated_alignment"], serde_json::to_value(&expected).unwrap());
    let sepsis = view["coefficients"].as_array().unwrap().iter().find(|r| r["query_id"] == "sepsis").unwrap();
    assert_eq!(sepsis["annotation"], "aligned");

    let (status, _) = call(&app, "PUT", &format!("/models/{id}/annotations"), Some(json!({"annotations": {"zzz": "aligned"}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // Annotations persist.
    drop(app);
    let (_, view2) = call(&fx.app(), "GET", &format!("/models/{id}/coefficients"), None).await;
    assert_eq!(view2["annotated_alignment"], view["annotated_alignment"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn pruning_without_retraining_changes_only_dropped_rows() {
    let fx = Fixture::new();
    let app = fx.app();
    let id = train(&app, json!({"task": "outcome"})).await;
    let doc = fx.corpus.dataset.documents()[7].doc_id.clone();

    let (status, pruned) = call(&app, "POST", &format!("/models/{id}/prune"), Some(json!({"drop": ["sepsis"], "retrain": false}))).await;
    assert_eq!(status, StatusCode::CREATED, "{pruned}");
    let new_id = pruned["model_id"].as_str().unwrap();
    assert_ne!(new_id, id);
    let sepsis = pruned["weight_deltas"].as_array().unwrap().iter().find(|d| d["query_id"] == "sepsis").unwrap();
    assert_eq!(sepsis["after"], 0.0);

    let explain = |m: String| {
        let app = app.clone();
        let doc = doc.clone();
        async move {
            let (_, out) = call(&app, "POST", &format!("/models/{m}/explain"), Some(json!({"doc_id": doc}))).await;
            out["explanation"]["contributions"]
                .as_array()
                .unwrap()
                .iter()
                .map(|c| (c["query_id"].as_str().unwrap().to_string(), c.clone()))
                .collect::<std::collections::BTreeMap<_, _>>()
        }
    };
    let before = explain(id.clone()).await;
    let after = explain(new_id.to_string()).await;
    for (q, row) in &before {
        if q == "sepsis" {
            assert_eq!(after[q]["score"], 0.0);
            assert_eq!(after[q]["feature_value"], row["feature_value"]);
        } else {
            assert_eq!(&after[q], row, "{q}");
        }
    }

    let (_, same) = call(&app, "POST", &format!("/models/{id}/prune"), Some(json!({"drop": []}))).await;
    assert_eq!(same["before"]["test_auroc"], same["after"]["test_auroc"]);
    assert!(same["weight_deltas"].as_array().unwrap().iter().all(|d| d["before"] == d["after"]));

    let all: Vec<String> = fx.corpus.queries.ids();
    let (_, none) = call(&app, "POST", &format!("/models/{id}/prune"), Some(json!({"drop": all, "retrain": false}))).await;
    assert_eq!(none["after"]["test_auroc"], 0.5);

    let (status, retrained) = call(&app, "POST", &format!("/models/{id}/prune"), Some(json!({"drop": ["sepsis"], "retrain": true}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, record) = call(&app, "GET", &format!("/models/{}", retrained["model_id"].as_str().unwrap()), None).await;
    assert_eq!(record["record"]["parent"], id);
    assert_eq!(record["record"]["retrained"], true);
    assert_eq!(record["model"]["query_ids"].as_array().unwrap().len(), 11);

    let (status, err) = call(&app, "POST", &format!("/models/{id}/prune"), Some(json!({"drop": ["nope"]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"]["message"].as_str().unwrap().contains("nope"));
}

fn write_single_class_fixture(dir: &Path) -> SessionInit {
    std::fs::create_dir_all(dir).unwrap();
    let lines = [
        r#"{"doc_id":"a","text":"edema here","labels":{"rare":0},"split":"train"}"#,
        r#"{"doc_id":"b","text":"nothing here","labels":{"rare":0},"split":"train"}"#,
        r#"{"doc_id":"c","text":"edema again","labels":{"rare":1},"split":"test"}"#,
    ];
    std::fs::write(dir.join("d.jsonl"), lines.join("\n")).unwrap();
    std::fs::write(
        dir.join("q.json"),
        r#"{"name":"q","queries":[{"query_id":"edema","question":"Edema?","template_id":"mimic"}]}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("lex.json"),
        r#"{"queries":{"edema":{"keywords":["edema"],"alpha":2.0,"beta":-1.0}}}"#,
    )
    .unwrap();
    SessionInit {
        dataset: dir.join("d.jsonl"),
        queries: dir.join("q.json"),
        scorer: format!("mock:{}", dir.join("lex.json").display()),
        downstream_queries: None,
        seed: 0,
        chunking: ChunkingConfig::default(),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn single_class_training_fails_with_trainer_error() {
    let dir = tempfile::tempdir().unwrap();
    let init = write_single_class_fixture(&dir.path().join("data"));
    let app = router(Service::open(&dir.path().join("state"), Some(init), ServiceOptions::default()).unwrap());
    let (_, out) = call(&app, "POST", "/train", Some(json!({"task": "rare"}))).await;
    let job = wait_job(&app, out["job"]["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "failed");
    let expected = chill_core::linear::TrainError::SingleClass {
        task: "rare".into(),
        positives: 0,
        n: 2,
    }
    .to_string();
    assert_eq!(job["error"], expected);
    let (status, _) = call(&app, "POST", "/train", Some(json!({"task": "unknown"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn experiments_write_reports() {
    let fx = Fixture::new();
    let app = fx.app();
    let body = json!({"bootstrap_resamples": 20, "tfidf": [30], "variants": ["continuous", "binary"]});
    let (status, job) = call(&app, "POST", "/experiments/grid", Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let job = wait_job(&app, job["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "done", "{job}");
    let result = &job["result"];
    assert!(result["outputs"]["grid.json"].is_string());
    let rows = result["reports"]["grid.json"]["rows"].as_array().unwrap();
    assert!(rows.iter().any(|r| r["method"] == "tfidf-30"));
    let out = std::path::PathBuf::from(result["output_dir"].as_str().unwrap());
    assert!(out.join("grid.json").is_file() && out.join("manifest.json").is_file());

    let (status, job) = call(&app, "POST", "/experiments/ablation", Some(json!({"mode": "random", "ablation_repeats": 2}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = wait_job(&app, job["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "done", "{job}");
    assert!(job["result"]["reports"]["ablation/random.json"]["points"].is_array());

    let (status, _) = call(&app, "POST", "/experiments/everything", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/experiments/curve", Some(json!({"fractions": [0.0]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn token_guards_everything_but_health() {
    let fx = Fixture::new();
    let app = router(fx.open(ServiceOptions {
        token: Some("s3cret".into()),
        ..ServiceOptions::default()
    }));
    let (status, _) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, err) = call(&app, "GET", "/queries", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(err["error"]["code"], "unauthorized");
    let (status, _) = call_with(&app, "GET", "/queries", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call_with(&app, "GET", "/queries", None, Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn corrupt_state_files_stop_startup_and_are_named() {
    let fx = Fixture::new();
    drop(fx.open(ServiceOptions::default()));

    let job = fx.state.join("jobs").join("extract-1.json");
    std::fs::create_dir_all(job.parent().unwrap()).unwrap();
    std::fs::write(&job, "{not json").unwrap();
    match Service::open(&fx.state, None, ServiceOptions::default()) {
        Err(ServiceError::CorruptState { path, .. }) => assert!(path.ends_with("extract-1.json"), "{path}"),
        Err(other) => panic!("unexpected {other}"),
        Ok(_) => panic!("corrupt job file accepted"),
    }
    std::fs::remove_file(&job).unwrap();

    std::fs::write(fx.state.join("session.json"), r#"{"dataset": 3}"#).unwrap();
    let err = Service::open(&fx.state, Some(fx.init()), ServiceOptions::default()).err().unwrap();
    assert!(err.to_string().contains("session.json"), "{err}");
}

#[test]
fn missing_session_without_init_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Service::open(dir.path(), None, ServiceOptions::default()).err().unwrap();
    assert!(matches!(err, ServiceError::NoSession(_)));
}

#[tokio::test(flavor = "multi_thread")]
async fn busy_port_is_a_bind_error() {
    let fx = Fixture::new();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let err = chill_service::serve(addr, fx.open(ServiceOptions::default())).await.unwrap_err();
    assert!(matches!(err, ServiceError::Bind { .. }), "{err}");
}
