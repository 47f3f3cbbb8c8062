use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chill_core::data::{load_dataset, load_queries, Dataset, Document, FeatureQuery, QuerySet, Split, Support};
use chill_core::eval::{auroc, ranking_alignment, RankingAlignment, RANKING_KS};
use chill_core::experiments::{variant_features, AblationMode, Experiment, ExperimentConfig, Study, Variant};
use chill_core::extract::{ChunkingConfig, ExtractOptions, Extractor, FeatureMatrix};
use chill_core::hash::Fingerprint;
use chill_core::linear::{self, Explanation, LinearModel, Retrain, TrainConfig};
use chill_core::scorer::open_scorer;
use chill_core::Scorer;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ApiError, ServiceError};
use crate::jobs::{Job, JobKind, JobStatus};

pub const SESSION_FILE: &str = "session.json";
const DEFAULT_WORKERS: usize = 2;

/// `session.json`: the active dataset, scorer, and the editable query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub dataset: PathBuf,
    pub scorer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream_queries: Option<PathBuf>,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub seed: u64,
    /// Incremented on every query edit.
    pub query_version: u64,
    pub queries: QuerySet,
}

/// Inputs for a state directory that has no session yet.
#[derive(Debug, Clone)]
pub struct SessionInit {
    pub dataset: PathBuf,
    pub queries: PathBuf,
    pub scorer: String,
    pub downstream_queries: Option<PathBuf>,
    pub seed: u64,
    pub chunking: ChunkingConfig,
}

#[derive(Default, Clone)]
pub struct ServiceOptions {
    /// Shared bearer token; when set every endpoint but `/health` needs it.
    pub token: Option<String>,
    /// Concurrent jobs; defaults to 2.
    pub workers: Option<usize>,
    /// Replaces the session's scorer (tests, embedding).
    pub scorer: Option<Arc<dyn Scorer>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    Aligned,
    Misaligned,
    Unannotated,
}

/// Registry entry for a trained model. Records and their models never change
/// once written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub task: String,
    pub variant: Variant,
    pub query_version: u64,
    pub config_fingerprint: String,
    pub train_fingerprint: String,
    /// Feature snapshot the model was trained on, `features/<key>.csv`.
    pub features: String,
    /// The queries behind the model's columns, as they were at training time.
    pub queries: Vec<FeatureQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<String>,
    #[serde(default)]
    pub retrained: bool,
    pub test_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
struct Registered {
    record: ModelRecord,
    model: LinearModel,
}

struct Inner {
    session: Session,
    models: BTreeMap<String, Registered>,
    jobs: BTreeMap<String, Job>,
    annotations: BTreeMap<String, BTreeMap<String, Annotation>>,
}

pub struct Service {
    dir: PathBuf,
    dataset: Dataset,
    downstream: Option<QuerySet>,
    scorer: Arc<dyn Scorer>,
    inner: Mutex<Inner>,
    snapshots: Mutex<BTreeMap<String, Arc<FeatureMatrix>>>,
    /// Held by anything reading or writing the shared extraction cache.
    cache_lock: Mutex<()>,
    workers: tokio::sync::Semaphore,
    token: Option<String>,
}

fn io_error(path: &Path, source: std::io::Error) -> ServiceError {
    ServiceError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn write_atomic(path: &Path, content: &str) -> Result<(), ServiceError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("state serializes");
    s.push('\n');
    s
}

fn read_state<T: DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    let content = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&content).map_err(|e| ServiceError::CorruptState {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// `*.json` files in `dir`, sorted, skipping `skip_suffix`.
fn json_files(dir: &Path, skip_suffix: Option<&str>) -> Result<Vec<PathBuf>, ServiceError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_error(dir, e))? {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".json") && !skip_suffix.is_some_and(|s| name.ends_with(s)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn short(hash: &str) -> &str {
    &hash[..16]
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Service {
    /// Opens `dir`, creating the session from `init` when none exists. Any
    /// unreadable state file stops startup with its path in the error.
    pub fn open(dir: &Path, init: Option<SessionInit>, options: ServiceOptions) -> Result<Arc<Self>, ServiceError> {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let session_path = dir.join(SESSION_FILE);
        let session: Session = if session_path.exists() {
            read_state(&session_path)?
        } else {
            let init = init.ok_or_else(|| ServiceError::NoSession(dir.display().to_string()))?;
            let queries = load_queries(&init.queries)?;
            let session = Session {
                dataset: absolute(&init.dataset),
                scorer: match init.scorer.strip_prefix("mock:") {
                    Some(p) => format!("mock:{}", absolute(Path::new(p)).display()),
                    None => init.scorer,
                },
                downstream_queries: init.downstream_queries.as_deref().map(absolute),
                chunking: init.chunking,
                seed: init.seed,
                query_version: 1,
                queries,
            };
            write_atomic(&session_path, &pretty(&session))?;
            session
        };
        session.queries.validate().map_err(|e| ServiceError::CorruptState {
            path: session_path.display().to_string(),
            message: e.to_string(),
        })?;

        let mut models = BTreeMap::new();
        for path in json_files(&dir.join("models"), Some(".model.json"))? {
            let record: ModelRecord = read_state(&path)?;
            let model_path = dir.join("models").join(format!("{}.model.json", record.model_id));
            let content = std::fs::read_to_string(&model_path).map_err(|e| io_error(&model_path, e))?;
            let model = LinearModel::from_json(&content).map_err(|e| ServiceError::CorruptState {
                path: model_path.display().to_string(),
                message: e.to_string(),
            })?;
            models.insert(record.model_id.clone(), Registered { record, model });
        }
        let mut jobs = BTreeMap::new();
        for path in json_files(&dir.join("jobs"), None)? {
            let mut job: Job = read_state(&path)?;
            if !job.status.is_finished() {
                if job.status == JobStatus::Queued {
                    job.advance(JobStatus::Running).expect("queued job can start");
                }
                job.finish(Err("interrupted by a service restart".into()));
                write_atomic(&path, &pretty(&job))?;
            }
            jobs.insert(job.job_id.clone(), job);
        }
        let mut annotations = BTreeMap::new();
        for path in json_files(&dir.join("annotations"), None)? {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            annotations.insert(id, read_state(&path)?);
        }

        let dataset = load_dataset(&session.dataset)?;
        let downstream = match &session.downstream_queries {
            Some(p) => Some(load_queries(p)?),
            None => None,
        };
        let scorer = match options.scorer {
            Some(s) => s,
            None => open_scorer(&session.scorer)?,
        };
        Ok(Arc::new(Service {
            dir: dir.to_path_buf(),
            dataset,
            downstream,
            scorer,
            inner: Mutex::new(Inner {
                session,
                models,
                jobs,
                annotations,
            }),
            snapshots: Mutex::new(BTreeMap::new()),
            cache_lock: Mutex::new(()),
            workers: tokio::sync::Semaphore::new(options.workers.unwrap_or(DEFAULT_WORKERS).max(1)),
            token: options.token,
        }))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("service state lock")
    }

    pub fn session(&self) -> Session {
        self.lock().session.clone()
    }

    // ---- queries ----

    pub fn queries_view(&self) -> Value {
        let inner = self.lock();
        json!({
            "version": inner.session.query_version,
            "name": inner.session.queries.name,
            "queries": inner.session.queries.queries,
        })
    }

    pub fn query(&self, id: &str) -> Result<FeatureQuery, ApiError> {
        self.lock()
            .session
            .queries
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no query {id:?}")))
    }

    /// Applies `edit` to a copy of the query set, validates it, and commits
    /// it with the next version number.
    fn edit_queries(&self, edit: impl FnOnce(&mut QuerySet) -> Result<(), ApiError>) -> Result<u64, ApiError> {
        let mut inner = self.lock();
        let mut session = inner.session.clone();
        edit(&mut session.queries)?;
        session.queries.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        let tasks: BTreeSet<&str> = self.dataset.tasks().iter().map(|t| t.name.as_str()).collect();
        for q in &session.queries.queries {
            if let Some(task) = q.expected_support.iter().flat_map(|s| s.keys()).find(|t| !tasks.contains(t.as_str())) {
                return Err(ApiError::bad_request(format!(
                    "query {:?} annotates unknown task {task:?}",
                    q.query_id
                )));
            }
        }
        session.query_version += 1;
        write_atomic(&self.dir.join(SESSION_FILE), &pretty(&session))?;
        let version = session.query_version;
        inner.session = session;
        Ok(version)
    }

    pub fn create_query(&self, query: FeatureQuery) -> Result<u64, ApiError> {
        self.edit_queries(|qs| {
            if qs.get(&query.query_id).is_some() {
                return Err(ApiError::conflict(format!("query {:?} already exists", query.query_id)));
            }
            qs.queries.push(query);
            Ok(())
        })
    }

    pub fn replace_query(&self, id: &str, query: FeatureQuery) -> Result<u64, ApiError> {
        if query.query_id != id {
            return Err(ApiError::bad_request(format!(
                "body query_id {:?} does not match path {id:?}",
                query.query_id
            )));
        }
        self.edit_queries(|qs| {
            let pos = qs.position(id).ok_or_else(|| ApiError::not_found(format!("no query {id:?}")))?;
            qs.queries[pos] = query;
            Ok(())
        })
    }

    pub fn delete_query(&self, id: &str) -> Result<u64, ApiError> {
        self.edit_queries(|qs| {
            let pos = qs.position(id).ok_or_else(|| ApiError::not_found(format!("no query {id:?}")))?;
            qs.queries.remove(pos);
            Ok(())
        })
    }

    // ---- jobs ----

    pub fn job(&self, id: &str) -> Result<Job, ApiError> {
        self.lock()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))
    }

    fn save_job(&self, job: &Job) {
        let path = self.dir.join("jobs").join(format!("{}.json", job.job_id));
        if let Err(e) = write_atomic(&path, &pretty(job)) {
            log::error!("persisting job {}: {e}", job.job_id);
        }
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut Job)) {
        let mut inner = self.lock();
        if let Some(job) = inner.jobs.get_mut(id) {
            f(job);
            let snapshot = job.clone();
            drop(inner);
            self.save_job(&snapshot);
        }
    }

    fn set_progress(&self, id: &str, completed: usize, total: usize) {
        if let Some(job) = self.lock().jobs.get_mut(id) {
            job.progress.completed = completed;
            job.progress.total = total;
        }
    }

    /// Queues `work` under `job_id` unless a job with that id is queued,
    /// running, or done; returns the job and whether it was created.
    pub fn submit<F>(self: &Arc<Self>, job_id: String, kind: JobKind, work: F) -> (Job, bool)
    where
        F: FnOnce(&Service, &str) -> Result<Value, String> + Send + 'static,
    {
        let job = {
            let mut inner = self.lock();
            if let Some(existing) = inner.jobs.get(&job_id) {
                if existing.status != JobStatus::Failed {
                    return (existing.clone(), false);
                }
            }
            let job = Job::new(job_id.clone(), kind);
            inner.jobs.insert(job_id.clone(), job.clone());
            job
        };
        self.save_job(&job);
        let service = Arc::clone(self);
        tokio::spawn(async move {
            let _permit = service.workers.acquire().await.expect("worker pool open");
            service.update_job(&job_id, |j| j.advance(JobStatus::Running).expect("queued job starts"));
            let runner = Arc::clone(&service);
            let id = job_id.clone();
            let outcome = tokio::task::spawn_blocking(move || work(&runner, &id))
                .await
                .unwrap_or_else(|e| Err(format!("job panicked: {e}")));
            if let Err(e) = &outcome {
                log::warn!("job {job_id} failed: {e}");
            }
            service.update_job(&job_id, |j| j.finish(outcome));
        });
        (job, true)
    }

    // ---- features ----

    fn snapshot_path(&self, key: &str) -> PathBuf {
        self.dir.join("features").join(format!("{key}.csv"))
    }

    fn features_key(&self, dataset: &Dataset, queries: &QuerySet, chunking: ChunkingConfig) -> String {
        let provenance = Extractor::new(self.scorer.as_ref(), chunking).provenance(dataset, queries);
        short(&provenance.fingerprint()).to_string()
    }

    fn load_snapshot(&self, key: &str) -> Result<Arc<FeatureMatrix>, String> {
        if let Some(m) = self.snapshots.lock().expect("snapshot lock").get(key) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(FeatureMatrix::load(&self.snapshot_path(key)).map_err(|e| e.to_string())?);
        self.snapshots
            .lock()
            .expect("snapshot lock")
            .insert(key.to_string(), Arc::clone(&m));
        Ok(m)
    }

    /// Features for every document under `queries`, scored through the
    /// shared cache and kept as an immutable snapshot.
    fn full_features(
        &self,
        queries: &QuerySet,
        chunking: ChunkingConfig,
        job_id: Option<&str>,
    ) -> Result<(String, Arc<FeatureMatrix>), String> {
        let key = self.features_key(&self.dataset, queries, chunking);
        if self.snapshot_path(&key).exists() {
            let m = self.load_snapshot(&key)?;
            if let Some(id) = job_id {
                self.set_progress(id, m.values().len(), m.values().len());
            }
            return Ok((key, m));
        }
        let _guard = self.cache_lock.lock().expect("cache lock");
        let cache = self.dir.join("cache").join("features.csv");
        let progress = |done: usize, total: usize| {
            if let Some(id) = job_id {
                self.set_progress(id, done, total);
            }
        };
        let m = Extractor::new(self.scorer.as_ref(), chunking)
            .run(
                &self.dataset,
                queries,
                ExtractOptions {
                    cache: Some(&cache),
                    progress: Some(&progress),
                },
            )
            .map_err(|e| e.to_string())?;
        m.save(&self.snapshot_path(&key)).map_err(|e| e.to_string())?;
        let m = Arc::new(m);
        self.snapshots
            .lock()
            .expect("snapshot lock")
            .insert(key.clone(), Arc::clone(&m));
        Ok((key, m))
    }

    /// Queues extraction of `doc_ids` × `query_ids` (everything when absent).
    /// Identical requests share one job.
    pub fn extract(
        self: &Arc<Self>,
        doc_ids: Option<Vec<String>>,
        query_ids: Option<Vec<String>>,
    ) -> Result<(Job, bool), ApiError> {
        let session = self.session();
        let queries = match &query_ids {
            None => session.queries.clone(),
            Some(ids) => QuerySet {
                name: session.queries.name.clone(),
                downstream: false,
                queries: ids
                    .iter()
                    .map(|id| {
                        session
                            .queries
                            .get(id)
                            .cloned()
                            .ok_or_else(|| ApiError::bad_request(format!("no query {id:?}")))
                    })
                    .collect::<Result<_, _>>()?,
            },
        };
        if queries.is_empty() {
            return Err(ApiError::bad_request("no queries to extract"));
        }
        let whole = doc_ids.is_none() && query_ids.is_none();
        let dataset = match &doc_ids {
            None => None,
            Some(ids) => {
                let docs: Vec<Document> = ids
                    .iter()
                    .map(|id| {
                        self.dataset
                            .get(id)
                            .cloned()
                            .ok_or_else(|| ApiError::bad_request(format!("no document {id:?}")))
                    })
                    .collect::<Result<_, _>>()?;
                Some(Dataset::new(docs).map_err(|e| ApiError::bad_request(e.to_string()))?)
            }
        };
        let key = self.features_key(dataset.as_ref().unwrap_or(&self.dataset), &queries, session.chunking);
        let chunking = session.chunking;
        Ok(self.submit(format!("extract-{key}"), JobKind::Extract, move |svc, job_id| {
            let (key, m) = if whole {
                svc.full_features(&queries, chunking, Some(job_id))?
            } else {
                let dataset = dataset.as_ref().unwrap_or(&svc.dataset);
                let progress = |done: usize, total: usize| svc.set_progress(job_id, done, total);
                let m = Extractor::new(svc.scorer.as_ref(), chunking)
                    .run(
                        dataset,
                        &queries,
                        ExtractOptions {
                            cache: None,
                            progress: Some(&progress),
                        },
                    )
                    .map_err(|e| e.to_string())?;
                m.save(&svc.snapshot_path(&key)).map_err(|e| e.to_string())?;
                (key.clone(), Arc::new(m))
            };
            Ok(json!({
                "features": format!("features/{key}.csv"),
                "n_docs": m.n_rows(),
                "n_queries": m.n_cols(),
            }))
        }))
    }

    /// Feature values produced by a finished extract job.
    pub fn job_features(&self, job_id: &str) -> Result<Value, ApiError> {
        let job = self.job(job_id)?;
        if job.kind != JobKind::Extract {
            return Err(ApiError::bad_request(format!("job {job_id:?} is not an extract job")));
        }
        if job.status != JobStatus::Done {
            return Err(ApiError::conflict(format!("job {job_id:?} is {:?}", job.status)));
        }
        let key = job_id.trim_start_matches("extract-");
        let m = self.load_snapshot(key).map_err(ApiError::internal)?;
        let rows: Vec<&[f64]> = (0..m.n_rows()).map(|i| m.row(i)).collect();
        Ok(json!({
            "doc_ids": m.doc_ids(),
            "query_ids": m.query_ids(),
            "values": rows,
        }))
    }

    // ---- models ----

    fn register(&self, record: ModelRecord, model: LinearModel) -> Result<(), String> {
        let models = self.dir.join("models");
        write_atomic(&models.join(format!("{}.model.json", record.model_id)), &model.to_json())
            .map_err(|e| e.to_string())?;
        write_atomic(&models.join(format!("{}.json", record.model_id)), &pretty(&record))
            .map_err(|e| e.to_string())?;
        self.lock()
            .models
            .insert(record.model_id.clone(), Registered { record, model });
        Ok(())
    }

    fn registered(&self, id: &str) -> Result<Registered, ApiError> {
        self.lock()
            .models
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no model {id:?}")))
    }

    fn test_auroc(&self, model: &LinearModel, features: &FeatureMatrix) -> Option<f64> {
        let (rows, labels) = linear::task_rows(features, &self.dataset, &model.task, Split::Test).ok()?;
        let scores = linear::predict_logits(model, &rows).ok()?;
        auroc(&scores, &labels).ok()
    }

    /// The model's columns from its snapshot, binarized for binary variants.
    fn model_features(&self, record: &ModelRecord, model: &LinearModel) -> Result<FeatureMatrix, String> {
        let snapshot = self.load_snapshot(&record.features)?;
        let m = snapshot.select_columns(&model.query_ids).map_err(|e| e.to_string())?;
        Ok(match record.variant.kind {
            chill_core::experiments::FeatureKind::Continuous => m,
            chill_core::experiments::FeatureKind::Binary => m.binarized(),
        })
    }

    /// Queues training for `task`; the model id is known up front and the
    /// same request always maps to the same model.
    pub fn train(
        self: &Arc<Self>,
        task: String,
        variant: Variant,
        config: TrainConfig,
    ) -> Result<(String, Job, bool), ApiError> {
        if self.dataset.task(&task).is_none() {
            return Err(ApiError::bad_request(format!("unknown task {task:?}")));
        }
        config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        let session = self.session();
        let config_fp = config.fingerprint();
        let model_id = format!(
            "m-{}",
            short(
                &Fingerprint::new()
                    .part(self.dataset.content_hash())
                    .part(&task)
                    .part(session.query_version.to_string())
                    .part(variant.to_string())
                    .part(&config_fp)
                    .finish()
            )
        );
        let id = model_id.clone();
        let (job, created) = self.submit(format!("train-{model_id}"), JobKind::Train, move |svc, job_id| {
            let (key, snapshot) = svc.full_features(&session.queries, session.chunking, Some(job_id))?;
            let m = variant_features(&snapshot, &session.queries, variant).map_err(|e| e.to_string())?;
            let model = linear::train_task(&m, &svc.dataset, &task, &config).map_err(|e| e.to_string())?;
            let record = ModelRecord {
                model_id: id.clone(),
                task: task.clone(),
                variant,
                query_version: session.query_version,
                config_fingerprint: config_fp.clone(),
                train_fingerprint: model.train_fingerprint.clone(),
                features: key,
                queries: model
                    .query_ids
                    .iter()
                    .filter_map(|q| session.queries.get(q).cloned())
                    .collect(),
                parent: None,
                dropped: Vec::new(),
                retrained: false,
                test_auroc: svc.test_auroc(&model, &m),
            };
            svc.register(record, model)?;
            Ok(json!({"model_id": id}))
        });
        Ok((model_id, job, created))
    }

    pub fn models_view(&self) -> Value {
        let inner = self.lock();
        let current = inner.session.query_version;
        let models: Vec<Value> = inner
            .models
            .values()
            .map(|r| {
                json!({
                    "model_id": r.record.model_id,
                    "task": r.record.task,
                    "variant": r.record.variant,
                    "query_version": r.record.query_version,
                    "stale": r.record.query_version != current,
                    "parent": r.record.parent,
                    "test_auroc": r.record.test_auroc,
                })
            })
            .collect();
        json!({"models": models})
    }

    pub fn model_view(&self, id: &str) -> Result<Value, ApiError> {
        let r = self.registered(id)?;
        let current = self.lock().session.query_version;
        let model: Value = serde_json::from_str(&r.model.to_json()).expect("model json");
        Ok(json!({
            "record": r.record,
            "stale": r.record.query_version != current,
            "model": model,
        }))
    }

    fn alignment(coefficients: &[(String, f64)], relevant: &BTreeSet<String>) -> Option<RankingAlignment> {
        ranking_alignment(coefficients, relevant, &RANKING_KS).ok()
    }

    /// Coefficients sorted by weight, descending, with the expected-support
    /// badge, the current annotation, and alignment against both.
    pub fn coefficients(&self, id: &str) -> Result<Value, ApiError> {
        let r = self.registered(id)?;
        let (current, annotations) = {
            let inner = self.lock();
            (
                inner.session.query_version,
                inner.annotations.get(id).cloned().unwrap_or_default(),
            )
        };
        let ranked = r.model.ranked();
        let question = |q: &str| r.record.queries.iter().find(|fq| fq.query_id == q);
        let rows: Vec<Value> = ranked
            .iter()
            .enumerate()
            .map(|(i, (q, w))| {
                let fq = question(q);
                json!({
                    "query_id": q,
                    "question": fq.map(|f| f.question.clone()),
                    "weight": w,
                    "rank": i + 1,
                    "expected_support": fq.and_then(|f| f.supports(&r.record.task)),
                    "annotation": annotations.get(q.as_str()).copied().unwrap_or(Annotation::Unannotated),
                })
            })
            .collect();
        let expected: BTreeSet<String> = r
            .record
            .queries
            .iter()
            .filter(|q| q.supports(&r.record.task) == Some(Support::Supports))
            .map(|q| q.query_id.clone())
            .collect();
        let aligned: BTreeSet<String> = annotations
            .iter()
            .filter(|(_, a)| **a == Annotation::Aligned)
            .map(|(q, _)| q.clone())
            .collect();
        Ok(json!({
            "model_id": id,
            "task": r.record.task,
            "variant": r.record.variant,
            "query_version": r.record.query_version,
            "current_version": current,
            "stale": r.record.query_version != current,
            "train_fingerprint": r.model.train_fingerprint,
            "intercept": r.model.intercept,
            "coefficients": rows,
            "expected_alignment": Self::alignment(&ranked, &expected),
            "annotated_alignment": if annotations.values().any(|a| *a != Annotation::Unannotated) {
                Self::alignment(&ranked, &aligned)
            } else {
                None
            },
        }))
    }

    /// Replaces the annotations of a model's coefficients.
    pub fn annotate(&self, id: &str, annotations: BTreeMap<String, Annotation>) -> Result<Value, ApiError> {
        let r = self.registered(id)?;
        if let Some(unknown) = annotations.keys().find(|q| !r.model.query_ids.contains(q)) {
            return Err(ApiError::bad_request(format!("model {id:?} has no coefficient {unknown:?}")));
        }
        let kept: BTreeMap<String, Annotation> = annotations
            .into_iter()
            .filter(|(_, a)| *a != Annotation::Unannotated)
            .collect();
        write_atomic(&self.dir.join("annotations").join(format!("{id}.json")), &pretty(&kept))?;
        self.lock().annotations.insert(id.to_string(), kept);
        self.coefficients(id)
    }

    pub fn explain(&self, id: &str, doc_id: &str) -> Result<Value, ApiError> {
        let r = self.registered(id)?;
        let doc = self
            .dataset
            .get(doc_id)
            .ok_or_else(|| ApiError::not_found(format!("no document {doc_id:?}")))?;
        let m = self.model_features(&r.record, &r.model).map_err(ApiError::internal)?;
        let explanation: Explanation =
            linear::explain_doc(&r.model, &m, doc_id).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let current = self.lock().session.query_version;
        Ok(json!({
            "model_id": id,
            "doc_id": doc_id,
            "stale": r.record.query_version != current,
            "reference_label": doc.label(&r.record.task),
            "explanation": explanation,
        }))
    }

    /// Registers the model obtained by dropping `drop` from `id`, either by
    /// zeroing weights or by retraining on the remaining columns.
    pub fn prune(&self, id: &str, drop: BTreeSet<String>, retrain: bool) -> Result<Value, ApiError> {
        let parent = self.registered(id)?;
        let m = self
            .model_features(&parent.record, &parent.model)
            .map_err(ApiError::internal)?;
        let pruned = if retrain {
            let (rows, labels) = linear::task_rows(&m, &self.dataset, &parent.model.task, Split::Train)
                .map_err(|e| ApiError::bad_request(e.to_string()))?;
            linear::prune(
                &parent.model,
                &drop,
                Some(Retrain {
                    features: &rows,
                    labels: &labels,
                    cfg: &parent.model.config,
                }),
            )
        } else {
            linear::prune(&parent.model, &drop, None)
        }
        .map_err(|e| ApiError::bad_request(e.to_string()))?;

        let mut fp = Fingerprint::new().part(id).part(if retrain { "retrain" } else { "zero" });
        for q in &drop {
            fp = fp.part(q);
        }
        let model_id = format!("m-{}", short(&fp.finish()));
        if !self.lock().models.contains_key(&model_id) {
            let record = ModelRecord {
                model_id: model_id.clone(),
                train_fingerprint: pruned.train_fingerprint.clone(),
                parent: Some(id.to_string()),
                dropped: drop.iter().cloned().collect(),
                retrained: retrain,
                test_auroc: self.test_auroc(&pruned, &m),
                queries: parent
                    .record
                    .queries
                    .iter()
                    .filter(|q| pruned.query_ids.contains(&q.query_id))
                    .cloned()
                    .collect(),
                ..parent.record.clone()
            };
            self.register(record, pruned.clone()).map_err(ApiError::internal)?;
        }
        let after = self.registered(&model_id)?;
        let deltas: Vec<Value> = parent
            .model
            .query_ids
            .iter()
            .map(|q| {
                json!({
                    "query_id": q,
                    "before": parent.model.weight(q).unwrap_or(0.0),
                    "after": after.model.weight(q).unwrap_or(0.0),
                })
            })
            .collect();
        Ok(json!({
            "model_id": model_id,
            "parent": id,
            "retrained": retrain,
            "dropped": drop,
            "before": {"test_auroc": parent.record.test_auroc, "intercept": parent.model.intercept},
            "after": {"test_auroc": after.record.test_auroc, "intercept": after.model.intercept},
            "weight_deltas": deltas,
        }))
    }

    // ---- experiments ----

    /// Queues a study over the current query set; reports land in
    /// `experiments/<job id>/`.
    pub fn experiment(self: &Arc<Self>, study: Study, request: ExperimentRequest) -> Result<(Job, bool), ApiError> {
        let session = self.session();
        let mut config = ExperimentConfig {
            dataset: session.dataset.clone(),
            queries: PathBuf::from(format!("queries/v{}.json", session.query_version)),
            downstream_queries: session.downstream_queries.clone(),
            scorer: session.scorer.clone(),
            cache: Some(PathBuf::from("cache/features.csv")),
            seed: session.seed,
            chunking: session.chunking,
            base_dir: self.dir.clone(),
            ..ExperimentConfig::default()
        };
        request.apply(&mut config);
        let study_name = match study {
            Study::Grid => "grid".to_string(),
            Study::Curve => "curve".to_string(),
            Study::Fidelity => "fidelity".to_string(),
            Study::Ablation(mode) => format!("ablation-{mode}"),
        };
        let job_id = format!(
            "experiment-{study_name}-{}",
            short(
                &Fingerprint::new()
                    .part(self.dataset.content_hash())
                    .part(session.queries.content_hash())
                    .part(serde_json::to_string(&config).expect("config serializes"))
                    .finish()
            )
        );
        config.output_dir = PathBuf::from("experiments").join(&job_id);
        // Reference indicators for queries no longer in the set are dropped.
        let ids: BTreeSet<String> = session.queries.ids().into_iter().collect();
        let docs: Vec<Document> = self
            .dataset
            .documents()
            .iter()
            .map(|d| {
                let mut d = d.clone();
                if let Some(refs) = d.reference_features.as_mut() {
                    refs.retain(|q, _| ids.contains(q));
                }
                d
            })
            .collect();
        let dataset = Dataset::new(docs).map_err(|e| ApiError::internal(e.to_string()))?;
        let snapshot = self.dir.join(&config.queries);
        write_atomic(&snapshot, &pretty(&session.queries))?;
        config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(self.submit(job_id, JobKind::Experiment, move |svc, _| {
            let output = config.output_path();
            let exp = Experiment::from_parts(config, dataset, session.queries, svc.downstream.clone(), Arc::clone(&svc.scorer))
                .map_err(|e| e.to_string())?;
            let _guard = svc.cache_lock.lock().expect("cache lock");
            let out = exp.run_study(study).map_err(|e| e.to_string())?;
            let reports: BTreeMap<String, Value> = out
                .files
                .iter()
                .map(|(rel, content)| (rel.clone(), serde_json::from_str(content).expect("report json")))
                .collect();
            Ok(json!({
                "output_dir": output.display().to_string(),
                "outputs": out.manifest.outputs,
                "reports": reports,
            }))
        }))
    }
}

/// Optional overrides for `POST /experiments/{study}`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRequest {
    pub mode: Option<AblationMode>,
    pub seed: Option<u64>,
    pub bootstrap_resamples: Option<usize>,
    pub variants: Option<Vec<Variant>>,
    pub fractions: Option<Vec<f64>>,
    pub ablation_repeats: Option<usize>,
    pub ablation_variant: Option<Variant>,
    pub tfidf: Option<Vec<usize>>,
    pub ground_truth: Option<bool>,
    pub zero_shot: Option<bool>,
}

impl ExperimentRequest {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.bootstrap_resamples {
            config.bootstrap_resamples = v;
        }
        if let Some(v) = &self.variants {
            config.variants = v.clone();
        }
        if let Some(v) = &self.fractions {
            config.fractions = v.clone();
        }
        if let Some(v) = self.ablation_repeats {
            config.ablation_repeats = v;
        }
        if let Some(v) = self.ablation_variant {
            config.ablation_variant = v;
        }
        if let Some(v) = &self.tfidf {
            config.baselines.tfidf = v.clone();
        }
        if let Some(v) = self.ground_truth {
            config.baselines.ground_truth = v;
        }
        if let Some(v) = self.zero_shot {
            config.baselines.zero_shot = v;
        }
        if config.downstream_queries.is_none() {
            config.baselines.zero_shot = false;
        }
    }
}
