//! HTTP/JSON service over a [`Store`], used by the labeling front end.
//!
//! Handlers share the store behind a reader/writer lock, so every mutation is
//! applied whole before any reader sees it. Long jobs (training, detection,
//! augmentation, evaluation) go to a single FIFO worker thread and are polled
//! through `GET /jobs/{job_id}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classifier::{check_categories, init_model, train_split_observed, CallLabel, ClassifierError, TrainConfig, TrainHistory};
use crate::datastore::{AnnotationFilter, AnnotationSource, NewAnnotation, Store, StoreError};
use crate::metrics::{match_detections, rates, EvaluationReport, RecordingScore};
use crate::pipeline::{detect_screened, Config, PipelineError};
use crate::spectrogram::{excerpt_around, render_region, SpectrogramError, TimeFreqBox};
use crate::synthgen::{propose, ReviewStatus, SeedTile, SynthError, Verdict};

/// Most strips kept in the render cache before it is cleared.
const STRIP_CACHE_LIMIT: usize = 256;
const MAX_STRIP_PX: usize = 4096;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::UnknownRecording(_) | StoreError::UnknownId(_) | StoreError::UnknownManifest(_) => Self::not_found(message),
            StoreError::Synth(SynthError::UnknownId(_)) => Self::not_found(message),
            StoreError::Synth(SynthError::AlreadyDecided { .. }) | StoreError::DuplicateId(_) => {
                Self::new(StatusCode::CONFLICT, "conflict", message)
            }
            StoreError::Invalid(_) | StoreError::Synth(_) | StoreError::Json(_) => Self::bad_request(message),
            StoreError::TooFewCategories(_) | StoreError::Classifier(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", message),
            StoreError::ReadOnly => Self::new(StatusCode::FORBIDDEN, "read_only", message),
            StoreError::Spectrogram(SpectrogramError::EmptyBox | SpectrogramError::TooShort { .. }) => Self::bad_request(message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl From<SpectrogramError> for ApiError {
    fn from(e: SpectrogramError) -> Self {
        StoreError::from(e).into()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Store(s) => s.into(),
            other => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Train,
    Detect,
    Augment,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    /// Checkpoint name, run id or count, depending on the kind.
    pub result: Option<String>,
    pub error: Option<String>,
    /// Epochs finished so far (training jobs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

impl JobStatus {
    /// Moves forward only; requests to go back are ignored.
    fn advance(&mut self, state: JobState) {
        let terminal = matches!(self.state, JobState::Done | JobState::Failed);
        if !terminal && state > self.state {
            self.state = state;
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct TrainRequest {
    pub manifest_version: u64,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    /// Continue from this stored checkpoint instead of a fresh model.
    #[serde(default)]
    pub init_checkpoint: Option<String>,
    /// Name for the resulting checkpoint; defaults to the job id.
    #[serde(default)]
    pub checkpoint_name: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct DetectRequest {
    #[serde(default)]
    pub recording_ids: Option<Vec<String>>,
    /// Model used when noise screening is configured.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AugmentRequest {
    pub manifest_version: u64,
    #[serde(default = "one")]
    pub per_seed: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct EvaluateRequest {
    #[serde(default)]
    pub recording_ids: Option<Vec<String>>,
    #[serde(default)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone)]
enum Job {
    Train(TrainRequest),
    Detect(DetectRequest),
    Augment(AugmentRequest),
    Evaluate(EvaluateRequest),
}

impl Job {
    fn kind(&self) -> JobKind {
        match self {
            Job::Train(_) => JobKind::Train,
            Job::Detect(_) => JobKind::Detect,
            Job::Augment(_) => JobKind::Augment,
            Job::Evaluate(_) => JobKind::Evaluate,
        }
    }
}

type Jobs = Arc<Mutex<BTreeMap<String, JobStatus>>>;

pub struct AppState {
    store: Arc<RwLock<Store>>,
    config: Arc<Config>,
    jobs: Jobs,
    queue: Mutex<mpsc::Sender<(String, Job)>>,
    next_job: AtomicU64,
    strips: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl AppState {
    /// Wraps `store` and starts the job worker thread.
    pub fn new(store: Store, config: Config) -> Arc<Self> {
        let store = Arc::new(RwLock::new(store));
        let config = Arc::new(config);
        let jobs: Jobs = Arc::default();
        let (tx, rx) = mpsc::channel::<(String, Job)>();
        {
            let (store, config, jobs) = (store.clone(), config.clone(), jobs.clone());
            std::thread::Builder::new()
                .name("usvkit-jobs".into())
                .spawn(move || {
                    for (id, job) in rx {
                        run_job(&store, &config, &jobs, &id, job);
                    }
                })
                .expect("spawn job worker");
        }
        Arc::new(Self { store, config, jobs, queue: Mutex::new(tx), next_job: AtomicU64::new(1), strips: Mutex::default() })
    }

    pub fn store(&self) -> &Arc<RwLock<Store>> {
        &self.store
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().expect("jobs lock").get(id).cloned()
    }

    fn submit(&self, job: Job) -> String {
        let id = format!("job-{:06}", self.next_job.fetch_add(1, Ordering::SeqCst));
        let status = JobStatus { job_id: id.clone(), kind: job.kind(), state: JobState::Queued, progress: 0.0, result: None, error: None, history: None };
        self.jobs.lock().expect("jobs lock").insert(id.clone(), status);
        self.queue.lock().expect("queue lock").send((id.clone(), job)).expect("job worker alive");
        id
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Store> {
        self.store.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Store> {
        self.store.write().unwrap_or_else(|p| p.into_inner())
    }
}

fn update(jobs: &Jobs, id: &str, f: impl FnOnce(&mut JobStatus)) {
    if let Some(s) = jobs.lock().expect("jobs lock").get_mut(id) {
        f(s);
    }
}

fn run_job(store: &RwLock<Store>, config: &Config, jobs: &Jobs, id: &str, job: Job) {
    update(jobs, id, |s| s.advance(JobState::Running));
    let outcome = match job {
        Job::Train(r) => train_job(store, config, jobs, id, r),
        Job::Detect(r) => detect_job(store, config, jobs, id, r),
        Job::Augment(r) => augment_job(store, config, r),
        Job::Evaluate(r) => evaluate_job(store, config, id, r),
    };
    update(jobs, id, |s| match outcome {
        Ok(result) => {
            s.result = Some(result);
            s.progress = 1.0;
            s.advance(JobState::Done);
        }
        Err(e) => {
            s.error = Some(e.to_string());
            s.advance(JobState::Failed);
        }
    });
}

fn train_job(store: &RwLock<Store>, config: &Config, jobs: &Jobs, id: &str, r: TrainRequest) -> Result<String, PipelineError> {
    let cfg = r.config.unwrap_or_else(|| config.train.clone());
    let (train, val, init) = {
        let store = store.read().unwrap_or_else(|p| p.into_inner());
        let init = r.init_checkpoint.as_deref().map(|n| store.load_checkpoint(n)).transpose()?;
        let size = init.as_ref().map_or(config.tile.out_size, |m| m.input_size().0);
        let tile = crate::spectrogram::TileParams { out_size: size, ..config.tile.clone() };
        let (train, val) = store.load_split(r.manifest_version, &config.spectrogram, &tile)?;
        (train, val, init)
    };
    let model = match init {
        Some(m) => {
            check_categories(&m, train.iter().chain(&val))?;
            m
        }
        None => {
            let mut cats: Vec<CallLabel> = train.iter().chain(&val).map(|t| t.label).collect();
            cats.sort();
            cats.dedup();
            init_model(config.tile.out_size, &cats, cfg.seed)?
        }
    };
    let total = cfg.epochs.max(1) as f64;
    let mut done = 0usize;
    let (mut model, history) = train_split_observed(&model, &train, &val, &cfg, &mut |rec| {
        done += 1;
        update(jobs, id, |s| {
            s.progress = done as f64 / total;
            s.history.get_or_insert_with(TrainHistory::default).epochs.push(rec.clone());
        });
    })?;
    model.meta.dataset_version = Some(r.manifest_version);
    update(jobs, id, |s| s.history = Some(history));
    let name = r.checkpoint_name.unwrap_or_else(|| id.to_string());
    store.read().unwrap_or_else(|p| p.into_inner()).save_checkpoint(&name, &model)?;
    Ok(name)
}

fn detect_job(store: &RwLock<Store>, config: &Config, jobs: &Jobs, id: &str, r: DetectRequest) -> Result<String, PipelineError> {
    let (ids, model) = {
        let store = store.read().unwrap_or_else(|p| p.into_inner());
        let ids = r.recording_ids.unwrap_or_else(|| store.recordings().map(|e| e.id.clone()).collect());
        let model = r.checkpoint.as_deref().map(|n| store.load_checkpoint(n)).transpose()?;
        (ids, model)
    };
    let mut total = 0;
    for (i, rec) in ids.iter().enumerate() {
        let clip = store.read().unwrap_or_else(|p| p.into_inner()).load_recording(rec)?;
        let candidates = detect_screened(&clip, config, model.as_ref())?;
        total += candidates.len();
        store.write().unwrap_or_else(|p| p.into_inner()).put_candidates(rec, &candidates)?;
        update(jobs, id, |s| s.progress = (i + 1) as f64 / ids.len() as f64);
    }
    Ok(total.to_string())
}

fn augment_job(store: &RwLock<Store>, config: &Config, r: AugmentRequest) -> Result<String, PipelineError> {
    let proposals = {
        let store = store.read().unwrap_or_else(|p| p.into_inner());
        let m = store.manifest(r.manifest_version)?;
        let ids: Vec<String> = m
            .splits
            .train
            .iter()
            .filter(|id| !m.synthetic_ids.contains(id))
            .filter(|id| store.annotation(id).is_ok_and(|a| a.label != CallLabel::Noise))
            .cloned()
            .collect();
        let tiles = store.labeled_tiles(&ids, &config.spectrogram, &config.tile)?;
        let seeds: Vec<SeedTile> =
            ids.into_iter().zip(tiles).map(|(annotation_id, t)| SeedTile { annotation_id, label: t.label, tile: t.tile }).collect();
        let mut params = config.morph.clone();
        if let Some(seed) = r.seed {
            params.seed = seed;
        }
        propose(&seeds, r.per_seed, &params)?
    };
    let n = store.write().unwrap_or_else(|p| p.into_inner()).add_synthetics(proposals)?.len();
    Ok(n.to_string())
}

fn evaluate_job(store: &RwLock<Store>, config: &Config, id: &str, r: EvaluateRequest) -> Result<String, PipelineError> {
    let store_r = store.read().unwrap_or_else(|p| p.into_inner());
    let ids = r.recording_ids.unwrap_or_else(|| store_r.recordings().map(|e| e.id.clone()).collect());
    let mut rows = Vec::new();
    for rec in &ids {
        let Some(candidates) = store_r.cached_candidates(rec)? else { continue };
        let filter = AnnotationFilter { recording_id: Some(rec.clone()), label: None };
        let truth: Vec<TimeFreqBox> = store_r
            .annotations(&filter)
            .into_iter()
            .filter(|a| !matches!(a.source, AnnotationSource::Synthetic { .. }) && a.label != CallLabel::Noise)
            .map(|a| a.bbox)
            .collect();
        let tally = match_detections(&candidates, &truth, config.evaluation.min_overlap);
        rows.push(RecordingScore { recording: rec.clone(), tally, rates: rates(&tally).ok() });
    }
    let report = EvaluationReport::from_recordings(rows);
    let run_id = r.run_id.unwrap_or_else(|| id.to_string());
    store_r.save_run(&run_id, &report)?;
    Ok(run_id)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/recordings", get(list_recordings))
        .route("/recordings/{id}/spectrogram", get(spectrogram_strip))
        .route("/recordings/{id}/candidates", get(recording_candidates))
        .route("/annotations", get(list_annotations).post(create_annotation))
        .route("/annotations/{id}", get(get_annotation).patch(patch_annotation))
        .route("/synthetics", get(list_synthetics))
        .route("/synthetics/{id}", get(get_synthetic))
        .route("/synthetics/{id}/tile", get(synthetic_tile))
        .route("/synthetics/{id}/seed_tile", get(synthetic_seed_tile))
        .route("/synthetics/{id}/decision", post(decide_synthetic))
        .route("/manifests", get(list_manifests).post(create_manifest))
        .route("/manifests/{version}", get(get_manifest))
        .route("/train", post(submit_train))
        .route("/detect", post(submit_detect))
        .route("/augment", post(submit_augment))
        .route("/evaluate", post(submit_evaluate))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{job_id}", get(get_job))
        .route("/metrics/runs/{run_id}", get(get_run))
        .with_state(state)
}

/// Opens the store, binds `addr` and serves until the process ends.
pub fn serve(store: Store, config: Config, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::new(store, config);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state)).await
    })
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_recordings(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let store = s.read();
    let rows: Vec<_> = store
        .recordings()
        .map(|r| json!({ "id": r.id, "duration_s": r.duration_s, "sample_rate_hz": r.sample_rate_hz, "noise_tag": r.noise_tag }))
        .collect();
    Json(json!(rows))
}

#[derive(Debug, Deserialize)]
struct StripQuery {
    t0: Option<f64>,
    t1: Option<f64>,
    fmin: Option<f64>,
    fmax: Option<f64>,
    width: Option<usize>,
    height: Option<usize>,
}

async fn spectrogram_strip(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<StripQuery>) -> ApiResult<Response> {
    let store = s.read();
    let entry = store.recording(&id)?.clone();
    let t0 = q.t0.unwrap_or(0.0);
    let t1 = q.t1.unwrap_or(entry.duration_s.min(t0 + 5.0));
    let nyquist = entry.sample_rate_hz as f64 / 2.0;
    let fmin = q.fmin.unwrap_or(20_000.0);
    let fmax = q.fmax.unwrap_or(95_000.0_f64.min(nyquist));
    if !(t0 >= 0.0 && t0 < t1 && t1 <= entry.duration_s + 1e-9) {
        return Err(ApiError::bad_request(format!("need 0 <= t0 < t1 <= {}", entry.duration_s)));
    }
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(ApiError::bad_request(format!("need 0 <= fmin < fmax <= {nyquist}")));
    }
    let params = &s.config.spectrogram;
    let frames = ((t1 - t0) * entry.sample_rate_hz as f64 / params.hop as f64).ceil() as usize;
    let width = q.width.unwrap_or(frames.clamp(16, 2048));
    let height = q.height.unwrap_or(256);
    if width == 0 || height == 0 || width > MAX_STRIP_PX || height > MAX_STRIP_PX {
        return Err(ApiError::bad_request(format!("width and height must lie in 1..={MAX_STRIP_PX}")));
    }
    let key = format!("{id}|{t0}|{t1}|{fmin}|{fmax}|{width}|{height}|{}", params.digest());
    if let Some(hit) = s.strips.lock().expect("cache lock").get(&key).cloned() {
        return Ok(png(hit.as_ref().clone()));
    }
    let clip = store.load_recording(&id)?;
    drop(store);
    let region = TimeFreqBox::new(t0, t1, fmin, fmax);
    let (spec, offset) = excerpt_around(&clip, &region, params)?;
    let local = TimeFreqBox::new(t0 - offset, t1 - offset, fmin, fmax);
    let bytes = render_region(&spec, &local, width, height)?.to_png()?;
    let mut cache = s.strips.lock().expect("cache lock");
    if cache.len() >= STRIP_CACHE_LIMIT {
        cache.clear();
    }
    cache.insert(key, Arc::new(bytes.clone()));
    Ok(png(bytes))
}

/// Cached detector output, computed and cached on first request.
async fn recording_candidates(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    if let Some(c) = s.read().cached_candidates(&id)? {
        return Ok(Json(c).into_response());
    }
    let mut store = s.write();
    if let Some(c) = store.cached_candidates(&id)? {
        return Ok(Json(c).into_response());
    }
    let clip = store.load_recording(&id)?;
    let candidates = detect_screened(&clip, &s.config, None)?;
    store.put_candidates(&id, &candidates)?;
    Ok(Json(candidates).into_response())
}

#[derive(Debug, Deserialize)]
struct AnnotationQuery {
    label: Option<String>,
    recording_id: Option<String>,
}

async fn list_annotations(State(s): State<Arc<AppState>>, Query(q): Query<AnnotationQuery>) -> ApiResult<Response> {
    let label = q.label.map(|l| l.parse::<CallLabel>()).transpose().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let store = s.read();
    let items = store.annotations(&AnnotationFilter { label, recording_id: q.recording_id });
    Ok(Json(items).into_response())
}

async fn create_annotation(State(s): State<Arc<AppState>>, body: Result<Json<NewAnnotation>, axum::extract::rejection::JsonRejection>) -> ApiResult<Response> {
    let Json(new) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let id = s.write().put_annotation(new)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

async fn get_annotation(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.read().annotation(&id)?.clone()).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelPatch {
    label: CallLabel,
    annotator: String,
}

async fn patch_annotation(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<LabelPatch>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let Json(patch) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    Ok(Json(s.write().update_label(&id, patch.label, &patch.annotator)?).into_response())
}

#[derive(Debug, Deserialize)]
struct SyntheticQuery {
    status: Option<ReviewStatus>,
}

fn synthetic_json(sc: &crate::synthgen::SyntheticCall) -> serde_json::Value {
    json!({
        "id": sc.id,
        "seed_annotation_id": sc.seed_annotation_id,
        "label": sc.label,
        "review_status": sc.review_status,
        "reviewer": sc.reviewer,
        "decided_at": sc.decided_at,
        "tile_url": format!("/synthetics/{}/tile", sc.id),
        "seed_tile_url": format!("/synthetics/{}/seed_tile", sc.id),
    })
}

async fn list_synthetics(State(s): State<Arc<AppState>>, Query(q): Query<SyntheticQuery>) -> Json<serde_json::Value> {
    let store = s.read();
    Json(json!(store.synthetics(q.status).into_iter().map(synthetic_json).collect::<Vec<_>>()))
}

async fn get_synthetic(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(synthetic_json(s.read().synthetic(&id)?)))
}

async fn synthetic_tile(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(s.read().synthetic_png(&id)?))
}

async fn synthetic_seed_tile(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = s.read();
    let seed = store.synthetic(&id)?.seed_annotation_id.clone();
    let tile = store.natural_tile(&seed, &s.config.spectrogram, &s.config.tile)?;
    Ok(png(tile.to_png()?))
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    verdict: Verdict,
    reviewer: String,
}

async fn decide_synthetic(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(d) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let (sc, changed) = s.write().decide(&id, d.verdict, &d.reviewer)?;
    let mut v = synthetic_json(&sc);
    v["changed"] = json!(changed);
    Ok(Json(v))
}

async fn list_manifests(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let store = s.read();
    let rows: Vec<_> = store
        .manifests()
        .map(|m| {
            json!({
                "version": m.version,
                "parent_version": m.parent_version,
                "train": m.splits.train.len(),
                "val": m.splits.val.len(),
                "counts_per_category": m.counts_per_category,
                "created_at": m.created_at,
            })
        })
        .collect();
    Json(json!(rows))
}

async fn get_manifest(State(s): State<Arc<AppState>>, Path(version): Path<u64>) -> ApiResult<Response> {
    Ok(Json(s.read().manifest(version)?.clone()).into_response())
}

#[derive(Debug, Deserialize)]
struct ManifestRequest {
    #[serde(default)]
    parent_version: Option<u64>,
    #[serde(default = "default_val_fraction")]
    val_fraction: f64,
    #[serde(default)]
    seed: u64,
}

fn default_val_fraction() -> f64 {
    0.2
}

async fn create_manifest(
    State(s): State<Arc<AppState>>,
    body: Result<Json<ManifestRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let Json(r) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let m = s.write().build_split(r.parent_version, r.val_fraction, r.seed)?;
    Ok((StatusCode::CREATED, Json(m)).into_response())
}

fn accepted(id: String) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response()
}

async fn submit_train(State(s): State<Arc<AppState>>, body: Result<Json<TrainRequest>, axum::extract::rejection::JsonRejection>) -> ApiResult<Response> {
    let Json(r) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    s.read().manifest(r.manifest_version)?;
    if let Some(c) = &r.config {
        c.validate().map_err(|e: ClassifierError| ApiError::bad_request(e.to_string()))?;
    }
    Ok(accepted(s.submit(Job::Train(r))))
}

async fn submit_detect(State(s): State<Arc<AppState>>, body: Option<Json<DetectRequest>>) -> ApiResult<Response> {
    let r = body.map(|Json(r)| r).unwrap_or_default();
    if let Some(ids) = &r.recording_ids {
        let store = s.read();
        for id in ids {
            store.recording(id)?;
        }
    }
    Ok(accepted(s.submit(Job::Detect(r))))
}

async fn submit_augment(State(s): State<Arc<AppState>>, body: Result<Json<AugmentRequest>, axum::extract::rejection::JsonRejection>) -> ApiResult<Response> {
    let Json(r) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    s.read().manifest(r.manifest_version)?;
    Ok(accepted(s.submit(Job::Augment(r))))
}

async fn submit_evaluate(State(s): State<Arc<AppState>>, body: Option<Json<EvaluateRequest>>) -> ApiResult<Response> {
    Ok(accepted(s.submit(Job::Evaluate(body.map(|Json(r)| r).unwrap_or_default()))))
}

async fn list_jobs(State(s): State<Arc<AppState>>) -> Json<Vec<JobStatus>> {
    Json(s.jobs.lock().expect("jobs lock").values().cloned().collect())
}

async fn get_job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    s.job(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

async fn get_run(State(s): State<Arc<AppState>>, Path(run_id): Path<String>) -> ApiResult<Json<EvaluationReport>> {
    Ok(Json(s.read().load_run(&run_id)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_states_only_move_forward() {
        let mut s = JobStatus { job_id: "j".into(), kind: JobKind::Train, state: JobState::Queued, progress: 0.0, result: None, error: None, history: None };
        s.advance(JobState::Running);
        s.advance(JobState::Queued);
        assert_eq!(s.state, JobState::Running);
        s.advance(JobState::Failed);
        s.advance(JobState::Done);
        assert_eq!(s.state, JobState::Failed);
    }
}
