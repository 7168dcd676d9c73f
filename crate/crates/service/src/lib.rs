//! Review and metrics API over one verdict set.
//!
//! Verdicts are read-only here. Expert annotations go to an append-only log
//! and override corpus labels when metrics are recomputed.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use manipscan_core::annotation::{
    review_status, verdict_digest, Annotation, AnnotationError, AnnotationStore, HumanDecision, ReviewStatus,
};
use manipscan_core::corpus::{load_corpus, Corpus, CorpusError, CorpusName, EmailId};
use manipscan_core::llm::Decision;
use manipscan_core::metrics::{evaluate, weighted_accuracy, GroundTruth, MetricsError, MetricsRow, RefusalScoring};
use manipscan_core::runner::{self, Clock, RunError, SystemClock, VerdictSet};
use manipscan_core::taxonomy::{TaxonomyError, TechniqueId, TechniqueRegistry};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::CorsLayer;

/// Environment variable holding the shared bearer token.
pub const TOKEN_ENV: &str = "MANIPSCAN_TOKEN";

pub const DEFAULT_PAGE_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown corpus `{0}`")]
    UnknownCorpus(String),
    #[error("unknown email `{0}`")]
    UnknownEmail(String),
    #[error("unknown technique `{0}`")]
    UnknownTechnique(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("no verdicts for email `{0}`")]
    MissingVerdicts(String),
    #[error("{0}")]
    Validation(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownCorpus(_) | ApiError::UnknownEmail(_) | ApiError::UnknownTechnique(_) | ApiError::UnknownModel(_) => {
                StatusCode::NOT_FOUND
            }
            ApiError::MissingVerdicts(_) | ApiError::Metrics(_) => StatusCode::CONFLICT,
            ApiError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownCorpus(_) => "unknown_corpus",
            ApiError::UnknownEmail(_) => "unknown_email",
            ApiError::UnknownTechnique(_) => "unknown_technique",
            ApiError::UnknownModel(_) => "unknown_model",
            ApiError::MissingVerdicts(_) | ApiError::Metrics(MetricsError::MissingVerdicts { .. }) => "missing_verdicts",
            ApiError::Metrics(_) => "metrics",
            ApiError::Validation(_) => "validation",
            ApiError::Unauthorized => "unauthorized",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": self.code(), "message": self.to_string()});
        (self.status(), Json(body)).into_response()
    }
}

pub struct AppState {
    registry: TechniqueRegistry,
    corpora: BTreeMap<String, Corpus>,
    /// Corpus the verdicts were produced on.
    test_corpus: String,
    verdicts: VerdictSet,
    techniques: Vec<TechniqueId>,
    annotations: Mutex<AnnotationStore>,
    recompute: Mutex<()>,
    token: Option<String>,
    clock: Arc<dyn Clock>,
}

impl AppState {
    /// `test` must be the corpus the verdicts refer to.
    pub fn new(registry: TechniqueRegistry, test: Corpus, verdicts: VerdictSet, annotations: AnnotationStore) -> Self {
        let present: std::collections::BTreeSet<&TechniqueId> = verdicts.iter().map(|v| &v.technique).collect();
        let techniques = registry.ids().into_iter().filter(|t| present.contains(t)).collect();
        let mut corpora = BTreeMap::new();
        corpora.insert(CorpusName::Test.as_str().to_owned(), test);
        AppState {
            registry,
            corpora,
            test_corpus: CorpusName::Test.as_str().to_owned(),
            verdicts,
            techniques,
            annotations: Mutex::new(annotations),
            recompute: Mutex::new(()),
            token: None,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Makes another corpus browsable through `/emails`.
    pub fn with_corpus(mut self, corpus: Corpus) -> Self {
        self.corpora.insert(corpus.name.as_str().to_owned(), corpus);
        self
    }

    fn test(&self) -> &Corpus {
        &self.corpora[&self.test_corpus]
    }

    /// Corpus labels overridden by live annotations.
    pub fn ground_truth(&self) -> GroundTruth {
        let mut truth = GroundTruth::from_corpus(self.test());
        self.annotations.lock().unwrap().apply(&mut truth);
        truth
    }

    fn model_ids(&self) -> Vec<String> {
        self.verdicts.model_ids()
    }

    fn resolve_model(&self, requested: Option<&str>) -> Result<String, ApiError> {
        let ids = self.model_ids();
        match requested {
            Some(m) if ids.iter().any(|i| i == m) => Ok(m.to_owned()),
            Some(m) => Err(ApiError::UnknownModel(m.to_owned())),
            None => ids
                .into_iter()
                .next()
                .ok_or_else(|| ApiError::Validation("no verdicts loaded".into())),
        }
    }
}

pub struct ServiceConfig {
    pub taxonomy: Option<PathBuf>,
    pub corpus: PathBuf,
    /// Defaults to `labels.jsonl` inside the corpus directory when present.
    pub labels: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub verdicts: PathBuf,
    pub annotations: PathBuf,
    pub token: Option<String>,
}

fn default_labels(dir: &std::path::Path, explicit: Option<PathBuf>) -> Option<PathBuf> {
    explicit.or_else(|| Some(dir.join("labels.jsonl")).filter(|p| p.exists()))
}

pub fn load_state(config: ServiceConfig) -> Result<AppState, LoadError> {
    let registry = match &config.taxonomy {
        Some(p) => manipscan_core::taxonomy::load_taxonomy(p)?,
        None => TechniqueRegistry::builtin(),
    };
    let labels = default_labels(&config.corpus, config.labels);
    let test = load_corpus(&config.corpus, labels.as_deref(), &registry, CorpusName::Test)?;
    let (verdicts, report) = runner::load(&config.verdicts)?;
    if report.skipped > 0 {
        tracing::warn!(skipped = report.skipped, "corrupt verdict records skipped");
    }
    let (annotations, _) = AnnotationStore::open(&config.annotations)?;
    let train = match &config.train {
        Some(dir) => {
            let labels = default_labels(dir, None);
            Some(load_corpus(dir, labels.as_deref(), &registry, CorpusName::Train)?)
        }
        None => None,
    };
    let mut state = AppState::new(registry, test, verdicts, annotations).with_token(config.token);
    if let Some(train) = train {
        state = state.with_corpus(train);
    }
    Ok(state)
}

async fn require_token(State(state): State<Arc<AppState>>, headers: HeaderMap, request: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(expected.as_str()) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(request).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/emails", get(list_emails))
        .route("/emails/{id}/review", get(review_email))
        .route("/annotations", post(post_annotation).get(list_annotations))
        .route("/metrics", get(get_metrics))
        .route("/progress", get(get_progress))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .merge(api)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(Arc::new(state))).await
}

#[derive(Debug, Deserialize)]
pub struct EmailsQuery {
    corpus: Option<String>,
    #[serde(default)]
    page: usize,
    per_page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EmailSummary {
    pub id: EmailId,
    pub subject: String,
    pub label_count: usize,
    pub labels: Vec<TechniqueId>,
    pub attachments: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EmailPage {
    pub corpus: String,
    pub total: usize,
    pub page: usize,
    pub per_page: usize,
    pub items: Vec<EmailSummary>,
}

async fn list_emails(State(state): State<Arc<AppState>>, Query(q): Query<EmailsQuery>) -> Result<Json<EmailPage>, ApiError> {
    let name = q.corpus.unwrap_or_else(|| state.test_corpus.clone());
    let corpus = state.corpora.get(&name).ok_or_else(|| ApiError::UnknownCorpus(name.clone()))?;
    let per_page = q.per_page.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, 1000);
    let items = corpus
        .items()
        .iter()
        .skip(q.page.saturating_mul(per_page))
        .take(per_page)
        .map(|item| EmailSummary {
            id: item.email.id.clone(),
            subject: item.email.subject.clone(),
            label_count: item.labels.len(),
            labels: item.labels.iter().cloned().collect(),
            attachments: item.email.attachments.len(),
        })
        .collect();
    Ok(Json(EmailPage {
        corpus: name,
        total: corpus.len(),
        page: q.page,
        per_page,
        items,
    }))
}

#[derive(Debug, Deserialize)]
pub struct ModelQuery {
    model: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EmailBody {
    pub id: EmailId,
    pub subject: String,
    pub body: String,
    pub attachments: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueueItem {
    pub email: EmailId,
    pub technique: TechniqueId,
    pub name: String,
    pub definition: String,
    pub machine_decision: Decision,
    pub raw_response: String,
    pub basis: String,
    pub status: ReviewStatus,
    pub human_decision: Option<HumanDecision>,
    pub corpus_label: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Review {
    pub model: String,
    pub email: EmailBody,
    pub items: Vec<QueueItem>,
}

async fn review_email(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ModelQuery>,
) -> Result<Json<Review>, ApiError> {
    let email_id = EmailId::new(id.clone());
    let item = state.test().get(&email_id).ok_or(ApiError::UnknownEmail(id.clone()))?;
    let model = state.resolve_model(q.model.as_deref())?;
    let store = state.annotations.lock().unwrap();
    let mut items = Vec::new();
    for t in &state.techniques {
        let Some(v) = state.verdicts.get(&email_id, t, &model) else { continue };
        let technique = state.registry.get(t.as_str()).map_err(|e| ApiError::Internal(e.to_string()))?;
        let live = store.live(&email_id, t);
        items.push(QueueItem {
            email: email_id.clone(),
            technique: t.clone(),
            name: technique.name.clone(),
            definition: technique.definition.clone(),
            machine_decision: v.decision,
            raw_response: v.raw_response.clone(),
            basis: verdict_digest(v),
            status: review_status(v.decision, live),
            human_decision: live.map(|a| a.human_decision),
            corpus_label: item.has(t),
        });
    }
    if items.is_empty() {
        return Err(ApiError::MissingVerdicts(id));
    }
    Ok(Json(Review {
        model,
        email: EmailBody {
            id: email_id.clone(),
            subject: item.email.subject.clone(),
            body: item.email.body.clone(),
            attachments: item.email.attachments.clone(),
        },
        items,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub email: EmailId,
    pub technique: TechniqueId,
    pub human_decision: HumanDecision,
    pub reviewer: String,
    /// Model whose verdict is being reviewed; defaults to the first one.
    #[serde(default)]
    pub model: Option<String>,
}

async fn post_annotation(
    State(state): State<Arc<AppState>>,
    body: Result<Json<AnnotationRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<Annotation>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::Validation(e.body_text()))?;
    if state.test().get(&req.email).is_none() {
        return Err(ApiError::UnknownEmail(req.email.to_string()));
    }
    if !state.registry.contains(&req.technique) {
        return Err(ApiError::UnknownTechnique(req.technique.to_string()));
    }
    if req.reviewer.trim().is_empty() {
        return Err(ApiError::Validation("reviewer must not be empty".into()));
    }
    let model = state.resolve_model(req.model.as_deref()).ok();
    let basis = model
        .as_deref()
        .and_then(|m| state.verdicts.get(&req.email, &req.technique, m))
        .map(verdict_digest);
    let annotation = Annotation {
        email: req.email,
        technique: req.technique,
        human_decision: req.human_decision,
        reviewer: req.reviewer.trim().to_owned(),
        basis,
        timestamp: state.clock.now(),
    };
    let (stored, fresh) = state
        .annotations
        .lock()
        .unwrap()
        .record(annotation)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let status = if fresh { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(stored)))
}

#[derive(Debug, Deserialize)]
pub struct HistoryQuery {
    #[serde(default)]
    history: bool,
}

async fn list_annotations(State(state): State<Arc<AppState>>, Query(q): Query<HistoryQuery>) -> Json<Vec<Annotation>> {
    let store = state.annotations.lock().unwrap();
    if q.history {
        Json(store.history().to_vec())
    } else {
        Json(store.live_annotations().cloned().collect())
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsResponse {
    pub model: String,
    pub plan_digest: Option<String>,
    /// False until at least one expert annotation exists.
    pub verified: bool,
    pub annotations: usize,
    pub scoring: RefusalScoring,
    pub weighted_accuracy: Option<f64>,
    pub rows: Vec<MetricsRow>,
}

async fn get_metrics(State(state): State<Arc<AppState>>, Query(q): Query<ModelQuery>) -> Result<Json<MetricsResponse>, ApiError> {
    let model = state.resolve_model(q.model.as_deref())?;
    let _guard = state.recompute.lock().unwrap();
    let annotations = state.annotations.lock().unwrap().live_count();
    let truth = state.ground_truth();
    let scoring = RefusalScoring::default();
    let rows = evaluate(&state.verdicts, &truth, &state.techniques, &model, scoring)?;
    let weighted_accuracy = weighted_accuracy(&rows, manipscan_core::metrics::DEFAULT_MIN_SUPPORT).ok();
    Ok(Json(MetricsResponse {
        model,
        plan_digest: state.verdicts.plan_digest.clone(),
        verified: annotations > 0,
        annotations,
        scoring,
        weighted_accuracy,
        rows,
    }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Progress {
    pub model: String,
    pub total: usize,
    pub reviewed: usize,
    pub pending: usize,
    pub confirmed: usize,
    pub overridden: usize,
}

async fn get_progress(State(state): State<Arc<AppState>>, Query(q): Query<ModelQuery>) -> Result<Json<Progress>, ApiError> {
    let model = state.resolve_model(q.model.as_deref())?;
    let store = state.annotations.lock().unwrap();
    let mut p = Progress {
        model: model.clone(),
        total: 0,
        reviewed: 0,
        pending: 0,
        confirmed: 0,
        overridden: 0,
    };
    for v in state.verdicts.iter().filter(|v| v.model_id == model) {
        p.total += 1;
        match review_status(v.decision, store.live(&v.email, &v.technique)) {
            ReviewStatus::Pending => p.pending += 1,
            ReviewStatus::Confirmed => p.confirmed += 1,
            ReviewStatus::Overridden => p.overridden += 1,
        }
    }
    p.reviewed = p.confirmed + p.overridden;
    Ok(Json(p))
}
