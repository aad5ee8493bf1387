//! Live consultation sessions behind a small JSON API.
//!
//! [`Service`] owns the sessions and is transport-agnostic: the HTTP router
//! and the terminal `consult` loop both drive it with the same request
//! types. Every successful transition is appended to an optional JSON-lines
//! journal; [`Service::replay`] re-executes a journal and reproduces the
//! same session states.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dxgraph::kg::EntityId;
use dxgraph::record::{Demographics, OsceRecord};
use dxgraph::session::{
    PatientProfile, PendingQuestion, QuestionKind, ScriptedMeasurement, ScriptedPatient, SessionError, TurnLog,
};
use dxgraph::{CaseFile, DiagnosisEngine, Polarity, QuestionPolicy, Session, SessionConfig, TerminationReason};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApiError {
    #[error("no knowledge graph is loaded")]
    KgNotLoaded,
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::KgNotLoaded => "kg-not-loaded",
            ApiError::NotFound(_) => "not-found",
            ApiError::Conflict(_) => "conflict",
            ApiError::Validation(_) => "validation",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::KgNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Terminated => ApiError::Conflict("session already terminated".into()),
            SessionError::Config(m) => ApiError::Validation(m),
            SessionError::Align(e) => ApiError::Validation(e.to_string()),
            SessionError::Record(e) => ApiError::Validation(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": {"code": self.code(), "message": self.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Answered by the case's scripted patient; runs to completion at once.
    Scripted,
    /// Answered through [`Service::answer`].
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRequest {
    #[serde(default)]
    pub age: String,
    #[serde(default)]
    pub gender: String,
    #[serde(alias = "chief_complaint")]
    pub chief: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_symptom: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_ref: Option<String>,
    /// Defaults to scripted for case references and interactive for
    /// profiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<QuestionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolarityChoice {
    Present,
    Absent,
    Unknown,
}

impl PolarityChoice {
    pub fn polarity(self) -> Option<Polarity> {
        match self {
            PolarityChoice::Present => Some(Polarity::Present),
            PolarityChoice::Absent => Some(Polarity::Absent),
            PolarityChoice::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum AnswerRequest {
    Polarity { polarity: PolarityChoice },
    Exam { exam: String },
}

impl AnswerRequest {
    pub fn parse(body: &[u8]) -> Result<Self, ApiError> {
        serde_json::from_slice(body).map_err(|_| {
            ApiError::Validation(
                "expected {\"polarity\": \"present\"|\"absent\"|\"unknown\"} or {\"exam\": \"<name>\"}".into(),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingAnswer,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub symptom: EntityId,
    pub name: String,
    pub ig: f64,
    pub kind: QuestionKind,
}

impl From<&PendingQuestion> for QuestionView {
    fn from(q: &PendingQuestion) -> Self {
        Self {
            symptom: q.symptom.clone(),
            name: q.name.clone(),
            ig: q.ig,
            kind: q.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialEntry {
    pub disease: EntityId,
    pub name: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub symptom: EntityId,
    pub name: String,
    pub ig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanView {
    pub ranked: Vec<PlanEntry>,
    pub chosen: Option<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeView {
    pub final_diagnosis: EntityId,
    pub final_name: String,
    pub reason: TerminationReason,
}

/// Everything a client needs to render a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub created_at_ms: u64,
    pub status: Status,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case_ref: Option<String>,
    pub question: Option<QuestionView>,
    pub differential: Vec<DifferentialEntry>,
    pub record: OsceRecord,
    pub plan: PlanView,
    pub rounds: u32,
    pub t_max: u32,
    pub degraded_start: bool,
    pub outcome: Option<OutcomeView>,
    pub trace: Vec<TurnLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub kg_loaded: bool,
    pub diseases: usize,
    pub symptoms: usize,
    pub edges: usize,
    pub cases: usize,
    pub sessions: usize,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalEntry {
    Create {
        id: String,
        created_at_ms: u64,
        request: CreateRequest,
    },
    Answer {
        id: String,
        request: AnswerRequest,
    },
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("journal line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("journal line {line}: {source}")]
    Apply { line: usize, source: ApiError },
    #[error("cannot read journal: {0}")]
    Io(#[from] std::io::Error),
}

struct Entry {
    session: Session,
    created_at_ms: u64,
    mode: Mode,
    case_ref: Option<String>,
    lab: ScriptedMeasurement,
}

pub struct Service {
    engine: Option<Arc<DiagnosisEngine>>,
    cases: IndexMap<String, CaseFile>,
    defaults: SessionConfig,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Entry>>>>,
    counter: AtomicU64,
    journal: Option<Mutex<File>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn case_key(index: usize, case: &CaseFile) -> String {
    case.id.clone().unwrap_or_else(|| format!("case-{index}"))
}

impl Service {
    /// `cases` become addressable by id, or `case-<index>` when they have
    /// none. The engine's alignment settings override `defaults.align`.
    pub fn new(engine: Option<Arc<DiagnosisEngine>>, cases: Vec<CaseFile>, defaults: SessionConfig) -> Self {
        let defaults = match &engine {
            Some(e) => SessionConfig {
                align: *e.aligner().config(),
                ..defaults
            },
            None => defaults,
        };
        Self {
            engine,
            cases: cases.into_iter().enumerate().map(|(i, c)| (case_key(i, &c), c)).collect(),
            defaults,
            sessions: RwLock::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
            journal: None,
        }
    }

    /// Replay `path` if it exists, then append every new transition to it.
    pub fn with_journal(mut self, path: &Path) -> Result<Self, ReplayError> {
        if path.exists() {
            let n = self.replay(std::io::BufReader::new(File::open(path)?))?;
            log::info!("replayed {n} journal entries from {}", path.display());
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.journal = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn case_refs(&self) -> impl Iterator<Item = &str> {
        self.cases.keys().map(String::as_str)
    }

    fn engine(&self) -> Result<&Arc<DiagnosisEngine>, ApiError> {
        self.engine.as_ref().ok_or(ApiError::KgNotLoaded)
    }

    fn write_journal(&self, entry: &JournalEntry) -> Result<(), ApiError> {
        let Some(journal) = &self.journal else {
            return Ok(());
        };
        let mut line = serde_json::to_string(entry).map_err(|e| ApiError::Internal(e.to_string()))?;
        line.push('\n');
        let mut f = journal.lock().map_err(|_| ApiError::Internal("journal lock poisoned".into()))?;
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| ApiError::Internal(format!("journal write failed: {e}")))
    }

    pub fn health(&self) -> Health {
        let kg = self.engine.as_ref().map(|e| e.kg());
        Health {
            status: "ok".into(),
            kg_loaded: kg.is_some(),
            diseases: kg.map_or(0, |k| k.disease_count()),
            symptoms: kg.map_or(0, |k| k.count_kind(dxgraph::EntityKind::Symptom)),
            edges: kg.map_or(0, |k| k.edge_count()),
            cases: self.cases.len(),
            sessions: self.sessions.read().map(|s| s.len()).unwrap_or(0),
        }
    }

    pub fn create(&self, request: CreateRequest) -> Result<SessionHandle, ApiError> {
        self.engine()?;
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        self.create_as(format!("s{n:06}"), now_ms(), request, true)
    }

    fn create_as(
        &self,
        id: String,
        created_at_ms: u64,
        request: CreateRequest,
        journal: bool,
    ) -> Result<SessionHandle, ApiError> {
        let engine = self.engine()?.clone();
        let cfg = SessionConfig {
            policy: request.policy.unwrap_or(self.defaults.policy),
            seed: request.seed.unwrap_or(self.defaults.seed),
            ..self.defaults
        };
        let (profile, case, mode) = match (&request.profile, &request.case_ref) {
            (Some(_), Some(_)) => return Err(ApiError::Validation("give either profile or case_ref, not both".into())),
            (None, None) => return Err(ApiError::Validation("profile or case_ref is required".into())),
            (Some(p), None) => {
                if p.chief.trim().is_empty() {
                    return Err(ApiError::Validation("profile.chief must be non-empty".into()));
                }
                let mode = request.mode.unwrap_or(Mode::Interactive);
                if mode == Mode::Scripted {
                    return Err(ApiError::Validation("scripted sessions need a case_ref".into()));
                }
                let profile = PatientProfile {
                    demographics: Demographics {
                        age: p.age.trim().to_owned(),
                        gender: p.gender.trim().to_owned(),
                    },
                    chief_complaint: p.chief.clone(),
                    primary_symptom: p.primary_symptom.clone(),
                };
                (profile, None, mode)
            }
            (None, Some(r)) => {
                let case = self
                    .cases
                    .get(r)
                    .ok_or_else(|| ApiError::NotFound(format!("unknown case_ref {r:?}")))?;
                (PatientProfile::from_case(case), Some(case), request.mode.unwrap_or(Mode::Scripted))
            }
        };
        let lab = match case {
            Some(c) => ScriptedMeasurement::from_case(c, &cfg.align),
            None => ScriptedMeasurement::new(&IndexMap::new(), cfg.align.max_edit_distance),
        };
        let mut session = Session::start(engine.clone(), &profile, cfg)?;
        if let (Mode::Scripted, Some(c)) = (mode, case) {
            let patient = ScriptedPatient::from_case(c, &engine).map_err(|e| ApiError::Validation(e.to_string()))?;
            session.run_to_completion(&patient)?;
        }
        let entry = Entry {
            session,
            created_at_ms,
            mode,
            case_ref: request.case_ref.clone(),
            lab,
        };
        let handle = snapshot(&id, &entry);
        if journal {
            self.write_journal(&JournalEntry::Create {
                id: id.clone(),
                created_at_ms,
                request,
            })?;
        }
        self.sessions
            .write()
            .map_err(|_| ApiError::Internal("session table lock poisoned".into()))?
            .insert(id, Arc::new(Mutex::new(entry)));
        Ok(handle)
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        self.sessions
            .read()
            .map_err(|_| ApiError::Internal("session table lock poisoned".into()))?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }

    pub fn snapshot(&self, id: &str) -> Result<SessionHandle, ApiError> {
        let entry = self.entry(id)?;
        let e = entry.lock().map_err(|_| ApiError::Internal("session lock poisoned".into()))?;
        Ok(snapshot(id, &e))
    }

    pub fn plan(&self, id: &str) -> Result<PlanView, ApiError> {
        Ok(self.snapshot(id)?.plan)
    }

    pub fn answer(&self, id: &str, request: AnswerRequest) -> Result<SessionHandle, ApiError> {
        self.answer_inner(id, request, true)
    }

    fn answer_inner(&self, id: &str, request: AnswerRequest, journal: bool) -> Result<SessionHandle, ApiError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock().map_err(|_| ApiError::Internal("session lock poisoned".into()))?;
        if e.session.is_terminated() {
            return Err(ApiError::Conflict(format!("session {id} already terminated")));
        }
        if e.mode == Mode::Scripted {
            return Err(ApiError::Conflict(format!("session {id} is scripted")));
        }
        match &request {
            AnswerRequest::Polarity { polarity } => {
                e.session.answer_current(polarity.polarity())?;
            }
            AnswerRequest::Exam { exam } => {
                if exam.trim().is_empty() {
                    return Err(ApiError::Validation("exam name must be non-empty".into()));
                }
                let Entry { session, lab, .. } = &mut *e;
                session.request_exam(exam, lab)?;
            }
        }
        // Written while the session lock is held, so per-session order in
        // the journal matches the order of transitions.
        if journal {
            self.write_journal(&JournalEntry::Answer {
                id: id.to_owned(),
                request,
            })?;
        }
        Ok(snapshot(id, &e))
    }

    /// Re-execute journal lines. Returns the number of entries applied.
    pub fn replay(&self, journal: impl BufRead) -> Result<usize, ReplayError> {
        let mut applied = 0;
        for (i, line) in journal.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let n = i + 1;
            let entry: JournalEntry = serde_json::from_str(&line).map_err(|e| ReplayError::Parse {
                line: n,
                message: e.to_string(),
            })?;
            let result = match entry {
                JournalEntry::Create {
                    id,
                    created_at_ms,
                    request,
                } => {
                    if let Some(k) = id.strip_prefix('s').and_then(|k| k.parse::<u64>().ok()) {
                        self.counter.fetch_max(k, Ordering::SeqCst);
                    }
                    self.create_as(id, created_at_ms, request, false).map(|_| ())
                }
                JournalEntry::Answer { id, request } => self.answer_inner(&id, request, false).map(|_| ()),
            };
            result.map_err(|source| ReplayError::Apply { line: n, source })?;
            applied += 1;
        }
        Ok(applied)
    }
}

fn snapshot(id: &str, e: &Entry) -> SessionHandle {
    let s = &e.session;
    let kg = s.engine().kg();
    let name = |x: &EntityId| kg.name_of(x).unwrap_or(x.as_str()).to_owned();
    let plan = s.plan();
    SessionHandle {
        id: id.to_owned(),
        created_at_ms: e.created_at_ms,
        status: if s.is_terminated() {
            Status::Terminated
        } else {
            Status::AwaitingAnswer
        },
        mode: e.mode,
        case_ref: e.case_ref.clone(),
        question: s.current_question().map(QuestionView::from),
        differential: s
            .differential()
            .entries()
            .iter()
            .map(|c| DifferentialEntry {
                disease: c.disease.clone(),
                name: name(&c.disease),
                probability: c.probability,
            })
            .collect(),
        record: s.record().clone(),
        plan: PlanView {
            ranked: plan
                .ranked
                .iter()
                .map(|r| PlanEntry {
                    symptom: r.symptom.clone(),
                    name: name(&r.symptom),
                    ig: r.ig,
                })
                .collect(),
            chosen: plan.chosen.clone(),
        },
        rounds: s.rounds(),
        t_max: s.config().t_max,
        degraded_start: s.degraded_start(),
        outcome: s.outcome().map(|o| OutcomeView {
            final_diagnosis: o.final_diagnosis,
            final_name: o.final_name,
            reason: o.reason,
        }),
        trace: s.trace().to_vec(),
    }
}

// ---- HTTP layer

async fn healthz(State(svc): State<Arc<Service>>) -> Json<Health> {
    Json(svc.health())
}

async fn create_session(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, ApiError> {
    let request: CreateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::Validation(format!("invalid create request: {e}")))?;
    let handle = svc.create(request)?;
    Ok((StatusCode::CREATED, Json(handle)).into_response())
}

async fn get_session(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionHandle>, ApiError> {
    svc.snapshot(&id).map(Json)
}

async fn get_plan(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<PlanView>, ApiError> {
    svc.plan(&id).map(Json)
}

async fn answer_session(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionHandle>, ApiError> {
    // Unknown ids are reported before body validation.
    svc.entry(&id)?;
    let request = AnswerRequest::parse(&body)?;
    svc.answer(&id, request).map(Json)
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/answer", post(answer_session))
        .route("/v1/sessions/{id}/plan", get(get_plan))
        .with_state(svc)
}
