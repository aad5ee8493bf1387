//! Per-consultation controller.
//!
//! A [`Session`] keeps the accumulated evidence and the OSCE record, and
//! recomputes the differential and inquiry plan from scratch after every
//! answer: propose candidates, build the subgraph, initialize the prior,
//! condition on all evidence, rank questions. The same transitions serve
//! scripted runs ([`Session::step`] with a [`PatientOracle`]) and
//! human-driven consultations ([`Session::answer_current`]).

use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{
    extract_mentions, normalize_term, levenshtein, AlignConfig, AlignError, Aligner,
    CachedProvider, EmbeddingProvider,
};
use crate::bench::CaseFile;
use crate::inference::{
    self, eligible_symptoms, DifferentialSet, EvidenceState, InferenceConfig, InferenceError,
    InquiryPlan, ScoredSymptom,
};
use crate::kg::{DiagnosticSubgraph, EntityId, EntityKind, KgEntity, KnowledgeGraph};
use crate::record::{Demographics, OsceRecord, Polarity, PolarityRevision, RecordError, RecordUpdate};

/// Reply of the measurement oracle when the requested exam is not on file.
pub const NORMAL_READINGS: &str = "NORMAL READINGS";

/// Knowledge graph plus the alignment index and embedding provider built
/// over it. Shared read-only by any number of sessions.
pub struct DiagnosisEngine {
    kg: Arc<KnowledgeGraph>,
    provider: Option<Arc<dyn EmbeddingProvider>>,
    aligner: Aligner,
}

impl DiagnosisEngine {
    pub fn new(
        kg: Arc<KnowledgeGraph>,
        provider: Option<Arc<dyn EmbeddingProvider>>,
        align: AlignConfig,
    ) -> Result<Self, AlignError> {
        let provider =
            provider.map(|p| Arc::new(CachedProvider::new(p)) as Arc<dyn EmbeddingProvider>);
        let aligner = Aligner::new(&kg, provider.clone(), align)?;
        Ok(Self {
            kg,
            provider,
            aligner,
        })
    }

    pub fn kg(&self) -> &KnowledgeGraph {
        &self.kg
    }

    pub fn aligner(&self) -> &Aligner {
        &self.aligner
    }

    pub fn provider(&self) -> Option<&dyn EmbeddingProvider> {
        self.provider.as_deref()
    }

    /// Resolve a term to a symptom id, if any stage matches.
    pub fn align_symptom(&self, term: &str) -> Result<Option<EntityId>, AlignError> {
        Ok(self.aligner.align(term, EntityKind::Symptom)?.matched)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionPolicy {
    #[default]
    InfoGain,
    Random,
    DegreeBased,
}

impl QuestionPolicy {
    pub fn label(self) -> &'static str {
        match self {
            QuestionPolicy::InfoGain => "info-gain",
            QuestionPolicy::Random => "random",
            QuestionPolicy::DegreeBased => "degree-based",
        }
    }
}

impl std::str::FromStr for QuestionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "info-gain" | "infogain" | "ig" => Ok(QuestionPolicy::InfoGain),
            "random" => Ok(QuestionPolicy::Random),
            "degree-based" | "degree" => Ok(QuestionPolicy::DegreeBased),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub t_max: u32,
    pub stagnation_n: u32,
    pub inference: InferenceConfig,
    pub align: AlignConfig,
    pub seed: u64,
    pub policy: QuestionPolicy,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            t_max: 20,
            stagnation_n: 3,
            inference: InferenceConfig::default(),
            align: AlignConfig::default(),
            seed: 0,
            policy: QuestionPolicy::InfoGain,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.t_max == 0 {
            return Err(SessionError::Config("t_max must be at least 1".into()));
        }
        if self.stagnation_n == 0 {
            return Err(SessionError::Config("stagnation_n must be at least 1".into()));
        }
        self.inference.validate()?;
        self.align.validate()?;
        Ok(())
    }
}

/// Structured patient reply. Both lists empty means "unknown".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleAnswer {
    #[serde(default)]
    pub asserted: Vec<String>,
    #[serde(default)]
    pub denied: Vec<String>,
}

impl OracleAnswer {
    pub fn asserted(term: &str) -> Self {
        Self {
            asserted: vec![term.to_owned()],
            denied: Vec::new(),
        }
    }

    pub fn denied(term: &str) -> Self {
        Self {
            asserted: Vec::new(),
            denied: vec![term.to_owned()],
        }
    }

    pub fn unknown() -> Self {
        Self::default()
    }

    pub fn for_polarity(term: &str, polarity: Option<Polarity>) -> Self {
        match polarity {
            Some(Polarity::Present) => Self::asserted(term),
            Some(Polarity::Absent) => Self::denied(term),
            None => Self::unknown(),
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.asserted.is_empty() && self.denied.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("patient oracle was asked about non-symptom {0}")]
    NotASymptom(EntityId),
    #[error("oracle failure: {0}")]
    Failed(String),
}

pub trait PatientOracle {
    fn answer(&self, symptom: &KgEntity) -> Result<OracleAnswer, OracleError>;
}

pub trait MeasurementOracle {
    fn result(&self, exam: &str) -> String;
}

/// Patient simulated from a case file. Asserts exactly the case's symptoms
/// (after alignment) and denies everything else. Only ever speaks symptom
/// names.
#[derive(Debug, Clone)]
pub struct ScriptedPatient {
    present: Vec<EntityId>,
}

impl ScriptedPatient {
    pub fn from_case(case: &CaseFile, engine: &DiagnosisEngine) -> Result<Self, AlignError> {
        let mut present = Vec::new();
        for term in case.positive_terms() {
            if let Some(id) = engine.align_symptom(term)? {
                if !present.contains(&id) {
                    present.push(id);
                }
            }
        }
        Ok(Self { present })
    }

    pub fn from_symptoms(present: impl IntoIterator<Item = EntityId>) -> Self {
        Self {
            present: present.into_iter().collect(),
        }
    }

    pub fn symptoms(&self) -> &[EntityId] {
        &self.present
    }
}

impl PatientOracle for ScriptedPatient {
    fn answer(&self, symptom: &KgEntity) -> Result<OracleAnswer, OracleError> {
        if symptom.kind != EntityKind::Symptom {
            return Err(OracleError::NotASymptom(symptom.id.clone()));
        }
        Ok(if self.present.contains(&symptom.id) {
            OracleAnswer::asserted(&symptom.name)
        } else {
            OracleAnswer::denied(&symptom.name)
        })
    }
}

/// Measurement reader backed by a case's recorded test results.
#[derive(Debug, Clone, Default)]
pub struct ScriptedMeasurement {
    results: IndexMap<String, String>,
    max_edit_distance: usize,
}

impl ScriptedMeasurement {
    pub fn new(results: &IndexMap<String, String>, max_edit_distance: usize) -> Self {
        let mut normalized = IndexMap::new();
        for (k, v) in results {
            normalized.entry(normalize_term(k, false)).or_insert_with(|| v.clone());
        }
        Self {
            results: normalized,
            max_edit_distance,
        }
    }

    pub fn from_case(case: &CaseFile, cfg: &AlignConfig) -> Self {
        Self::new(&case.test_results, cfg.max_edit_distance)
    }
}

impl MeasurementOracle for ScriptedMeasurement {
    fn result(&self, exam: &str) -> String {
        let q = normalize_term(exam, false);
        if q.is_empty() {
            return NORMAL_READINGS.to_owned();
        }
        if let Some(r) = self.results.get(&q) {
            return r.clone();
        }
        // Short names like "CBC" and "MRI" are a full rewrite apart, so the
        // tolerance shrinks with length: one edit per four characters.
        let qlen = q.chars().count();
        let best = self
            .results
            .iter()
            .map(|(k, v)| {
                let limit = self.max_edit_distance.min(qlen.min(k.chars().count()) / 4);
                (levenshtein(&q, k), limit, v)
            })
            .filter(|(d, limit, _)| d <= limit)
            .min_by_key(|(d, _, _)| *d)
            .map(|(d, _, v)| (d, v));
        match best {
            Some((_, v)) => v.clone(),
            None => NORMAL_READINGS.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Inquiry,
    Refutation,
}

/// The question the session will ask next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuestion {
    pub symptom: EntityId,
    pub name: String,
    pub ig: f64,
    pub kind: QuestionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Question {
    Symptom {
        id: EntityId,
        name: String,
        kind: QuestionKind,
    },
    Exam {
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLog {
    pub turn: u32,
    pub question: Question,
    pub answer: OracleAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exam_result: Option<String>,
    pub differential_after: DifferentialSet,
    pub ig_of_question: f64,
    pub record_revision: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    TurnLimit,
    StagnationNoRefuter,
    Exhausted,
}

/// Result of [`Session::check_termination`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCheck {
    TurnLimit,
    StagnationPending,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub final_diagnosis: EntityId,
    pub final_name: String,
    pub rounds: u32,
    pub reason: TerminationReason,
    pub degraded_start: bool,
    pub trace: Vec<TurnLog>,
}

impl SessionOutcome {
    /// Trace as JSON lines, one turn per line.
    pub fn trace_jsonl(&self) -> String {
        trace_jsonl(&self.trace)
    }
}

pub fn trace_jsonl(trace: &[TurnLog]) -> String {
    let mut out = String::new();
    for t in trace {
        out.push_str(&serde_json::to_string(t).expect("turn log serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("oracle failed after {} turns: {source}", trace.len())]
    Oracle {
        source: OracleError,
        trace: Vec<TurnLog>,
    },
    #[error("session already terminated")]
    Terminated,
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Patient profile at session start.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub demographics: Demographics,
    pub chief_complaint: String,
    /// Presenting symptom as free text; aligned to seed the evidence.
    /// Defaults to the chief complaint when absent.
    #[serde(default)]
    pub primary_symptom: Option<String>,
}

impl PatientProfile {
    pub fn from_case(case: &CaseFile) -> Self {
        Self {
            demographics: case.demographics.clone(),
            chief_complaint: case.symptoms.primary.clone(),
            primary_symptom: Some(case.symptoms.primary.clone()),
        }
    }
}

/// Differential, subgraph and plan derived from the current evidence.
#[derive(Debug, Clone)]
struct Snapshot {
    subgraph: DiagnosticSubgraph,
    differential: DifferentialSet,
    plan: InquiryPlan,
}

pub struct Session {
    engine: Arc<DiagnosisEngine>,
    cfg: SessionConfig,
    record: OsceRecord,
    evidence: EvidenceState,
    snapshot: Snapshot,
    trace: Vec<TurnLog>,
    audit: Vec<PolarityRevision>,
    pending: Option<PendingQuestion>,
    terminated: Option<TerminationReason>,
    degraded_start: bool,
    rng: ChaCha8Rng,
}

impl Session {
    pub fn start(
        engine: Arc<DiagnosisEngine>,
        profile: &PatientProfile,
        cfg: SessionConfig,
    ) -> Result<Self, SessionError> {
        cfg.validate()?;
        if &cfg.align != engine.aligner().config() {
            return Err(SessionError::Config(
                "session alignment config differs from the engine's".into(),
            ));
        }
        let mut record = OsceRecord::new(profile.demographics.clone(), &profile.chief_complaint)?;
        let mut evidence = EvidenceState::new();
        let primary = profile
            .primary_symptom
            .as_deref()
            .unwrap_or(&profile.chief_complaint);
        let mut degraded_start = true;
        if let Some(id) = engine.align_symptom(primary)? {
            let name = engine.kg().name_of(&id).unwrap_or(primary).to_owned();
            evidence.report(id, Polarity::Present);
            record = record
                .apply_update(&RecordUpdate {
                    turn: 0,
                    new_positives: vec![name],
                    ..Default::default()
                })?
                .0;
            degraded_start = false;
        } else {
            log::warn!("could not align presenting symptom {primary:?}; starting from a uniform prior");
        }
        let snapshot = compute_snapshot(&engine, &evidence, &cfg.inference)?;
        let mut session = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            engine,
            cfg,
            record,
            evidence,
            snapshot,
            trace: Vec::new(),
            audit: Vec::new(),
            pending: None,
            terminated: None,
            degraded_start,
        };
        session.advance()?;
        Ok(session)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn engine(&self) -> &Arc<DiagnosisEngine> {
        &self.engine
    }

    pub fn record(&self) -> &OsceRecord {
        &self.record
    }

    pub fn evidence(&self) -> &EvidenceState {
        &self.evidence
    }

    pub fn differential(&self) -> &DifferentialSet {
        &self.snapshot.differential
    }

    pub fn subgraph(&self) -> &DiagnosticSubgraph {
        &self.snapshot.subgraph
    }

    pub fn plan(&self) -> &InquiryPlan {
        &self.snapshot.plan
    }

    pub fn trace(&self) -> &[TurnLog] {
        &self.trace
    }

    pub fn audit(&self) -> &[PolarityRevision] {
        &self.audit
    }

    pub fn current_question(&self) -> Option<&PendingQuestion> {
        self.pending.as_ref()
    }

    pub fn termination(&self) -> Option<TerminationReason> {
        self.terminated
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated.is_some()
    }

    pub fn degraded_start(&self) -> bool {
        self.degraded_start
    }

    pub fn rounds(&self) -> u32 {
        self.trace.len() as u32
    }

    /// Current posterior argmax; ties go to the smaller id.
    pub fn leading_diagnosis(&self) -> &EntityId {
        self.snapshot.differential.leader()
    }

    pub fn outcome(&self) -> Option<SessionOutcome> {
        let reason = self.terminated?;
        let leader = self.leading_diagnosis().clone();
        Some(SessionOutcome {
            final_name: self.engine.kg().name_of(&leader).unwrap_or_default().to_owned(),
            final_diagnosis: leader,
            rounds: self.rounds(),
            reason,
            degraded_start: self.degraded_start,
            trace: self.trace.clone(),
        })
    }

    fn stagnated(&self) -> bool {
        let n = self.cfg.stagnation_n as usize;
        if self.trace.len() < n {
            return false;
        }
        let window = &self.trace[self.trace.len() - n..];
        let first: Vec<&EntityId> = window[0].differential_after.entries().iter().map(|c| &c.disease).collect();
        window[1..].iter().all(|t| {
            t.differential_after
                .entries()
                .iter()
                .map(|c| &c.disease)
                .eq(first.iter().copied())
        })
    }

    pub fn check_termination(&self) -> Option<TerminationCheck> {
        if self.rounds() >= self.cfg.t_max {
            return Some(TerminationCheck::TurnLimit);
        }
        if eligible_symptoms(&self.snapshot.subgraph, &self.evidence).next().is_none() {
            return Some(TerminationCheck::Exhausted);
        }
        if self.stagnated() {
            return Some(TerminationCheck::StagnationPending);
        }
        None
    }

    /// Unasked symptoms that could overturn the current leader, best IG first.
    pub fn refutation_candidates(&self) -> Vec<ScoredSymptom> {
        inference::refutation_candidates(
            &self.snapshot.subgraph,
            &self.snapshot.differential,
            &self.evidence,
            &self.cfg.inference,
        )
    }

    fn advance(&mut self) -> Result<(), SessionError> {
        self.pending = None;
        let (pool, kind) = match self.check_termination() {
            Some(TerminationCheck::TurnLimit) => return self.terminate(TerminationReason::TurnLimit),
            Some(TerminationCheck::Exhausted) => return self.terminate(TerminationReason::Exhausted),
            Some(TerminationCheck::StagnationPending) => {
                let refuters = self.refutation_candidates();
                if refuters.is_empty() {
                    return self.terminate(TerminationReason::StagnationNoRefuter);
                }
                (refuters, QuestionKind::Refutation)
            }
            None => (
                inference::score_eligible(
                    &self.snapshot.subgraph,
                    &self.snapshot.differential,
                    &self.evidence,
                    &self.cfg.inference,
                ),
                QuestionKind::Inquiry,
            ),
        };
        let picked = self.select(&pool, kind);
        let name = self.engine.kg().name_of(&picked.symptom).unwrap_or_default().to_owned();
        self.pending = Some(PendingQuestion {
            symptom: picked.symptom.clone(),
            name,
            ig: picked.ig,
            kind,
        });
        Ok(())
    }

    fn select(&mut self, pool: &[ScoredSymptom], kind: QuestionKind) -> ScoredSymptom {
        debug_assert!(!pool.is_empty());
        if kind == QuestionKind::Refutation {
            return pool[0].clone();
        }
        match self.cfg.policy {
            QuestionPolicy::InfoGain => self
                .snapshot
                .plan
                .chosen
                .as_ref()
                .and_then(|c| pool.iter().find(|s| &s.symptom == c))
                .unwrap_or(&pool[0])
                .clone(),
            QuestionPolicy::Random => {
                let mut by_id: Vec<&ScoredSymptom> = pool.iter().collect();
                by_id.sort_by(|a, b| a.symptom.cmp(&b.symptom));
                (*by_id.choose(&mut self.rng).expect("pool is non-empty")).clone()
            }
            QuestionPolicy::DegreeBased => {
                let kg = self.engine.kg();
                pool.iter()
                    .min_by(|a, b| {
                        kg.symptom_degree(&b.symptom)
                            .cmp(&kg.symptom_degree(&a.symptom))
                            .then_with(|| a.symptom.cmp(&b.symptom))
                    })
                    .expect("pool is non-empty")
                    .clone()
            }
        }
    }

    fn terminate(&mut self, reason: TerminationReason) -> Result<(), SessionError> {
        self.terminated = Some(reason);
        self.pending = None;
        Ok(())
    }

    fn ensure_open(&self) -> Result<&PendingQuestion, SessionError> {
        if self.terminated.is_some() {
            return Err(SessionError::Terminated);
        }
        Ok(self.pending.as_ref().expect("open session always has a question"))
    }

    /// Ask the pending question to a scripted patient and fold the reply.
    pub fn step(&mut self, patient: &dyn PatientOracle) -> Result<&TurnLog, SessionError> {
        let q = self.ensure_open()?.clone();
        let entity = self
            .engine
            .kg()
            .entity(&q.symptom)
            .expect("planned symptoms come from the graph")
            .clone();
        let answer = match patient.answer(&entity) {
            Ok(a) => a,
            Err(source) => {
                return Err(SessionError::Oracle {
                    source,
                    trace: self.trace.clone(),
                })
            }
        };
        self.fold_answer(q, answer)
    }

    /// Answer the pending question directly: present, absent, or unknown.
    pub fn answer_current(&mut self, polarity: Option<Polarity>) -> Result<&TurnLog, SessionError> {
        let q = self.ensure_open()?.clone();
        let answer = OracleAnswer::for_polarity(&q.name, polarity);
        self.fold_answer(q, answer)
    }

    /// Fold an arbitrary structured answer to the pending question.
    pub fn answer_with(&mut self, answer: OracleAnswer) -> Result<&TurnLog, SessionError> {
        let q = self.ensure_open()?.clone();
        self.fold_answer(q, answer)
    }

    fn fold_answer(&mut self, q: PendingQuestion, answer: OracleAnswer) -> Result<&TurnLog, SessionError> {
        let (positives, negatives) = extract_mentions(&answer)?;
        let turn = self.rounds() + 1;
        self.evidence.mark_asked(q.symptom.clone());

        let mut update = RecordUpdate {
            turn,
            ..Default::default()
        };
        for (terms, polarity) in [(&positives, Polarity::Present), (&negatives, Polarity::Absent)] {
            for term in terms {
                let label = match self.engine.align_symptom(term)? {
                    Some(id) => {
                        let name = self.engine.kg().name_of(&id).unwrap_or(term).to_owned();
                        self.evidence.record(id, polarity);
                        name
                    }
                    None => term.clone(),
                };
                match polarity {
                    Polarity::Present => update.new_positives.push(label),
                    Polarity::Absent => update.new_negatives.push(label),
                }
            }
        }
        let (record, revisions) = self.record.apply_update(&update)?;
        self.record = record;
        self.audit.extend(revisions);

        self.snapshot = compute_snapshot(&self.engine, &self.evidence, &self.cfg.inference)?;
        self.trace.push(TurnLog {
            turn,
            question: Question::Symptom {
                id: q.symptom,
                name: q.name,
                kind: q.kind,
            },
            answer,
            exam_result: None,
            differential_after: self.snapshot.differential.clone(),
            ig_of_question: q.ig,
            record_revision: self.record.revision,
        });
        self.advance()?;
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Order an examination. Consumes one turn of the question budget.
    pub fn request_exam(
        &mut self,
        exam: &str,
        oracle: &dyn MeasurementOracle,
    ) -> Result<&TurnLog, SessionError> {
        self.ensure_open()?;
        let turn = self.rounds() + 1;
        let result = oracle.result(exam);
        let name = exam.trim().to_owned();
        let (record, _) = self.record.apply_update(&RecordUpdate {
            turn,
            new_exams: vec![(name.clone(), result.clone())],
            ..Default::default()
        })?;
        self.record = record;
        self.trace.push(TurnLog {
            turn,
            question: Question::Exam { name },
            answer: OracleAnswer::unknown(),
            exam_result: Some(result),
            differential_after: self.snapshot.differential.clone(),
            ig_of_question: 0.0,
            record_revision: self.record.revision,
        });
        self.advance()?;
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Drive the session with a scripted patient until it terminates.
    pub fn run_to_completion(&mut self, patient: &dyn PatientOracle) -> Result<SessionOutcome, SessionError> {
        while !self.is_terminated() {
            self.step(patient)?;
        }
        Ok(self.outcome().expect("terminated"))
    }
}

fn compute_snapshot(
    engine: &DiagnosisEngine,
    evidence: &EvidenceState,
    cfg: &InferenceConfig,
) -> Result<Snapshot, SessionError> {
    let kg = engine.kg();
    let provider = engine.provider();
    let candidates = inference::propose_candidates(kg, evidence, provider, cfg)?;
    let subgraph = kg.build_subgraph(&candidates).map_err(InferenceError::from)?;
    let prior = inference::init_prior(kg, &candidates, evidence.positives(), provider, cfg)?;
    let differential = inference::posterior(&prior, &subgraph, evidence, cfg);
    let plan = inference::rank_inquiries(&subgraph, &differential, evidence, cfg);
    Ok(Snapshot {
        subgraph,
        differential,
        plan,
    })
}

/// Run a scripted consultation for one case.
pub fn run_session(
    case: &CaseFile,
    engine: &Arc<DiagnosisEngine>,
    cfg: SessionConfig,
) -> Result<SessionOutcome, SessionError> {
    let patient = ScriptedPatient::from_case(case, engine)?;
    let mut session = Session::start(engine.clone(), &PatientProfile::from_case(case), cfg)?;
    session.run_to_completion(&patient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::CaseSymptoms;
    use crate::kg::{Edge, Relation};

    fn id(s: &str) -> EntityId {
        EntityId::from(s)
    }

    pub(crate) fn tiny_engine() -> Arc<DiagnosisEngine> {
        let ents = [
            ("D1", EntityKind::Disease, "Influenza"),
            ("D2", EntityKind::Disease, "Common cold"),
            ("fever", EntityKind::Symptom, "fever"),
            ("cough", EntityKind::Symptom, "cough"),
            ("sneeze", EntityKind::Symptom, "sneeze"),
        ];
        let edges = [("D1", "fever"), ("D1", "cough"), ("D2", "cough"), ("D2", "sneeze")];
        let kg = KnowledgeGraph::from_parts(
            ents.iter().map(|(i, k, n)| KgEntity {
                id: id(i),
                kind: *k,
                name: n.to_string(),
            }),
            edges.iter().map(|(s, d)| Edge {
                src: id(s),
                relation: Relation::DiseaseSymptom,
                dst: id(d),
            }),
        )
        .unwrap();
        Arc::new(DiagnosisEngine::new(Arc::new(kg), None, AlignConfig::default()).unwrap())
    }

    fn case(primary: &str, secondary: &[&str], truth: &str) -> CaseFile {
        CaseFile {
            id: None,
            demographics: Demographics::parse("30-year-old female"),
            history: String::new(),
            symptoms: CaseSymptoms {
                primary: primary.into(),
                secondary: secondary.iter().map(|s| s.to_string()).collect(),
            },
            denied: vec![],
            physical_findings: IndexMap::new(),
            test_results: IndexMap::new(),
            correct_diagnosis: truth.into(),
        }
    }

    fn exact_cfg() -> SessionConfig {
        SessionConfig {
            inference: InferenceConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn first_step_asks_fever_and_confirms_d1() {
        let engine = tiny_engine();
        let c = case("cough", &["fever"], "Influenza");
        let patient = ScriptedPatient::from_case(&c, &engine).unwrap();
        let mut s = Session::start(engine, &PatientProfile::from_case(&c), exact_cfg()).unwrap();
        assert_eq!(s.current_question().unwrap().symptom, id("fever"));
        let log = s.step(&patient).unwrap().clone();
        assert_eq!(log.turn, 1);
        assert_eq!(log.answer, OracleAnswer::asserted("fever"));
        let probs: Vec<f64> = log.differential_after.entries().iter().map(|c| c.probability).collect();
        assert_eq!(probs, vec![1.0, 0.0]);
        assert_eq!(log.differential_after.leader(), &id("D1"));
        assert_eq!(s.evidence().asked().len(), 1);
    }

    #[test]
    fn denied_symptom_grows_negatives() {
        let engine = tiny_engine();
        let c = case("cough", &[], "Common cold");
        let patient = ScriptedPatient::from_case(&c, &engine).unwrap();
        let mut s = Session::start(engine, &PatientProfile::from_case(&c), exact_cfg()).unwrap();
        s.step(&patient).unwrap();
        assert!(s.evidence().negatives().contains(&id("fever")));
        assert!(s.evidence().positives().is_disjoint(s.evidence().negatives()));
    }

    #[test]
    fn exhaustion_terminates_without_asking() {
        let engine = tiny_engine();
        let c = case("cough", &["fever", "sneeze"], "Influenza");
        let patient = ScriptedPatient::from_case(&c, &engine).unwrap();
        let mut s = Session::start(engine, &PatientProfile::from_case(&c), SessionConfig::default()).unwrap();
        let out = s.run_to_completion(&patient).unwrap();
        assert_eq!(out.reason, TerminationReason::Exhausted);
        assert_eq!(out.rounds, 2);
        assert!(s.current_question().is_none());
        assert!(matches!(s.answer_current(Some(Polarity::Present)), Err(SessionError::Terminated)));
    }

    #[test]
    fn tiny_case_diagnoses_d1_quickly() {
        let engine = tiny_engine();
        let c = case("fever", &["cough"], "Influenza");
        let out = run_session(&c, &engine, SessionConfig::default()).unwrap();
        assert_eq!(out.final_diagnosis, id("D1"));
        assert!(out.rounds <= 3);
        let again = run_session(&c, &engine, SessionConfig::default()).unwrap();
        assert_eq!(out.trace_jsonl(), again.trace_jsonl());
    }

    #[test]
    fn unalignable_start_is_degraded() {
        let engine = tiny_engine();
        let c = case("xyzzy plugh", &[], "Influenza");
        let out = run_session(&c, &engine, SessionConfig::default()).unwrap();
        assert!(out.degraded_start);
        assert!(out.rounds <= 20);
    }

    #[test]
    fn unknown_answer_consumes_symptom_without_evidence() {
        let engine = tiny_engine();
        let profile = PatientProfile {
            demographics: Demographics::default(),
            chief_complaint: "cough".into(),
            primary_symptom: None,
        };
        let mut s = Session::start(engine, &profile, exact_cfg()).unwrap();
        let asked = s.current_question().unwrap().symptom.clone();
        s.answer_current(None).unwrap();
        assert!(s.evidence().asked().contains(&asked));
        assert!(!s.evidence().positives().contains(&asked));
        assert!(!s.evidence().negatives().contains(&asked));
        assert_ne!(s.current_question().map(|q| q.symptom.clone()), Some(asked));
    }

    #[test]
    fn turn_limit_and_stagnation_checks() {
        let engine = tiny_engine();
        let profile = PatientProfile {
            demographics: Demographics::default(),
            chief_complaint: "cough".into(),
            primary_symptom: None,
        };
        let cfg = SessionConfig {
            t_max: 1,
            ..exact_cfg()
        };
        let mut s = Session::start(engine.clone(), &profile, cfg).unwrap();
        assert_eq!(s.check_termination(), None);
        s.answer_current(Some(Polarity::Absent)).unwrap();
        assert_eq!(s.termination(), Some(TerminationReason::TurnLimit));

        // one-turn stagnation window: the differential after turn 1 is "stable"
        let cfg = SessionConfig {
            stagnation_n: 1,
            ..exact_cfg()
        };
        let mut s = Session::start(engine, &profile, cfg).unwrap();
        s.answer_current(None).unwrap();
        // after an uninformative turn, refuters exist for the uniform tie, so the next
        // question is a refutation
        if let Some(q) = s.current_question() {
            assert_eq!(q.kind, QuestionKind::Refutation);
        }
    }

    #[test]
    fn exam_requests_use_measurement_oracle() {
        let engine = tiny_engine();
        let mut c = case("cough", &[], "Influenza");
        c.test_results.insert("Ultrasound Abdomen".into(), "Findings: enlarged appendix".into());
        let m = ScriptedMeasurement::from_case(&c, &AlignConfig::default());
        assert_eq!(m.result("ultrasound  abdomen"), "Findings: enlarged appendix");
        assert_eq!(m.result("Ultrasound Abdomn"), "Findings: enlarged appendix");
        assert_eq!(m.result("Chest X-ray"), NORMAL_READINGS);

        let mut results = IndexMap::new();
        results.insert("CBC".to_owned(), "WBC 12,000".to_owned());
        results.insert("Chest X-ray".to_owned(), "clear".to_owned());
        let short = ScriptedMeasurement::new(&results, 3);
        assert_eq!(short.result("cbc"), "WBC 12,000");
        assert_eq!(short.result("MRI"), NORMAL_READINGS);
        assert_eq!(short.result("CRP"), NORMAL_READINGS);
        assert_eq!(short.result("Chest Xray"), "clear");

        let mut s = Session::start(engine, &PatientProfile::from_case(&c), SessionConfig::default()).unwrap();
        let log = s.request_exam("Ultrasound Abdomen", &m).unwrap();
        assert_eq!(log.exam_result.as_deref(), Some("Findings: enlarged appendix"));
        assert_eq!(s.record().examinations.len(), 1);
        assert_eq!(s.rounds(), 1);
    }

    #[test]
    fn patient_refuses_disease_questions() {
        let p = ScriptedPatient::from_symptoms([id("fever")]);
        let disease = KgEntity {
            id: id("D1"),
            name: "Influenza".into(),
            kind: EntityKind::Disease,
        };
        assert!(matches!(p.answer(&disease), Err(OracleError::NotASymptom(_))));
    }

    struct Broken;
    impl PatientOracle for Broken {
        fn answer(&self, _: &KgEntity) -> Result<OracleAnswer, OracleError> {
            Err(OracleError::Failed("line dropped".into()))
        }
    }

    #[test]
    fn oracle_failure_carries_partial_trace() {
        let engine = tiny_engine();
        let c = case("cough", &[], "Influenza");
        let mut s = Session::start(engine, &PatientProfile::from_case(&c), SessionConfig::default()).unwrap();
        s.answer_current(None).unwrap();
        match s.step(&Broken) {
            Err(SessionError::Oracle { trace, .. }) => assert_eq!(trace.len(), 1),
            other => panic!("expected oracle error, got {other:?}"),
        }
    }
}
