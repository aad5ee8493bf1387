//! Case ingestion, synthetic corpora and the accuracy/rounds benchmark.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::align::Aligner;
use crate::kg::{Edge, EntityId, EntityKind, KgEntity, KgError, KnowledgeGraph, Relation};
use crate::record::Demographics;
use crate::session::{run_session, DiagnosisEngine, QuestionPolicy, SessionConfig, SessionError, TerminationReason};

/// How `rounds` is counted in every report.
pub const ROUNDS_DEFINITION: &str = "questions asked; the final diagnosis turn is not counted";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSymptoms {
    pub primary: String,
    #[serde(default)]
    pub secondary: Vec<String>,
}

/// One OSCE case.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub demographics: Demographics,
    #[serde(default)]
    pub history: String,
    pub symptoms: CaseSymptoms,
    #[serde(default)]
    pub denied: Vec<String>,
    #[serde(default)]
    pub physical_findings: IndexMap<String, String>,
    #[serde(default)]
    pub test_results: IndexMap<String, String>,
    pub correct_diagnosis: String,
}

impl CaseFile {
    /// Primary symptom followed by the secondary ones.
    pub fn positive_terms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.symptoms.primary.as_str()).chain(self.symptoms.secondary.iter().map(String::as_str))
    }
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("case {index}: field {field:?}: {message}")]
    Schema {
        index: usize,
        field: String,
        message: String,
    },
}

fn schema(index: usize, field: &str, message: impl Into<String>) -> CaseError {
    CaseError::Schema {
        index,
        field: field.to_owned(),
        message: message.into(),
    }
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<CaseFile>, CaseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_cases(&text)
}

/// Parse a JSON array of cases, or a single case object. Each case may use
/// the `"OSCE Examination"` shape or the flat schema.
pub fn parse_cases(text: &str) -> Result<Vec<CaseFile>, CaseError> {
    let value: Value = serde_json::from_str(text)?;
    let items = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        _ => return Err(schema(0, "<root>", "expected an array of cases or a case object")),
    };
    if items.is_empty() {
        log::warn!("case file contains no cases");
    }
    items.iter().enumerate().map(|(i, v)| parse_case(i, v)).collect()
}

pub fn parse_case(index: usize, value: &Value) -> Result<CaseFile, CaseError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema(index, "<case>", "expected an object"))?;
    let case = match obj.get("OSCE Examination") {
        Some(osce) => CaseFile {
            id: case_id(index, value)?,
            ..parse_osce(index, osce)?
        },
        None => parse_flat(index, value)?,
    };
    if case.symptoms.primary.trim().is_empty() {
        return Err(schema(index, "primary symptom", "must be non-empty"));
    }
    if case.correct_diagnosis.trim().is_empty() {
        return Err(schema(index, "correct diagnosis", "must be non-empty"));
    }
    Ok(case)
}

fn req_str(index: usize, obj: &Value, field: &str) -> Result<String, CaseError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(index, field, "expected a string")),
        None => Err(schema(index, field, "missing")),
    }
}

fn opt_str(index: usize, obj: &Value, field: &str) -> Result<String, CaseError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(_) => req_str(index, obj, field),
    }
}

fn str_list(index: usize, obj: &Value, field: &str) -> Result<Vec<String>, CaseError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| schema(index, field, "expected a list of strings"))
            })
            .collect(),
        Some(_) => Err(schema(index, field, "expected a list of strings")),
    }
}

fn text_map(index: usize, obj: &Value, field: &str) -> Result<IndexMap<String, String>, CaseError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(IndexMap::new()),
        Some(Value::Object(_)) => Ok(flatten_results(&obj[field])),
        Some(_) => Err(schema(index, field, "expected an object")),
    }
}

/// Flatten nested result groups. Every key at every depth becomes an entry;
/// groups render as `"key: value; key: value"`. The first occurrence of a
/// repeated key wins.
pub fn flatten_results(value: &Value) -> IndexMap<String, String> {
    let mut out = IndexMap::new();
    fn walk(v: &Value, out: &mut IndexMap<String, String>) {
        if let Value::Object(map) = v {
            for (k, child) in map {
                out.entry(k.trim().to_owned()).or_insert_with(|| render(child));
                walk(child, out);
            }
        }
    }
    walk(value, &mut out);
    out
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(map) => map
            .iter()
            .map(|(k, c)| format!("{k}: {}", render(c)))
            .collect::<Vec<_>>()
            .join("; "),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Terms listed after "Denies" in a review-of-systems sentence.
pub fn parse_review_of_systems(text: &str) -> Vec<String> {
    let t = text.trim();
    let lower = t.to_lowercase();
    let Some(rest) = lower.strip_prefix("denies") else {
        return Vec::new();
    };
    let rest = &t[t.len() - rest.len()..];
    let rest = rest.trim().trim_end_matches('.');
    rest.split(',')
        .flat_map(|part| {
            let p = part.trim();
            let p = p.strip_prefix("or ").or_else(|| p.strip_prefix("and ")).unwrap_or(p);
            p.split(" or ").flat_map(|q| q.split(" and ")).map(str::trim).collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn push_denied(denied: &mut Vec<String>, term: &str) {
    let term = term.trim();
    if !term.is_empty() && !denied.iter().any(|d| d.eq_ignore_ascii_case(term)) {
        denied.push(term.to_owned());
    }
}

/// Split secondary symptoms into positives and "No ..." negatives.
fn split_secondary(secondary: Vec<String>, denied: &mut Vec<String>) -> Vec<String> {
    let mut positives = Vec::new();
    for s in secondary {
        let t = s.trim();
        match t.get(..3) {
            Some(p) if p.eq_ignore_ascii_case("no ") => push_denied(denied, &t[3..]),
            _ if !t.is_empty() => positives.push(t.to_owned()),
            _ => {}
        }
    }
    positives
}

fn parse_osce(index: usize, osce: &Value) -> Result<CaseFile, CaseError> {
    if !osce.is_object() {
        return Err(schema(index, "OSCE Examination", "expected an object"));
    }
    let actor = osce
        .get("Patient Actor")
        .filter(|v| v.is_object())
        .ok_or_else(|| schema(index, "Patient Actor", "missing or not an object"))?;
    let symptoms = actor
        .get("Symptoms")
        .filter(|v| v.is_object())
        .ok_or_else(|| schema(index, "Symptoms", "missing or not an object"))?;
    let mut denied = Vec::new();
    let secondary = split_secondary(str_list(index, symptoms, "Secondary Symptoms")?, &mut denied);
    for d in parse_review_of_systems(&opt_str(index, actor, "Review of Systems")?) {
        push_denied(&mut denied, &d);
    }
    Ok(CaseFile {
        id: None,
        demographics: Demographics::parse(&opt_str(index, actor, "Demographics")?),
        history: opt_str(index, actor, "History")?,
        symptoms: CaseSymptoms {
            primary: req_str(index, symptoms, "Primary Symptom")?,
            secondary,
        },
        denied,
        physical_findings: text_map(index, osce, "Physical Examination Findings")?,
        test_results: text_map(index, osce, "Test Results")?,
        correct_diagnosis: req_str(index, osce, "Correct Diagnosis")?,
    })
}

fn case_id(index: usize, v: &Value) -> Result<Option<String>, CaseError> {
    match v.get("id") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(schema(index, "id", "expected a string")),
    }
}

fn parse_flat(index: usize, v: &Value) -> Result<CaseFile, CaseError> {
    let demographics = match v.get("demographics") {
        None | Some(Value::Null) => Demographics::default(),
        Some(Value::String(s)) => Demographics::parse(s),
        Some(d @ Value::Object(_)) => Demographics {
            age: opt_str(index, d, "age")?,
            gender: opt_str(index, d, "gender")?,
        },
        Some(_) => return Err(schema(index, "demographics", "expected a string or object")),
    };
    let symptoms = v
        .get("symptoms")
        .filter(|s| s.is_object())
        .ok_or_else(|| schema(index, "symptoms", "missing or not an object"))?;
    let mut denied = Vec::new();
    for d in str_list(index, v, "denied")? {
        push_denied(&mut denied, &d);
    }
    let secondary = split_secondary(str_list(index, symptoms, "secondary")?, &mut denied);
    Ok(CaseFile {
        id: case_id(index, v)?,
        demographics,
        history: opt_str(index, v, "history")?,
        symptoms: CaseSymptoms {
            primary: req_str(index, symptoms, "primary")?,
            secondary,
        },
        denied,
        physical_findings: text_map(index, v, "physical_findings")?,
        test_results: text_map(index, v, "test_results")?,
        correct_diagnosis: req_str(index, v, "correct_diagnosis")?,
    })
}

/// Serialize cases in the flat schema.
pub fn cases_to_json(cases: &[CaseFile]) -> String {
    serde_json::to_string_pretty(cases).expect("cases serialize")
}

/// Align the ground-truth string to a disease and compare ids. An
/// unalignable truth, or a provider failure, never matches.
pub fn match_diagnosis(predicted: &EntityId, truth: &str, aligner: &Aligner) -> bool {
    match aligner.align(truth, EntityKind::Disease) {
        Ok(r) => r.matched.as_ref() == Some(predicted),
        Err(e) => {
            log::warn!("could not align ground truth {truth:?}: {e}");
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub correct_diagnosis: String,
    pub predicted: Option<EntityId>,
    pub predicted_name: Option<String>,
    pub correct: bool,
    pub rounds: u32,
    pub reason: Option<TerminationReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub policy: QuestionPolicy,
    pub seed: u64,
    pub n_cases: usize,
    pub accuracy: f64,
    pub mean_rounds: f64,
    pub failures: usize,
    pub rounds_definition: String,
    pub config: SessionConfig,
    pub warnings: Vec<String>,
    pub outcomes: Vec<CaseOutcome>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Accuracy recomputed from the per-case outcomes.
    pub fn recomputed_accuracy(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.correct).count() as f64 / self.outcomes.len() as f64
    }
}

/// Seed for case `index` of a run seeded with `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn run_benchmark(
    cases: &[CaseFile],
    engine: &Arc<DiagnosisEngine>,
    policy: QuestionPolicy,
    cfg: SessionConfig,
) -> BenchReport {
    let cfg = SessionConfig { policy, ..cfg };
    let outcomes: Vec<CaseOutcome> = cases
        .par_iter()
        .enumerate()
        .map(|(index, case)| {
            let case_cfg = SessionConfig {
                seed: case_seed(cfg.seed, index),
                ..cfg
            };
            let base = CaseOutcome {
                index,
                case_id: case.id.clone(),
                correct_diagnosis: case.correct_diagnosis.clone(),
                predicted: None,
                predicted_name: None,
                correct: false,
                rounds: 0,
                reason: None,
                error: None,
            };
            match run_session(case, engine, case_cfg) {
                Ok(out) => CaseOutcome {
                    correct: match_diagnosis(&out.final_diagnosis, &case.correct_diagnosis, engine.aligner()),
                    predicted_name: Some(out.final_name),
                    predicted: Some(out.final_diagnosis),
                    rounds: out.rounds,
                    reason: Some(out.reason),
                    ..base
                },
                Err(e) => {
                    let rounds = match &e {
                        SessionError::Oracle { trace, .. } => trace.len() as u32,
                        _ => 0,
                    };
                    CaseOutcome {
                        rounds,
                        error: Some(e.to_string()),
                        ..base
                    }
                }
            }
        })
        .collect();

    let n = outcomes.len();
    let mut warnings = Vec::new();
    if n == 0 {
        warnings.push("no cases: accuracy reported as 0".to_owned());
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let total_rounds: u64 = outcomes.iter().map(|o| u64::from(o.rounds)).sum();
    let failures = outcomes.iter().filter(|o| o.error.is_some()).count();
    if failures > 0 {
        warnings.push(format!("{failures} case(s) failed and were counted as incorrect"));
    }
    let (accuracy, mean_rounds) = if n == 0 {
        (0.0, 0.0)
    } else {
        (correct as f64 / n as f64, total_rounds as f64 / n as f64)
    };
    BenchReport {
        policy,
        seed: cfg.seed,
        n_cases: n,
        accuracy,
        mean_rounds,
        failures,
        rounds_definition: ROUNDS_DEFINITION.to_owned(),
        config: cfg,
        warnings,
        outcomes,
    }
}

/// Plain-text table with one row per report.
pub fn render_table(reports: &[BenchReport]) -> String {
    let header = ["policy", "accuracy", "mean_rounds", "n", "seed"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.policy.label().to_owned(),
                format!("{:.4}", r.accuracy),
                format!("{:.3}", r.mean_rounds),
                r.n_cases.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i == 0 {
                s.push_str(&format!("{cell:<w$}"));
            } else {
                s.push_str(&format!("  {cell:>w$}"));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header);
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub dropout: f64,
    pub distractor: f64,
}

impl Noise {
    pub const NONE: Noise = Noise {
        dropout: 0.0,
        distractor: 0.0,
    };
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("knowledge graph has no disease with symptoms")]
    NoDiseases,
    #[error("{0} must be in [0, 0.5], got {1}")]
    Noise(&'static str, f64),
    #[error("cannot build synthetic graph: {0}")]
    Graph(String),
}

/// Sample `n_cases` cases from diseases of `kg`. Each true symptom is
/// revealed with probability `1 - dropout` (at least one always is); each
/// revealed symptom brings a symptom of another disease with probability
/// `distractor`.
pub fn generate_synthetic_corpus(
    kg: &KnowledgeGraph,
    n_cases: usize,
    noise: Noise,
    seed: u64,
) -> Result<Vec<CaseFile>, CorpusError> {
    for (name, v) in [("dropout", noise.dropout), ("distractor", noise.distractor)] {
        if !(0.0..=0.5).contains(&v) {
            return Err(CorpusError::Noise(name, v));
        }
    }
    let diseases: Vec<&EntityId> = kg
        .diseases()
        .filter(|d| kg.neighbors(d).is_ok_and(|n| !n.is_empty()))
        .collect();
    if diseases.is_empty() {
        return Err(CorpusError::NoDiseases);
    }
    let all_symptoms: Vec<&EntityId> = kg.symptoms().map(|s| &s.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let d = *diseases.choose(&mut rng).expect("non-empty");
        let own = kg.neighbors(d).expect("disease");
        let own_list: Vec<&EntityId> = own.iter().collect();
        let mut revealed: Vec<&EntityId> = own_list
            .iter()
            .copied()
            .filter(|_| rng.random_bool(1.0 - noise.dropout))
            .collect();
        if revealed.is_empty() {
            revealed.push(own_list.choose(&mut rng).expect("non-empty"));
        }
        revealed.shuffle(&mut rng);
        let pool: Vec<&EntityId> = all_symptoms.iter().copied().filter(|s| !own.contains(*s)).collect();
        let mut distractors: Vec<&EntityId> = Vec::new();
        for _ in 0..revealed.len() {
            if rng.random_bool(noise.distractor) {
                if let Some(s) = pool.choose(&mut rng) {
                    if !distractors.contains(s) {
                        distractors.push(s);
                    }
                }
            }
        }
        let name = |id: &EntityId| kg.name_of(id).unwrap_or(id.as_str()).to_owned();
        let primary = name(revealed[0]);
        let secondary = revealed[1..].iter().chain(&distractors).map(|s| name(s)).collect();
        let age = rng.random_range(18..=85u32);
        let gender = if rng.random_bool(0.5) { "female" } else { "male" };
        cases.push(CaseFile {
            id: Some(format!("synthetic-{seed}-{i:04}")),
            demographics: Demographics {
                age: age.to_string(),
                gender: gender.to_owned(),
            },
            history: format!("Synthetic presentation of {}.", name(d)),
            symptoms: CaseSymptoms { primary, secondary },
            denied: Vec::new(),
            physical_findings: IndexMap::new(),
            test_results: IndexMap::new(),
            correct_diagnosis: name(d),
        });
    }
    Ok(cases)
}

/// Random bipartite graph in which every disease has a distinct symptom set
/// of size in `per_disease`.
pub fn synthetic_kg(
    n_diseases: usize,
    n_symptoms: usize,
    per_disease: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<KnowledgeGraph, CorpusError> {
    let (lo, hi) = (*per_disease.start(), *per_disease.end());
    if n_diseases == 0 || lo == 0 || lo > hi || hi > n_symptoms {
        return Err(CorpusError::Graph(format!(
            "need at least one disease and 1 <= {lo} <= {hi} <= {n_symptoms}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symptom_ids: Vec<EntityId> = (0..n_symptoms).map(|i| EntityId::new(format!("S{i:03}"))).collect();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut entities: Vec<KgEntity> = symptom_ids
        .iter()
        .enumerate()
        .map(|(i, id)| KgEntity {
            id: id.clone(),
            name: format!("symptom {i:03}"),
            kind: EntityKind::Symptom,
        })
        .collect();
    let mut edges = Vec::new();
    let indices: Vec<usize> = (0..n_symptoms).collect();
    for d in 0..n_diseases {
        let mut attempts = 0;
        let set = loop {
            let k = rng.random_range(lo..=hi);
            let mut pick: Vec<usize> = indices.choose_multiple(&mut rng, k).copied().collect();
            pick.sort_unstable();
            if seen.insert(pick.clone()) {
                break pick;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(CorpusError::Graph("could not find distinct symptom signatures".into()));
            }
        };
        let did = EntityId::new(format!("D{d:03}"));
        entities.push(KgEntity {
            id: did.clone(),
            name: format!("disease {d:03}"),
            kind: EntityKind::Disease,
        });
        for s in set {
            edges.push(Edge {
                src: did.clone(),
                relation: Relation::DiseaseSymptom,
                dst: symptom_ids[s].clone(),
            });
        }
    }
    KnowledgeGraph::from_parts(entities, edges).map_err(|e: KgError| CorpusError::Graph(e.to_string()))
}
