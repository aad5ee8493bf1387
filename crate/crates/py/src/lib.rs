//! Python bindings: graph loading, the diagnosis engine, interactive and
//! scripted sessions, benchmarks and the synthetic generators.
//!
//! Structured values (records, traces, reports, cases) cross the boundary
//! as the same JSON documents the CLI and HTTP service emit, decoded into
//! plain Python dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use dxgraph::bench::{self, CaseError};
use dxgraph::inference::InferenceConfig;
use dxgraph::kg::KgError;
use dxgraph::record::Demographics;
use dxgraph::session::{PatientProfile, ScriptedMeasurement, ScriptedPatient, SessionError};
use dxgraph::{
    AlignConfig, CaseFile, DiagnosisEngine as CoreEngine, EntityId, EntityKind, KnowledgeGraph as CoreKg, Noise,
    Polarity, QuestionPolicy, Session as CoreSession, SessionConfig, VectorTable,
};
use indexmap::IndexMap;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

create_exception!(dxgraph_py, DxgraphError, PyException, "Engine or session failure.");

fn engine_err(e: impl std::fmt::Display) -> PyErr {
    DxgraphError::new_err(e.to_string())
}

fn kg_err(e: KgError) -> PyErr {
    match e {
        KgError::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn case_err(e: CaseError) -> PyErr {
    match e {
        CaseError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn session_err(e: SessionError) -> PyErr {
    match e {
        SessionError::Config(_) => PyValueError::new_err(e.to_string()),
        other => engine_err(other),
    }
}

/// Serialize to JSON and decode with the `json` module.
fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(engine_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_policy(policy: &str) -> PyResult<QuestionPolicy> {
    policy.parse().map_err(PyValueError::new_err)
}

/// A validated disease-symptom knowledge graph.
#[pyclass(frozen, module = "dxgraph_py")]
pub struct KnowledgeGraph {
    inner: Arc<CoreKg>,
}

#[pymethods]
impl KnowledgeGraph {
    /// Load `nodes.tsv` and `edges.tsv`.
    #[staticmethod]
    fn load(nodes: PathBuf, edges: PathBuf) -> PyResult<Self> {
        let kg = CoreKg::load_files(nodes, edges).map_err(kg_err)?;
        Ok(Self { inner: Arc::new(kg) })
    }

    /// Parse node and edge tables from strings.
    #[staticmethod]
    fn parse(nodes: &str, edges: &str) -> PyResult<Self> {
        let kg = CoreKg::load(nodes.as_bytes(), edges.as_bytes()).map_err(kg_err)?;
        Ok(Self { inner: Arc::new(kg) })
    }

    /// Random graph in which every disease has a distinct symptom set.
    #[staticmethod]
    #[pyo3(signature = (n_diseases, n_symptoms, min_degree = 3, max_degree = 8, seed = 0))]
    fn synthetic(n_diseases: usize, n_symptoms: usize, min_degree: usize, max_degree: usize, seed: u64) -> PyResult<Self> {
        let kg = bench::synthetic_kg(n_diseases, n_symptoms, min_degree..=max_degree, seed)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: Arc::new(kg) })
    }

    #[getter]
    fn disease_count(&self) -> usize {
        self.inner.disease_count()
    }

    #[getter]
    fn symptom_count(&self) -> usize {
        self.inner.count_kind(EntityKind::Symptom)
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn diseases(&self) -> Vec<String> {
        self.inner.diseases().map(|d| d.as_str().to_owned()).collect()
    }

    fn name_of(&self, id: &str) -> Option<String> {
        self.inner.name_of(&EntityId::from(id)).map(str::to_owned)
    }

    /// Symptom ids connected to a disease.
    fn neighbors(&self, disease: &str) -> PyResult<Vec<String>> {
        let n = self.inner.neighbors(&EntityId::from(disease)).map_err(kg_err)?;
        Ok(n.iter().map(|s| s.as_str().to_owned()).collect())
    }

    /// `(nodes_tsv, edges_tsv)` in the loader's format.
    fn to_tsv(&self) -> PyResult<(String, String)> {
        let (mut nodes, mut edges) = (Vec::new(), Vec::new());
        self.inner.write_nodes(&mut nodes).map_err(engine_err)?;
        self.inner.write_edges(&mut edges).map_err(engine_err)?;
        Ok((String::from_utf8_lossy(&nodes).into_owned(), String::from_utf8_lossy(&edges).into_owned()))
    }

    fn __repr__(&self) -> String {
        format!(
            "KnowledgeGraph(diseases={}, symptoms={}, edges={})",
            self.disease_count(),
            self.symptom_count(),
            self.edge_count()
        )
    }
}

/// Graph plus term aligner, shared by every session started from it.
#[pyclass(frozen, module = "dxgraph_py")]
pub struct Engine {
    inner: Arc<CoreEngine>,
    kg: Arc<CoreKg>,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (kg, vectors = None, max_edit_distance = 3, tau = 0.85))]
    fn new(kg: &KnowledgeGraph, vectors: Option<PathBuf>, max_edit_distance: usize, tau: f64) -> PyResult<Self> {
        let provider = match vectors {
            Some(p) => Some(Arc::new(VectorTable::load(&p).map_err(|e| PyValueError::new_err(e.to_string()))?) as _),
            None => None,
        };
        let align = AlignConfig {
            max_edit_distance,
            tau,
            ..Default::default()
        };
        let inner = CoreEngine::new(kg.inner.clone(), provider, align).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: Arc::new(inner),
            kg: kg.inner.clone(),
        })
    }

    /// Symptom id for a free-text term, or None.
    fn align(&self, term: &str) -> PyResult<Option<String>> {
        let id = self.inner.align_symptom(term).map_err(engine_err)?;
        Ok(id.map(|i| i.as_str().to_owned()))
    }

    #[getter]
    fn kg(&self) -> KnowledgeGraph {
        KnowledgeGraph {
            inner: self.kg.clone(),
        }
    }
}

#[derive(Clone, Copy)]
struct Knobs {
    t_max: u32,
    stagnation_n: u32,
    n_candidates: usize,
    k_ratio: f64,
    epsilon: f64,
}

impl Knobs {
    fn config(self, engine: &CoreEngine, policy: QuestionPolicy, seed: u64) -> PyResult<SessionConfig> {
        let cfg = SessionConfig {
            t_max: self.t_max,
            stagnation_n: self.stagnation_n,
            inference: InferenceConfig {
                n_candidates: self.n_candidates,
                k_ratio: self.k_ratio,
                epsilon: self.epsilon,
            },
            align: *engine.aligner().config(),
            seed,
            policy,
        };
        cfg.validate().map_err(session_err)?;
        Ok(cfg)
    }
}

/// One consultation. Answer the current question with `answer`, order
/// tests with `exam`, or let a case file play the patient with `run_case`.
#[pyclass(module = "dxgraph_py")]
pub struct Session {
    inner: CoreSession,
    lab: ScriptedMeasurement,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (
        engine, chief_complaint, age = "", gender = "", primary_symptom = None,
        policy = "info-gain", seed = 0, t_max = 20, stagnation_n = 3,
        n_candidates = 5, k_ratio = 1.0, epsilon = 1e-9, exam_results = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        engine: &Engine,
        chief_complaint: &str,
        age: &str,
        gender: &str,
        primary_symptom: Option<String>,
        policy: &str,
        seed: u64,
        t_max: u32,
        stagnation_n: u32,
        n_candidates: usize,
        k_ratio: f64,
        epsilon: f64,
        exam_results: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let knobs = Knobs {
            t_max,
            stagnation_n,
            n_candidates,
            k_ratio,
            epsilon,
        };
        let cfg = knobs.config(&engine.inner, parse_policy(policy)?, seed)?;
        let profile = PatientProfile {
            demographics: Demographics {
                age: age.to_owned(),
                gender: gender.to_owned(),
            },
            chief_complaint: chief_complaint.to_owned(),
            primary_symptom,
        };
        let inner = CoreSession::start(engine.inner.clone(), &profile, cfg).map_err(session_err)?;
        let mut results = IndexMap::new();
        if let Some(d) = exam_results {
            for (k, v) in d.iter() {
                results.insert(k.extract::<String>()?, v.extract::<String>()?);
            }
        }
        let lab = ScriptedMeasurement::new(&results, cfg.align.max_edit_distance);
        Ok(Self { inner, lab })
    }

    /// Start a session from a case dict (flat or OSCE shape). Exams are
    /// answered from the case's test results.
    #[staticmethod]
    #[pyo3(signature = (engine, case, policy = "info-gain", seed = 0))]
    fn from_case(py: Python<'_>, engine: &Engine, case: &Bound<'_, PyAny>, policy: &str, seed: u64) -> PyResult<Self> {
        let case = case_from_py(py, case)?;
        let mut cfg = SessionConfig {
            policy: parse_policy(policy)?,
            seed,
            ..Default::default()
        };
        cfg.align = *engine.inner.aligner().config();
        let inner = CoreSession::start(engine.inner.clone(), &PatientProfile::from_case(&case), cfg).map_err(session_err)?;
        Ok(Self {
            inner,
            lab: ScriptedMeasurement::from_case(&case, &cfg.align),
        })
    }

    /// Next question as a dict (`symptom`, `name`, `ig`, `kind`), or None
    /// once terminated.
    #[getter]
    fn question(&self, py: Python<'_>) -> PyResult<Option<Py<PyAny>>> {
        self.inner.current_question().map(|q| to_py(py, q)).transpose()
    }

    /// Answer the current question: True/"present", False/"absent", or
    /// None/"unknown".
    #[pyo3(signature = (polarity = None))]
    fn answer(&mut self, py: Python<'_>, polarity: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
        let polarity = match polarity {
            None => None,
            Some(p) if p.is_none() => None,
            Some(p) => {
                if let Ok(b) = p.extract::<bool>() {
                    Some(if b { Polarity::Present } else { Polarity::Absent })
                } else {
                    match p.extract::<String>()?.to_lowercase().as_str() {
                        "present" | "yes" | "y" => Some(Polarity::Present),
                        "absent" | "no" | "n" => Some(Polarity::Absent),
                        "unknown" | "u" => None,
                        other => return Err(PyValueError::new_err(format!("unknown polarity {other:?}"))),
                    }
                }
            }
        };
        let log = self.inner.answer_current(polarity).map_err(session_err)?;
        to_py(py, log)
    }

    /// Order an examination; returns the result text.
    fn exam(&mut self, name: &str) -> PyResult<String> {
        if name.trim().is_empty() {
            return Err(PyValueError::new_err("exam name must be non-empty"));
        }
        let log = self.inner.request_exam(name, &self.lab).map_err(session_err)?;
        Ok(log.exam_result.clone().unwrap_or_default())
    }

    /// Let the case play the patient until the session ends. Returns the
    /// outcome dict.
    fn run_case(&mut self, py: Python<'_>, case: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let case = case_from_py(py, case)?;
        let patient = ScriptedPatient::from_case(&case, self.inner.engine()).map_err(engine_err)?;
        let outcome = self.inner.run_to_completion(&patient).map_err(session_err)?;
        to_py(py, &outcome)
    }

    /// `[(disease_id, name, probability)]`, most probable first.
    fn differential(&self) -> Vec<(String, String, f64)> {
        let kg = self.inner.engine().kg();
        self.inner
            .differential()
            .entries()
            .iter()
            .map(|c| {
                let name = kg.name_of(&c.disease).unwrap_or(c.disease.as_str()).to_owned();
                (c.disease.as_str().to_owned(), name, c.probability)
            })
            .collect()
    }

    /// `[(symptom_id, information_gain)]` for the current plan.
    fn plan(&self) -> Vec<(String, f64)> {
        self.inner
            .plan()
            .ranked
            .iter()
            .map(|r| (r.symptom.as_str().to_owned(), r.ig))
            .collect()
    }

    fn record(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.record())
    }

    fn trace(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.trace())
    }

    fn outcome(&self, py: Python<'_>) -> PyResult<Option<Py<PyAny>>> {
        self.inner.outcome().map(|o| to_py(py, &o)).transpose()
    }

    #[getter]
    fn terminated(&self) -> bool {
        self.inner.is_terminated()
    }

    #[getter]
    fn rounds(&self) -> u32 {
        self.inner.rounds()
    }

    #[getter]
    fn degraded_start(&self) -> bool {
        self.inner.degraded_start()
    }

    #[getter]
    fn leading_diagnosis(&self) -> String {
        self.inner.leading_diagnosis().as_str().to_owned()
    }
}

fn case_from_py(py: Python<'_>, case: &Bound<'_, PyAny>) -> PyResult<CaseFile> {
    let text: String = py.import("json")?.call_method1("dumps", (case,))?.extract()?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    bench::parse_case(0, &value).map_err(case_err)
}

fn cases_from_py(py: Python<'_>, cases: &Bound<'_, PyAny>) -> PyResult<Vec<CaseFile>> {
    if let Ok(path) = cases.extract::<PathBuf>() {
        return bench::load_cases(path).map_err(case_err);
    }
    let text: String = py.import("json")?.call_method1("dumps", (cases,))?.extract()?;
    bench::parse_cases(&text).map_err(case_err)
}

/// Read a case file (flat or OSCE shape) into a list of flat case dicts.
#[pyfunction]
fn load_cases(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    to_py(py, &bench::load_cases(path).map_err(case_err)?)
}

/// Sample a corpus of flat case dicts from a graph.
#[pyfunction]
#[pyo3(signature = (kg, n, dropout = 0.2, distractor = 0.1, seed = 0))]
fn generate_cases(py: Python<'_>, kg: &KnowledgeGraph, n: usize, dropout: f64, distractor: f64, seed: u64) -> PyResult<Py<PyAny>> {
    let cases = bench::generate_synthetic_corpus(&kg.inner, n, Noise { dropout, distractor }, seed)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &cases)
}

/// Run every case under one policy. `cases` is a path or a list of case
/// dicts. Returns the report dict.
#[pyfunction]
#[pyo3(signature = (
    engine, cases, policy = "info-gain", seed = 0, t_max = 20, stagnation_n = 3,
    n_candidates = 5, k_ratio = 1.0, epsilon = 1e-9,
))]
#[allow(clippy::too_many_arguments)]
fn run_benchmark(
    py: Python<'_>,
    engine: &Engine,
    cases: &Bound<'_, PyAny>,
    policy: &str,
    seed: u64,
    t_max: u32,
    stagnation_n: u32,
    n_candidates: usize,
    k_ratio: f64,
    epsilon: f64,
) -> PyResult<Py<PyAny>> {
    let cases = cases_from_py(py, cases)?;
    let policy = parse_policy(policy)?;
    let knobs = Knobs {
        t_max,
        stagnation_n,
        n_candidates,
        k_ratio,
        epsilon,
    };
    let cfg = knobs.config(&engine.inner, policy, seed)?;
    let engine = engine.inner.clone();
    let report = py.detach(move || bench::run_benchmark(&cases, &engine, policy, cfg));
    to_py(py, &report)
}

/// Shannon entropy in bits of a probability vector.
#[pyfunction]
fn entropy_bits(probabilities: Vec<f64>) -> f64 {
    dxgraph::inference::entropy_bits(&probabilities)
}

/// Character-level edit distance.
#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    dxgraph::align::levenshtein(a, b)
}

#[pymodule]
pub fn dxgraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DxgraphError", m.py().get_type::<DxgraphError>())?;
    m.add_class::<KnowledgeGraph>()?;
    m.add_class::<Engine>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(load_cases, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cases, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_bits, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    Ok(())
}
