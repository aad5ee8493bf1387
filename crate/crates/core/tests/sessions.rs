mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use common::*;
use dxgraph::bench::{case_seed, generate_synthetic_corpus, load_cases, synthetic_kg, CaseSymptoms};
use dxgraph::inference::InferenceConfig;
use dxgraph::kg::EntityId;
use dxgraph::session::{
    run_session, PatientProfile, Question, QuestionKind, ScriptedMeasurement, ScriptedPatient, SessionError,
    TerminationCheck, NORMAL_READINGS,
};
use dxgraph::{
    AlignConfig, CaseFile, DiagnosisEngine, KnowledgeGraph, Noise, Polarity, QuestionPolicy, Session, SessionConfig,
    TerminationReason,
};
use proptest::prelude::*;

fn engine(kg: KnowledgeGraph) -> Arc<DiagnosisEngine> {
    Arc::new(DiagnosisEngine::new(Arc::new(kg), None, AlignConfig::default()).unwrap())
}

fn case(primary: &str, secondary: &[&str], truth: &str) -> CaseFile {
    CaseFile {
        symptoms: CaseSymptoms {
            primary: primary.into(),
            secondary: secondary.iter().map(|s| s.to_string()).collect(),
        },
        correct_diagnosis: truth.into(),
        ..Default::default()
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

fn asked_ids(trace: &[dxgraph::session::TurnLog]) -> Vec<EntityId> {
    trace
        .iter()
        .filter_map(|t| match &t.question {
            Question::Symptom { id, .. } => Some(id.clone()),
            Question::Exam { .. } => None,
        })
        .collect()
}

#[test]
fn tiny_graph_influenza_case() {
    let e = engine(tiny_kg());
    let c = case("cough", &["fever"], "Influenza");
    let out = run_session(&c, &e, exact_cfg()).unwrap();
    let first = &out.trace[0];
    assert!(matches!(&first.question, Question::Symptom { id, .. } if id.as_str() == "fever"));
    assert_eq!(first.differential_after.probability(&id("D1")), Some(1.0));
    assert_eq!(first.differential_after.probability(&id("D2")), Some(0.0));
    assert_eq!(out.final_diagnosis, id("D1"));
    assert_eq!(out.final_name, "Influenza");
    assert!(out.rounds <= 3);
    assert!(!out.degraded_start);
}

#[test]
fn unknown_answer_consumes_the_symptom() {
    let mut s = Session::start(engine(tiny_kg()), &PatientProfile::from_case(&case("cough", &[], "x")), exact_cfg()).unwrap();
    let before = s.differential().clone();
    let asked = s.current_question().unwrap().symptom.clone();
    s.answer_current(None).unwrap();
    assert!(s.evidence().asked().contains(&asked));
    assert!(!s.evidence().positives().contains(&asked));
    assert!(!s.evidence().negatives().contains(&asked));
    assert_eq!(s.differential(), &before);
    assert_ne!(s.current_question().map(|q| &q.symptom), Some(&asked));
}

#[test]
fn denial_of_a_foreign_symptom_grows_negatives() {
    let e = engine(tiny_kg());
    let mut s = Session::start(e, &PatientProfile::from_case(&case("cough", &[], "x")), exact_cfg()).unwrap();
    let patient = ScriptedPatient::from_symptoms([id("cough")]);
    let q = s.current_question().unwrap().symptom.clone();
    s.step(&patient).unwrap();
    assert!(s.evidence().negatives().contains(&q));
    let pos: BTreeSet<_> = s.evidence().positives().iter().collect();
    assert!(s.evidence().negatives().iter().all(|n| !pos.contains(n)));
    assert_eq!(s.record().polarity_of(&q.to_string()), Some(Polarity::Absent));
}

#[test]
fn terminated_session_rejects_answers() {
    let e = engine(tiny_kg());
    let c = case("cough", &["fever"], "Influenza");
    let patient = ScriptedPatient::from_case(&c, &e).unwrap();
    let mut s = Session::start(e, &PatientProfile::from_case(&c), exact_cfg()).unwrap();
    s.run_to_completion(&patient).unwrap();
    assert!(s.is_terminated());
    assert!(s.current_question().is_none());
    assert!(matches!(s.answer_current(Some(Polarity::Present)), Err(SessionError::Terminated)));
    assert!(matches!(s.step(&patient), Err(SessionError::Terminated)));
}

#[test]
fn turn_limit_is_reported_first() {
    let kg = synthetic_kg(20, 40, 4..=8, 3).unwrap();
    let cases = generate_synthetic_corpus(&kg, 10, Noise::NONE, 3).unwrap();
    let e = engine(kg);
    let cfg = SessionConfig {
        t_max: 2,
        ..Default::default()
    };
    for c in &cases {
        let out = run_session(c, &e, cfg).unwrap();
        assert!(out.rounds <= 2);
        if out.rounds == 2 {
            assert_eq!(out.reason, TerminationReason::TurnLimit);
        }
    }
}

#[test]
fn degraded_start_still_terminates() {
    let e = engine(tiny_kg());
    let c = case("left ear pain", &["blurred vision"], "Influenza");
    let out = run_session(&c, &e, SessionConfig::default()).unwrap();
    assert!(out.degraded_start);
    assert!(out.rounds <= 20);
}

#[test]
fn mismatched_align_config_is_rejected() {
    let e = engine(tiny_kg());
    let cfg = SessionConfig {
        align: AlignConfig {
            tau: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let profile = PatientProfile::from_case(&case("cough", &[], "x"));
    assert!(matches!(Session::start(e, &profile, cfg), Err(SessionError::Config(_))));
}

#[test]
fn exam_requests_use_recorded_results() {
    let cases = load_cases(data_path("demo/cases.json")).unwrap();
    let appendicitis = &cases[0];
    let kg = KnowledgeGraph::load_files(data_path("demo/nodes.tsv"), data_path("demo/edges.tsv")).unwrap();
    let e = engine(kg);
    let lab = ScriptedMeasurement::from_case(appendicitis, e.aligner().config());
    let mut s = Session::start(e, &PatientProfile::from_case(appendicitis), SessionConfig::default()).unwrap();
    let pending = s.current_question().cloned();
    let differential = s.differential().clone();

    let log = s.request_exam("Ultrasound Abdomen", &lab).unwrap();
    assert!(log.exam_result.as_deref().unwrap().contains("Enlarged appendix"));
    assert_eq!(log.turn, 1);
    let log = s.request_exam("Chest X-ray", &lab).unwrap();
    assert_eq!(log.exam_result.as_deref(), Some(NORMAL_READINGS));

    assert_eq!(s.rounds(), 2);
    assert_eq!(s.differential(), &differential);
    assert_eq!(s.current_question().cloned(), pending);
    assert_eq!(s.record().examinations.len(), 2);
}

#[test]
fn demo_cases_reach_the_right_diagnosis() {
    let cases = load_cases(data_path("demo/cases.json")).unwrap();
    let kg = KnowledgeGraph::load_files(data_path("demo/nodes.tsv"), data_path("demo/edges.tsv")).unwrap();
    let e = engine(kg);
    for c in &cases {
        let out = run_session(c, &e, SessionConfig::default()).unwrap();
        assert!(dxgraph::bench::match_diagnosis(&out.final_diagnosis, &c.correct_diagnosis, e.aligner()));
    }
}

#[test]
fn stagnation_triggers_a_refutation_question_or_stops() {
    let kg = synthetic_kg(30, 60, 3..=8, 11).unwrap();
    let cases = generate_synthetic_corpus(&kg, 40, Noise { dropout: 0.2, distractor: 0.1 }, 11).unwrap();
    let e = engine(kg);
    let mut refutations = 0;
    for c in &cases {
        let out = run_session(c, &e, SessionConfig::default()).unwrap();
        for t in &out.trace {
            if let Question::Symptom { kind: QuestionKind::Refutation, .. } = t.question {
                refutations += 1;
            }
        }
    }
    assert!(refutations > 0, "corpus never stagnated");
}

/// Re-derive the refuter set of a terminated session from its differential
/// and subgraph alone.
fn posthoc_refuters(s: &Session) -> Vec<EntityId> {
    let sub = s.subgraph();
    let adjacency: BTreeMap<EntityId, BTreeSet<EntityId>> =
        sub.adjacency.iter().map(|(d, n)| (d.clone(), n.clone())).collect();
    let post: BTreeMap<EntityId, f64> = s.differential().entries().iter().map(|c| (c.disease.clone(), c.probability)).collect();
    if post.len() < 2 {
        return Vec::new();
    }
    let eligible: Vec<EntityId> = sub.symptoms.iter().filter(|x| !s.evidence().is_settled(x)).cloned().collect();
    oracle_refuters(&adjacency, &post, s.differential().leader(), &eligible, s.config().inference.epsilon)
}

fn run_checked(e: &Arc<DiagnosisEngine>, c: &CaseFile, cfg: SessionConfig) -> Result<String, TestCaseError> {
    let patient = ScriptedPatient::from_case(c, e).unwrap();
    let mut s = Session::start(e.clone(), &PatientProfile::from_case(c), cfg).unwrap();
    let out = s.run_to_completion(&patient).unwrap();

    prop_assert!(out.rounds <= cfg.t_max);
    prop_assert_eq!(out.rounds as usize, out.trace.len());
    let asked = asked_ids(&out.trace);
    let unique: BTreeSet<_> = asked.iter().collect();
    prop_assert_eq!(unique.len(), asked.len(), "a symptom was asked twice");

    let d = s.differential();
    prop_assert_eq!(&out.final_diagnosis, d.leader());
    let top = d.entries().iter().map(|c| c.probability).fold(0.0, f64::max);
    prop_assert_eq!(d.probability(&out.final_diagnosis), Some(top));

    match out.reason {
        TerminationReason::StagnationNoRefuter => {
            prop_assert_eq!(s.check_termination(), Some(TerminationCheck::StagnationPending));
            prop_assert!(posthoc_refuters(&s).is_empty());
        }
        TerminationReason::TurnLimit => prop_assert_eq!(out.rounds, cfg.t_max),
        TerminationReason::Exhausted => prop_assert_eq!(s.check_termination(), Some(TerminationCheck::Exhausted)),
    }
    Ok(out.trace_jsonl())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sessions_terminate_cleanly(
        seed in any::<u64>(),
        nd in 2usize..=20,
        extra in 0usize..=20,
        policy in prop_oneof![Just(QuestionPolicy::InfoGain), Just(QuestionPolicy::Random), Just(QuestionPolicy::DegreeBased)],
        dropout in 0.0f64..=0.5,
        distractor in 0.0f64..=0.5,
        t_max in 1u32..=20,
    ) {
        let ns = nd + extra + 4;
        let kg = synthetic_kg(nd, ns, 1..=4.min(ns), seed).unwrap();
        let cases = generate_synthetic_corpus(&kg, 8, Noise { dropout, distractor }, seed).unwrap();
        let e = engine(kg);
        for (i, c) in cases.iter().enumerate() {
            let cfg = SessionConfig { t_max, policy, seed: case_seed(seed, i), ..Default::default() };
            let a = run_checked(&e, c, cfg)?;
            let b = run_checked(&e, c, cfg)?;
            prop_assert_eq!(a, b);
        }
    }
}
