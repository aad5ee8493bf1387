//! Independent reference implementations and generators shared by the
//! integration tests. Nothing here calls into the inference module: the
//! oracles work in linear probability space with plain loops.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dxgraph::inference::{DifferentialSet, EvidenceState};
use dxgraph::kg::{DiagnosticSubgraph, EntityId};
use dxgraph::record::Polarity;
use proptest::prelude::*;

pub fn id(s: &str) -> EntityId {
    EntityId::from(s)
}

/// Adjacency, prior weights and evidence over a random bipartite subgraph.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub adjacency: BTreeMap<EntityId, BTreeSet<EntityId>>,
    pub weights: Vec<(EntityId, f64)>,
    pub evidence: Vec<(EntityId, Option<Polarity>)>,
}

impl Fixture {
    pub fn subgraph(&self) -> DiagnosticSubgraph {
        DiagnosticSubgraph::from_adjacency(self.adjacency.iter().map(|(d, n)| (d.clone(), n.clone())).collect())
    }

    pub fn prior(&self) -> DifferentialSet {
        DifferentialSet::from_weights(self.weights.clone()).unwrap()
    }

    pub fn evidence_state(&self) -> EvidenceState {
        let mut e = EvidenceState::new();
        for (s, p) in &self.evidence {
            e.mark_asked(s.clone());
            if let Some(p) = p {
                e.record(s.clone(), *p);
            }
        }
        e
    }

    pub fn symptoms(&self) -> BTreeSet<EntityId> {
        self.adjacency.values().flatten().cloned().collect()
    }

    pub fn positives(&self) -> Vec<EntityId> {
        self.evidence.iter().filter(|(_, p)| *p == Some(Polarity::Present)).map(|(s, _)| s.clone()).collect()
    }

    pub fn negatives(&self) -> Vec<EntityId> {
        self.evidence.iter().filter(|(_, p)| *p == Some(Polarity::Absent)).map(|(s, _)| s.clone()).collect()
    }
}

/// Random subgraph with up to `max_d` diseases and `max_s` symptoms. Prior
/// weights are small integers so that symmetric cases tie exactly.
pub fn fixture(max_d: usize, max_s: usize) -> impl Strategy<Value = Fixture> {
    (1..=max_d, 1..=max_s).prop_flat_map(|(nd, ns)| {
        (
            proptest::collection::vec(any::<bool>(), nd * ns),
            proptest::collection::vec(1u32..=4, nd),
            proptest::collection::vec(0u8..4, ns),
        )
            .prop_map(move |(edges, weights, ev)| {
                let mut adjacency = BTreeMap::new();
                for d in 0..nd {
                    let n: BTreeSet<EntityId> = (0..ns)
                        .filter(|s| edges[d * ns + s])
                        .map(|s| id(&format!("s{s:02}")))
                        .collect();
                    adjacency.insert(id(&format!("d{d}")), n);
                }
                let weights = (0..nd).map(|d| (id(&format!("d{d}")), f64::from(weights[d]))).collect();
                let connected: BTreeSet<EntityId> = adjacency.values().flatten().cloned().collect();
                let evidence = (0..ns)
                    .map(|s| id(&format!("s{s:02}")))
                    .zip(ev)
                    .filter(|(s, _)| connected.contains(s))
                    .filter_map(|(s, k)| match k {
                        0 => None,
                        1 => Some((s, Some(Polarity::Present))),
                        2 => Some((s, Some(Polarity::Absent))),
                        _ => Some((s, None)),
                    })
                    .collect();
                Fixture {
                    adjacency,
                    weights,
                    evidence,
                }
            })
    })
}

pub fn oracle_likelihood(adj: &BTreeMap<EntityId, BTreeSet<EntityId>>, d: &EntityId, s: &EntityId, eps: f64) -> f64 {
    let n = &adj[d];
    if n.contains(s) {
        1.0 / n.len() as f64
    } else {
        eps
    }
}

fn answer_factor(l: f64, p: Polarity, eps: f64) -> f64 {
    match p {
        Polarity::Present => l,
        Polarity::Absent => (1.0 - l).max(eps),
    }
}

/// Bayes by direct multiplication; uniform when every weight vanishes.
pub fn oracle_posterior(
    adj: &BTreeMap<EntityId, BTreeSet<EntityId>>,
    prior: &[(EntityId, f64)],
    pos: &[EntityId],
    neg: &[EntityId],
    eps: f64,
) -> BTreeMap<EntityId, f64> {
    let total_prior: f64 = prior.iter().map(|(_, w)| w).sum();
    let mut w: BTreeMap<EntityId, f64> = BTreeMap::new();
    for (d, p) in prior {
        let mut x = p / total_prior;
        for s in pos {
            x *= answer_factor(oracle_likelihood(adj, d, s, eps), Polarity::Present, eps);
        }
        for s in neg {
            x *= answer_factor(oracle_likelihood(adj, d, s, eps), Polarity::Absent, eps);
        }
        w.insert(d.clone(), x);
    }
    let total: f64 = w.values().sum();
    let n = w.len() as f64;
    for v in w.values_mut() {
        *v = if total > 0.0 { *v / total } else { 1.0 / n };
    }
    w
}

pub fn oracle_entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    let mut h = 0.0;
    for x in p {
        if x > 0.0 {
            h -= x * x.log2();
        }
    }
    h
}

/// Information gain by enumerating both answers.
pub fn oracle_ig(adj: &BTreeMap<EntityId, BTreeSet<EntityId>>, post: &BTreeMap<EntityId, f64>, s: &EntityId, eps: f64) -> f64 {
    let mut branches = Vec::new();
    for polarity in [Polarity::Present, Polarity::Absent] {
        let joint: Vec<f64> = post
            .iter()
            .map(|(d, p)| p * answer_factor(oracle_likelihood(adj, d, s, eps), polarity, eps))
            .collect();
        branches.push(joint);
    }
    let p_yes: f64 = post.iter().map(|(d, p)| p * oracle_likelihood(adj, d, s, eps)).sum();
    let mut expected = 0.0;
    for (joint, weight) in branches.iter().zip([p_yes, 1.0 - p_yes]) {
        let z: f64 = joint.iter().sum();
        if weight > 0.0 && z > 0.0 {
            expected += weight * oracle_entropy(joint.iter().map(|x| x / z));
        }
    }
    oracle_entropy(post.values().copied()) - expected
}

/// Eligible symptoms ranked by oracle IG, descending. Gains are compared on
/// a 1e-9 grid; equal gains fall back to ascending id.
pub fn oracle_ranking(
    adj: &BTreeMap<EntityId, BTreeSet<EntityId>>,
    post: &BTreeMap<EntityId, f64>,
    eligible: &[EntityId],
    eps: f64,
) -> Vec<(EntityId, f64)> {
    oracle_ranking_at(adj, post, eligible, eps, 1e-9)
}

/// [`oracle_ranking`] with an explicit comparison grid.
pub fn oracle_ranking_at(
    adj: &BTreeMap<EntityId, BTreeSet<EntityId>>,
    post: &BTreeMap<EntityId, f64>,
    eligible: &[EntityId],
    eps: f64,
    grid: f64,
) -> Vec<(EntityId, f64)> {
    let mut scored: Vec<(EntityId, f64)> = eligible.iter().map(|s| (s.clone(), oracle_ig(adj, post, s, eps))).collect();
    let key = |x: f64| (x / grid).round() as i64;
    scored.sort_by(|a, b| key(b.1).cmp(&key(a.1)).then_with(|| a.0.cmp(&b.0)));
    scored
}

pub fn oracle_argmax(post: &BTreeMap<EntityId, f64>) -> EntityId {
    let mut best: Option<(&EntityId, f64)> = None;
    for (d, p) in post {
        if best.is_none_or(|(_, b)| *p > b) {
            best = Some((d, *p));
        }
    }
    best.unwrap().0.clone()
}

/// Unasked symptoms whose surprising answer moves the argmax, checked by
/// recomputing the posterior from scratch.
pub fn oracle_refuters(
    adj: &BTreeMap<EntityId, BTreeSet<EntityId>>,
    post: &BTreeMap<EntityId, f64>,
    leader: &EntityId,
    eligible: &[EntityId],
    eps: f64,
) -> Vec<EntityId> {
    let weights: Vec<(EntityId, f64)> = post.iter().map(|(d, p)| (d.clone(), *p)).collect();
    eligible
        .iter()
        .filter(|s| {
            let surprise = if adj[leader].contains(*s) {
                Polarity::Absent
            } else {
                Polarity::Present
            };
            let w: Vec<(EntityId, f64)> = weights
                .iter()
                .map(|(d, p)| (d.clone(), p * answer_factor(oracle_likelihood(adj, d, s, eps), surprise, eps)))
                .collect();
            let mut best: Option<(&EntityId, f64)> = None;
            for (d, x) in &w {
                if *x > 0.0 && best.is_none_or(|(_, b)| *x > b) {
                    best = Some((d, *x));
                }
            }
            best.is_some_and(|(d, _)| d != leader)
        })
        .cloned()
        .collect()
}

/// Full-matrix edit distance over chars.
#[allow(clippy::needless_range_loop)]
pub fn naive_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        m[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = m[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

/// D1 connects fever and cough; D2 connects cough and sneeze.
pub fn tiny_kg() -> dxgraph::KnowledgeGraph {
    use dxgraph::kg::{Edge, EntityKind, KgEntity, Relation};
    let ents = [
        ("D1", EntityKind::Disease, "Influenza"),
        ("D2", EntityKind::Disease, "Common cold"),
        ("fever", EntityKind::Symptom, "fever"),
        ("cough", EntityKind::Symptom, "cough"),
        ("sneeze", EntityKind::Symptom, "sneeze"),
    ];
    let edges = [("D1", "fever"), ("D1", "cough"), ("D2", "cough"), ("D2", "sneeze")];
    dxgraph::KnowledgeGraph::from_parts(
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
    .unwrap()
}

/// Path to a file under the repository's `data/` directory.
pub fn data_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

// ---- shared property checks, used by the proptest suite and by the
// ---- acceptance runner

use dxgraph::inference::{entropy, information_gain, posterior, InferenceConfig};
use dxgraph::record::{Demographics, OsceRecord, RecordUpdate};
use proptest::test_runner::TestCaseError;

/// Normalization, agreement with direct Bayes, entropy bounds and IG sign.
pub fn check_inference(f: &Fixture, eps: f64) -> Result<(), TestCaseError> {
    let cfg = InferenceConfig {
        epsilon: eps,
        ..Default::default()
    };
    let sub = f.subgraph();
    let d = posterior(&f.prior(), &sub, &f.evidence_state(), &cfg);
    let total: f64 = d.entries().iter().map(|c| c.probability).sum();
    prop_assert!((total - 1.0).abs() <= 1e-9, "sum {}", total);

    let want = oracle_posterior(&f.adjacency, &f.weights, &f.positives(), &f.negatives(), eps);
    for c in d.entries() {
        prop_assert!((c.probability - want[&c.disease]).abs() <= 1e-9, "{}: {} vs {}", c.disease, c.probability, want[&c.disease]);
    }

    let h = entropy(&d);
    prop_assert!(h >= 0.0 && h <= (d.len() as f64).log2() + 1e-12, "H = {}", h);
    for s in f.symptoms() {
        let ig = information_gain(&sub, &d, &s, &cfg).unwrap();
        prop_assert!(ig >= -1e-9, "IG({}) = {}", s, ig);
        prop_assert!(ig <= h + 1e-9);
    }
    Ok(())
}

/// A graph where every disease has `k` symptoms including a shared `u`,
/// with an integer prior.
#[derive(Debug, Clone)]
pub struct RegularFixture {
    pub adjacency: BTreeMap<EntityId, BTreeSet<EntityId>>,
    pub weights: Vec<(EntityId, f64)>,
}

pub fn regular_fixture() -> impl Strategy<Value = RegularFixture> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(nd, k)| {
        (
            proptest::collection::vec(proptest::collection::btree_set(0usize..11, k - 1), nd),
            proptest::collection::vec(1u32..=5, nd),
        )
            .prop_map(move |(picks, weights)| RegularFixture {
                adjacency: picks
                    .into_iter()
                    .enumerate()
                    .map(|(d, p)| {
                        let mut n: BTreeSet<EntityId> = p.into_iter().map(|s| id(&format!("s{s:02}"))).collect();
                        n.insert(id("u"));
                        (id(&format!("d{d}")), n)
                    })
                    .collect(),
                weights: weights
                    .into_iter()
                    .enumerate()
                    .map(|(d, w)| (id(&format!("d{d}")), f64::from(w)))
                    .collect(),
            })
    })
}

/// A symptom with the same likelihood under every candidate carries no
/// information.
pub fn check_uniform_gain(f: &RegularFixture) -> Result<(), TestCaseError> {
    let sub = DiagnosticSubgraph::from_adjacency(f.adjacency.clone().into_iter().collect());
    let prior = DifferentialSet::from_weights(f.weights.clone()).unwrap();
    for eps in [0.0, 1e-9] {
        let cfg = InferenceConfig {
            epsilon: eps,
            ..Default::default()
        };
        let ig = information_gain(&sub, &prior, &id("u"), &cfg).unwrap();
        prop_assert!(ig.abs() <= 1e-12, "IG = {}", ig);
    }
    Ok(())
}

pub const VOCAB: [&str; 6] = ["fever", "cough", "nausea", "Vomiting", "flank pain", "rash"];

#[derive(Debug, Clone)]
pub struct Step {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    pub exam: Option<(usize, usize)>,
    pub advance: bool,
}

pub fn steps() -> impl Strategy<Value = Vec<Step>> {
    proptest::collection::vec(
        (
            proptest::collection::btree_set(0usize..6, 0..3),
            proptest::collection::btree_set(0usize..6, 0..3),
            proptest::option::of((0usize..3, 0usize..2)),
            any::<bool>(),
        )
            .prop_map(|(p, n, exam, advance)| Step {
                neg: n.difference(&p).copied().collect(),
                pos: p.into_iter().collect(),
                exam,
                advance,
            }),
        0..12,
    )
}

fn to_update(turn: u32, s: &Step) -> RecordUpdate {
    RecordUpdate {
        turn,
        new_positives: s.pos.iter().map(|&i| VOCAB[i].to_owned()).collect(),
        new_negatives: s.neg.iter().map(|&i| VOCAB[i].to_uppercase()).collect(),
        new_exams: s
            .exam
            .map(|(e, r)| vec![(format!("exam {e}"), format!("result {r}"))])
            .unwrap_or_default(),
    }
}

/// Exclusivity, latest-answer-wins, preservation, idempotence modulo the
/// revision counter, and JSON round-trip after every update.
pub fn check_record_laws(seq: &[Step]) -> Result<(), TestCaseError> {
    let mut record = OsceRecord::new(Demographics::parse("30-year-old female"), "abdominal pain").unwrap();
    let mut model: BTreeMap<String, Polarity> = BTreeMap::new();
    let mut turn = 0;
    for s in seq {
        if s.advance {
            turn += 1;
        }
        let u = to_update(turn, s);
        let (next, _) = record.apply_update(&u).unwrap();

        let names: BTreeSet<&str> = next.symptoms.iter().map(|e| e.name.as_str()).collect();
        prop_assert_eq!(names.len(), next.symptoms.len(), "duplicate symptom entry");

        for &i in &s.pos {
            model.insert(VOCAB[i].to_lowercase(), Polarity::Present);
        }
        for &i in &s.neg {
            model.insert(VOCAB[i].to_lowercase(), Polarity::Absent);
        }
        for (name, p) in &model {
            prop_assert_eq!(next.polarity_of(name), Some(*p));
        }

        let touched: BTreeSet<String> = s.pos.iter().chain(&s.neg).map(|&i| VOCAB[i].to_lowercase()).collect();
        for e in &record.symptoms {
            if !touched.contains(&e.name) {
                prop_assert!(next.symptoms.contains(e), "untouched entry {:?} changed", e);
            }
        }
        for e in &record.examinations {
            if s.exam.is_none_or(|(x, _)| e.name != format!("exam {x}")) {
                prop_assert!(next.examinations.contains(e));
            }
        }

        let (twice, audit) = next.apply_update(&u).unwrap();
        prop_assert_eq!(&twice.symptoms, &next.symptoms);
        prop_assert_eq!(&twice.examinations, &next.examinations);
        prop_assert!(audit.is_empty());
        prop_assert_eq!(twice.revision, next.revision + 1);

        prop_assert!(next.symptoms.windows(2).all(|w| w[0].turn <= w[1].turn));
        prop_assert!(next.examinations.windows(2).all(|w| w[0].turn <= w[1].turn));
        prop_assert_eq!(next.revision, record.revision + 1);
        prop_assert_eq!(OsceRecord::from_json(&next.to_json()).unwrap(), next.clone());
        record = next;
    }
    Ok(())
}
