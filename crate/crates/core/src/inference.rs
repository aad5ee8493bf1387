//! Bayesian differential over candidate diseases and information-gain
//! ranking of symptom questions.
//!
//! Likelihoods follow a uniform model over the knowledge graph: a disease
//! manifests each of its connected symptoms with probability `1/|N(D)|`;
//! unconnected symptoms get the floor `epsilon`. Symptoms are conditionally
//! independent given the disease. All entropies are in bits.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{cosine, embed_checked, EmbeddingError, EmbeddingProvider};
use crate::kg::{DiagnosticSubgraph, EntityId, KgError, KnowledgeGraph};
use crate::record::Polarity;

/// IG values are compared at this resolution so that symmetric symptoms
/// tie exactly regardless of summation order.
pub const IG_RESOLUTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Size of the proposed differential.
    pub n_candidates: usize,
    /// Plan length as a multiple of the differential size.
    pub k_ratio: f64,
    /// Floor substituted for zero likelihoods. `0.0` gives exact Bayes.
    pub epsilon: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_candidates: 5,
            k_ratio: 1.0,
            epsilon: 1e-9,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.n_candidates == 0 {
            return Err(InferenceError::Config("n_candidates must be at least 1".into()));
        }
        if self.k_ratio.is_nan() || self.k_ratio <= 0.0 {
            return Err(InferenceError::Config("k_ratio must be positive".into()));
        }
        if !(0.0..1e-3).contains(&self.epsilon) {
            return Err(InferenceError::Config("epsilon must be in [0, 1e-3)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("knowledge graph has no diseases")]
    EmptyGraph,
    #[error("differential is empty")]
    EmptyDifferential,
    #[error("symptom {0} is not in the diagnostic subgraph")]
    SymptomOutsideSubgraph(EntityId),
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Graph(#[from] KgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub disease: EntityId,
    pub probability: f64,
}

/// Ranked candidate diseases with normalized probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialSet {
    entries: Vec<Candidate>,
    provenance: BTreeMap<EntityId, f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    degenerate: bool,
}

impl DifferentialSet {
    /// Normalize non-negative weights into a ranked distribution. If every
    /// weight is zero the result is uniform and flagged degenerate.
    pub fn from_weights(weights: Vec<(EntityId, f64)>) -> Result<Self, InferenceError> {
        if weights.is_empty() {
            return Err(InferenceError::EmptyDifferential);
        }
        let total = sorted_sum(weights.iter().map(|(_, w)| *w));
        let degenerate = !(total > 0.0 && total.is_finite());
        let n = weights.len() as f64;
        let mut entries: Vec<Candidate> = weights
            .into_iter()
            .map(|(disease, w)| Candidate {
                disease,
                probability: if degenerate { 1.0 / n } else { w / total },
            })
            .collect();
        sort_candidates(&mut entries);
        let provenance = entries
            .iter()
            .map(|c| (c.disease.clone(), c.probability))
            .collect();
        Ok(Self {
            entries,
            provenance,
            degenerate,
        })
    }

    pub fn uniform(diseases: &[EntityId]) -> Result<Self, InferenceError> {
        Self::from_weights(diseases.iter().map(|d| (d.clone(), 1.0)).collect())
    }

    fn with_provenance(mut self, provenance: BTreeMap<EntityId, f64>) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    /// Prior probabilities before any evidence was applied.
    pub fn provenance(&self) -> &BTreeMap<EntityId, f64> {
        &self.provenance
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Highest-probability disease; ties resolved by ascending id.
    pub fn leader(&self) -> &EntityId {
        &self.entries[0].disease
    }

    pub fn probability(&self, disease: &EntityId) -> Option<f64> {
        self.entries
            .iter()
            .find(|c| &c.disease == disease)
            .map(|c| c.probability)
    }

    pub fn ids(&self) -> Vec<EntityId> {
        self.entries.iter().map(|c| c.disease.clone()).collect()
    }
}

/// Probabilities below this are treated as eliminated when ranking.
pub const RANK_FLOOR: f64 = 1e-6;

fn rank_key(p: f64) -> f64 {
    if p < RANK_FLOOR {
        0.0
    } else {
        p
    }
}

fn sort_candidates(entries: &mut [Candidate]) {
    entries.sort_by(|a, b| {
        rank_key(b.probability)
            .total_cmp(&rank_key(a.probability))
            .then_with(|| a.disease.cmp(&b.disease))
    });
}

/// Order-independent sum: terms are added smallest first.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Accumulated patient evidence. Positive and negative sets stay disjoint:
/// re-recording a symptom with the opposite polarity moves it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceState {
    s_pos: IndexSet<EntityId>,
    s_neg: IndexSet<EntityId>,
    asked: IndexSet<EntityId>,
    reported: IndexSet<EntityId>,
}

impl EvidenceState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Symptom volunteered by the patient without being asked.
    pub fn report(&mut self, symptom: EntityId, polarity: Polarity) {
        self.reported.insert(symptom.clone());
        self.record(symptom, polarity);
    }

    pub fn mark_asked(&mut self, symptom: EntityId) {
        self.asked.insert(symptom);
    }

    /// Record an answer for a symptom that was asked or reported.
    pub fn record(&mut self, symptom: EntityId, polarity: Polarity) {
        match polarity {
            Polarity::Present => {
                self.s_neg.shift_remove(&symptom);
                self.s_pos.insert(symptom);
            }
            Polarity::Absent => {
                self.s_pos.shift_remove(&symptom);
                self.s_neg.insert(symptom);
            }
        }
    }

    pub fn positives(&self) -> &IndexSet<EntityId> {
        &self.s_pos
    }

    pub fn negatives(&self) -> &IndexSet<EntityId> {
        &self.s_neg
    }

    pub fn asked(&self) -> &IndexSet<EntityId> {
        &self.asked
    }

    pub fn reported(&self) -> &IndexSet<EntityId> {
        &self.reported
    }

    /// Whether the symptom has been asked or already carries evidence.
    pub fn is_settled(&self, symptom: &EntityId) -> bool {
        self.asked.contains(symptom) || self.s_pos.contains(symptom) || self.s_neg.contains(symptom)
    }

    pub fn from_sets(
        positives: impl IntoIterator<Item = EntityId>,
        negatives: impl IntoIterator<Item = EntityId>,
    ) -> Self {
        let mut e = Self::default();
        for s in positives {
            e.report(s, Polarity::Present);
        }
        for s in negatives {
            e.report(s, Polarity::Absent);
        }
        e
    }
}

/// Propose the differential by knowledge-graph retrieval.
///
/// Score = number of positive symptoms connected to the disease plus the
/// mean cosine similarity between the positive symptoms and the disease
/// name (when a provider is available). Equal scores are ordered by the
/// number of denied symptoms connected to the disease, fewest first, then
/// by id. With no positives every score is zero.
pub fn propose_candidates(
    kg: &KnowledgeGraph,
    evidence: &EvidenceState,
    provider: Option<&dyn EmbeddingProvider>,
    cfg: &InferenceConfig,
) -> Result<Vec<EntityId>, InferenceError> {
    if kg.disease_count() == 0 {
        return Err(InferenceError::EmptyGraph);
    }
    let positives = evidence.positives();
    let mut denied: HashMap<&EntityId, usize> = HashMap::new();
    for s in evidence.negatives() {
        for d in kg.diseases_with(s) {
            *denied.entry(d).or_default() += 1;
        }
    }
    let denied_count = |d: &EntityId| denied.get(d).copied().unwrap_or(0);
    if positives.is_empty() {
        let mut ids: Vec<&EntityId> = kg.diseases().collect();
        ids.sort_by_key(|d| denied_count(d));
        return Ok(ids.into_iter().take(cfg.n_candidates).cloned().collect());
    }

    let mut overlap: HashMap<&EntityId, usize> = HashMap::new();
    for s in positives {
        for d in kg.diseases_with(s) {
            *overlap.entry(d).or_default() += 1;
        }
    }

    let symptom_vectors = match provider {
        Some(p) => Some(embed_names(kg, positives.iter(), p)?),
        None => None,
    };

    let mut scored = Vec::with_capacity(kg.disease_count());
    for d in kg.diseases() {
        let mut score = overlap.get(d).copied().unwrap_or(0) as f64;
        if let (Some(p), Some(vectors)) = (provider, symptom_vectors.as_ref()) {
            score += mean_similarity(kg, d, vectors, p)?;
        }
        scored.push((score, d));
    }
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| denied_count(a.1).cmp(&denied_count(b.1)))
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(scored
        .into_iter()
        .take(cfg.n_candidates)
        .map(|(_, d)| d.clone())
        .collect())
}

fn embed_names<'a>(
    kg: &KnowledgeGraph,
    ids: impl Iterator<Item = &'a EntityId>,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<Option<Vec<f64>>>, EmbeddingError> {
    ids.map(|id| match kg.name_of(id) {
        Some(name) => embed_checked(provider, name),
        None => Ok(None),
    })
    .collect()
}

/// Mean cosine between the given symptom vectors and the disease name.
/// Missing vectors contribute 0.
fn mean_similarity(
    kg: &KnowledgeGraph,
    disease: &EntityId,
    symptom_vectors: &[Option<Vec<f64>>],
    provider: &dyn EmbeddingProvider,
) -> Result<f64, EmbeddingError> {
    if symptom_vectors.is_empty() {
        return Ok(0.0);
    }
    let Some(dv) = kg
        .name_of(disease)
        .map(|n| embed_checked(provider, n))
        .transpose()?
        .flatten()
    else {
        return Ok(0.0);
    };
    let total: f64 = symptom_vectors
        .iter()
        .map(|sv| sv.as_ref().map_or(0.0, |sv| cosine(sv, &dv)))
        .sum();
    Ok(total / symptom_vectors.len() as f64)
}

/// Prior from mean semantic similarity of confirmed symptoms to each
/// candidate, floored at `epsilon` and normalized. Uniform when there are no
/// positives or no provider.
pub fn init_prior(
    kg: &KnowledgeGraph,
    differential: &[EntityId],
    positives: &IndexSet<EntityId>,
    provider: Option<&dyn EmbeddingProvider>,
    cfg: &InferenceConfig,
) -> Result<DifferentialSet, InferenceError> {
    if differential.is_empty() {
        return Err(InferenceError::EmptyDifferential);
    }
    let provider = match provider {
        Some(p) if !positives.is_empty() => p,
        _ => return DifferentialSet::uniform(differential),
    };
    let vectors = embed_names(kg, positives.iter(), provider)?;
    let mut raw = Vec::with_capacity(differential.len());
    for d in differential {
        let sim = mean_similarity(kg, d, &vectors, provider)?;
        raw.push((d.clone(), sim.max(cfg.epsilon)));
    }
    let prior = DifferentialSet::from_weights(raw)?;
    // all-zero raw scores fall back to uniform, which is not a degeneracy of the evidence
    Ok(DifferentialSet {
        degenerate: false,
        ..prior
    })
}

/// P(s | D) under the uniform model.
pub fn likelihood(
    sub: &DiagnosticSubgraph,
    disease: &EntityId,
    symptom: &EntityId,
    cfg: &InferenceConfig,
) -> f64 {
    match sub.neighbors(disease) {
        Some(n) if n.contains(symptom) => (1.0 / n.len() as f64).max(cfg.epsilon),
        _ => cfg.epsilon,
    }
}

fn answer_likelihood(p_present: f64, polarity: Polarity, cfg: &InferenceConfig) -> f64 {
    match polarity {
        Polarity::Present => p_present,
        Polarity::Absent => (1.0 - p_present).max(cfg.epsilon),
    }
}

/// Condition `prior` on all accumulated evidence.
pub fn posterior(
    prior: &DifferentialSet,
    sub: &DiagnosticSubgraph,
    evidence: &EvidenceState,
    cfg: &InferenceConfig,
) -> DifferentialSet {
    if evidence.positives().is_empty() && evidence.negatives().is_empty() {
        return prior.clone();
    }
    let log_weights: Vec<(EntityId, f64)> = prior
        .entries()
        .iter()
        .map(|c| {
            let mut lw = c.probability.ln();
            for s in evidence.positives() {
                lw += answer_likelihood(likelihood(sub, &c.disease, s, cfg), Polarity::Present, cfg).ln();
            }
            for s in evidence.negatives() {
                lw += answer_likelihood(likelihood(sub, &c.disease, s, cfg), Polarity::Absent, cfg).ln();
            }
            (c.disease.clone(), lw)
        })
        .collect();
    let max = log_weights
        .iter()
        .map(|(_, lw)| *lw)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights = log_weights
        .into_iter()
        .map(|(d, lw)| {
            let w = if max.is_finite() { (lw - max).exp() } else { 0.0 };
            (d, w)
        })
        .collect();
    DifferentialSet::from_weights(weights)
        .expect("prior is non-empty")
        .with_provenance(prior.provenance().clone())
}

/// Shannon entropy in bits, with 0·log 0 = 0.
pub fn entropy_bits(probabilities: &[f64]) -> f64 {
    let h = -sorted_sum(
        probabilities
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.log2()),
    );
    h.max(0.0)
}

pub fn entropy(d: &DifferentialSet) -> f64 {
    let p: Vec<f64> = d.entries().iter().map(|c| c.probability).collect();
    entropy_bits(&p)
}

/// Entropy of the normalized weights, and their total mass.
fn branch(weights: &[f64]) -> (f64, f64) {
    let total = sorted_sum(weights.iter().copied());
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
    (total, entropy_bits(&p))
}

fn gain(sub: &DiagnosticSubgraph, d: &DifferentialSet, symptom: &EntityId, cfg: &InferenceConfig) -> f64 {
    let h = entropy(d);
    let mut pos = Vec::with_capacity(d.len());
    let mut neg = Vec::with_capacity(d.len());
    for c in d.entries() {
        let l = likelihood(sub, &c.disease, symptom, cfg);
        pos.push(c.probability * answer_likelihood(l, Polarity::Present, cfg));
        neg.push(c.probability * answer_likelihood(l, Polarity::Absent, cfg));
    }
    let (p_present, h_pos) = branch(&pos);
    let (_, h_neg) = branch(&neg);
    let p_present = p_present.min(1.0);
    h - (p_present * h_pos + (1.0 - p_present) * h_neg)
}

/// Expected entropy reduction, in bits, from learning whether `symptom` is
/// present.
pub fn information_gain(
    sub: &DiagnosticSubgraph,
    d: &DifferentialSet,
    symptom: &EntityId,
    cfg: &InferenceConfig,
) -> Result<f64, InferenceError> {
    if !sub.symptoms.contains(symptom) {
        return Err(InferenceError::SymptomOutsideSubgraph(symptom.clone()));
    }
    Ok(gain(sub, d, symptom, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSymptom {
    pub symptom: EntityId,
    pub ig: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InquiryPlan {
    pub ranked: Vec<ScoredSymptom>,
    /// Next question; `None` when no askable symptom remains.
    pub chosen: Option<EntityId>,
}

impl InquiryPlan {
    pub fn is_empty(&self) -> bool {
        self.chosen.is_none()
    }

    pub fn ig_of(&self, symptom: &EntityId) -> Option<f64> {
        self.ranked.iter().find(|s| &s.symptom == symptom).map(|s| s.ig)
    }
}

/// Symptoms in the subgraph that have not been asked and carry no evidence.
pub fn eligible_symptoms<'a>(
    sub: &'a DiagnosticSubgraph,
    evidence: &'a EvidenceState,
) -> impl Iterator<Item = &'a EntityId> + 'a {
    sub.symptoms.iter().filter(move |s| !evidence.is_settled(s))
}

fn ig_key(ig: f64) -> i64 {
    (ig / IG_RESOLUTION).round() as i64
}

/// Order by IG descending (at [`IG_RESOLUTION`]), then symptom id ascending.
pub fn compare_scored(a: &ScoredSymptom, b: &ScoredSymptom) -> Ordering {
    ig_key(b.ig)
        .cmp(&ig_key(a.ig))
        .then_with(|| a.symptom.cmp(&b.symptom))
}

/// IG of every eligible symptom, best first.
pub fn score_eligible(
    sub: &DiagnosticSubgraph,
    d: &DifferentialSet,
    evidence: &EvidenceState,
    cfg: &InferenceConfig,
) -> Vec<ScoredSymptom> {
    let mut scored: Vec<ScoredSymptom> = eligible_symptoms(sub, evidence)
        .map(|s| ScoredSymptom {
            symptom: s.clone(),
            ig: gain(sub, d, s, cfg),
        })
        .collect();
    scored.sort_by(compare_scored);
    scored
}

/// Number of entries kept in an inquiry plan for a differential of size `n`.
pub fn plan_size(cfg: &InferenceConfig, n: usize) -> usize {
    ((cfg.k_ratio * n as f64).round() as usize).max(1)
}

pub fn rank_inquiries(
    sub: &DiagnosticSubgraph,
    d: &DifferentialSet,
    evidence: &EvidenceState,
    cfg: &InferenceConfig,
) -> InquiryPlan {
    let mut ranked = score_eligible(sub, d, evidence, cfg);
    ranked.truncate(plan_size(cfg, d.len()));
    let chosen = ranked.first().map(|s| s.symptom.clone());
    InquiryPlan { ranked, chosen }
}

fn argmax(weights: &[(EntityId, f64)]) -> Option<&EntityId> {
    weights
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .map(|(d, _)| d)
}

/// Unasked symptoms whose surprising answer would change the leading
/// diagnosis. A symptom is expected present under the leader iff the leader
/// is connected to it; the opposite answer is applied to the current
/// posterior. Returned best-IG first.
pub fn refutation_candidates(
    sub: &DiagnosticSubgraph,
    d: &DifferentialSet,
    evidence: &EvidenceState,
    cfg: &InferenceConfig,
) -> Vec<ScoredSymptom> {
    if d.len() < 2 {
        return Vec::new();
    }
    let leader = d.leader();
    let leader_symptoms = sub.neighbors(leader);
    score_eligible(sub, d, evidence, cfg)
        .into_iter()
        .filter(|s| {
            let expected_present = leader_symptoms.is_some_and(|n| n.contains(&s.symptom));
            let surprise = if expected_present {
                Polarity::Absent
            } else {
                Polarity::Present
            };
            let weights: Vec<(EntityId, f64)> = d
                .entries()
                .iter()
                .map(|c| {
                    let l = likelihood(sub, &c.disease, &s.symptom, cfg);
                    (c.disease.clone(), c.probability * answer_likelihood(l, surprise, cfg))
                })
                .collect();
            argmax(&weights).is_some_and(|new_leader| new_leader != leader)
        })
        .collect()
}
