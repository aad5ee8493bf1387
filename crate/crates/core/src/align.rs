//! Mapping free-text medical terms onto knowledge-graph entities.
//!
//! Alignment runs a strict cascade: normalized exact match, then bounded
//! Levenshtein distance, then (when an embedding provider is configured)
//! cosine similarity against entity-name embeddings with a floor `tau`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, EntityKind, KnowledgeGraph};
use crate::session::OracleAnswer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub max_edit_distance: usize,
    pub tau: f64,
    pub case_sensitive: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_edit_distance: 3,
            tau: 0.85,
            case_sensitive: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(AlignError::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStage {
    Exact,
    EditDistance,
    Embedding,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub query: String,
    pub matched: Option<EntityId>,
    pub stage: AlignStage,
    /// 0 for exact hits, the edit distance for edit-distance hits, cosine
    /// similarity for embedding hits.
    pub score: f64,
}

impl AlignmentResult {
    fn none(query: &str) -> Self {
        Self {
            query: query.to_owned(),
            matched: None,
            stage: AlignStage::None,
            score: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("embedding provider error: {0}")]
    Provider(#[from] EmbeddingError),
    #[error("contradictory answer: {0:?} both asserted and denied")]
    Contradictory(String),
    #[error("invalid alignment config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Error)]
pub enum EmbeddingError {
    #[error("expected a {expected}-dimensional vector, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("vector file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EmbeddingError {
    fn from(e: std::io::Error) -> Self {
        EmbeddingError::Io(e.to_string())
    }
}

/// Trim, collapse internal whitespace, and lowercase unless `case_sensitive`.
pub fn normalize_term(raw: &str, case_sensitive: bool) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if case_sensitive {
        collapsed
    } else {
        collapsed.to_lowercase()
    }
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let subst = prev[j] + usize::from(ca != cb);
            cur[j + 1] = subst.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

/// Source of fixed-length name embeddings.
///
/// `Ok(None)` means the provider has no vector for the text; the caller
/// treats that as "no semantic evidence" rather than a fault.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Option<Vec<f64>>, EmbeddingError>;
}

/// Embed and check the returned dimension.
pub fn embed_checked(
    provider: &dyn EmbeddingProvider,
    text: &str,
) -> Result<Option<Vec<f64>>, EmbeddingError> {
    match provider.embed(text)? {
        Some(v) if v.len() != provider.dimension() => Err(EmbeddingError::Dimension {
            expected: provider.dimension(),
            got: v.len(),
        }),
        other => Ok(other),
    }
}

/// Precomputed name → vector table. Lookups are whitespace- and
/// case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct VectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        if vector.len() != self.dim {
            return Err(EmbeddingError::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        self.vectors.insert(normalize_term(name, false), vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Parse `#dim=<d>` followed by `name<TAB>v1,v2,...` rows.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut table: Option<VectorTable> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some(d) = rest.trim().strip_prefix("dim=") {
                    if table.is_some() {
                        return Err(EmbeddingError::Parse {
                            line: line_no,
                            message: "duplicate #dim header".into(),
                        });
                    }
                    let dim = d.trim().parse::<usize>().ok().filter(|d| *d > 0).ok_or_else(|| {
                        EmbeddingError::Parse {
                            line: line_no,
                            message: format!("bad dimension {d:?}"),
                        }
                    })?;
                    table = Some(VectorTable::new(dim));
                }
                continue;
            }
            let table = table.as_mut().ok_or_else(|| EmbeddingError::Parse {
                line: line_no,
                message: "vector row before #dim header".into(),
            })?;
            let (name, values) = line.split_once('\t').ok_or_else(|| EmbeddingError::Parse {
                line: line_no,
                message: "expected name<TAB>values".into(),
            })?;
            let vector = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EmbeddingError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            table.insert(name, vector).map_err(|e| EmbeddingError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        }
        table.ok_or(EmbeddingError::Parse {
            line: 0,
            message: "missing #dim header".into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

impl EmbeddingProvider for VectorTable {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Option<Vec<f64>>, EmbeddingError> {
        Ok(self.vectors.get(&normalize_term(text, false)).cloned())
    }
}

/// Deterministic character-trigram hashing embedder. Not semantically
/// meaningful beyond surface overlap; intended for hermetic runs.
#[derive(Debug, Clone, Copy)]
pub struct TrigramHashProvider {
    dim: usize,
}

impl TrigramHashProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim }
    }
}

impl Default for TrigramHashProvider {
    fn default() -> Self {
        Self::new(256)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for TrigramHashProvider {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Option<Vec<f64>>, EmbeddingError> {
        let padded: Vec<char> = format!("  {} ", normalize_term(text, false)).chars().collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        for w in padded.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a(&buf[..len]);
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Some(v))
    }
}

/// Memoizing wrapper; successful lookups (including misses) are cached.
pub struct CachedProvider {
    inner: Arc<dyn EmbeddingProvider>,
    cache: RwLock<HashMap<String, Option<Vec<f64>>>>,
}

impl CachedProvider {
    pub fn new(inner: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl EmbeddingProvider for CachedProvider {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<Option<Vec<f64>>, EmbeddingError> {
        if let Some(hit) = self.cache.read().expect("embedding cache poisoned").get(text) {
            return Ok(hit.clone());
        }
        let v = embed_checked(self.inner.as_ref(), text)?;
        self.cache
            .write()
            .expect("embedding cache poisoned")
            .insert(text.to_owned(), v.clone());
        Ok(v)
    }
}

struct IndexedName {
    id: EntityId,
    name: String,
    chars: Vec<char>,
}

#[derive(Default)]
struct KindIndex {
    // sorted by id
    entries: Vec<IndexedName>,
    exact: HashMap<String, usize>,
    vectors: OnceLock<Vec<Option<Vec<f64>>>>,
}

impl KindIndex {
    fn vectors(&self, provider: &dyn EmbeddingProvider) -> Result<&[Option<Vec<f64>>], EmbeddingError> {
        if let Some(v) = self.vectors.get() {
            return Ok(v);
        }
        let computed = self
            .entries
            .iter()
            .map(|e| embed_checked(provider, &e.name))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.vectors.get_or_init(|| computed))
    }
}

/// Reusable alignment index over one knowledge graph.
pub struct Aligner {
    cfg: AlignConfig,
    provider: Option<Arc<dyn EmbeddingProvider>>,
    diseases: KindIndex,
    symptoms: KindIndex,
}

impl Aligner {
    pub fn new(
        kg: &KnowledgeGraph,
        provider: Option<Arc<dyn EmbeddingProvider>>,
        cfg: AlignConfig,
    ) -> Result<Self, AlignError> {
        cfg.validate()?;
        let mut diseases = KindIndex::default();
        let mut symptoms = KindIndex::default();
        for e in kg.entities() {
            let index = match e.kind {
                EntityKind::Disease => &mut diseases,
                EntityKind::Symptom => &mut symptoms,
            };
            let norm = normalize_term(&e.name, cfg.case_sensitive);
            let pos = index.entries.len();
            // entities iterate in id order, so the first entry per name is the smallest id
            index.exact.entry(norm.clone()).or_insert(pos);
            index.entries.push(IndexedName {
                id: e.id.clone(),
                name: e.name.clone(),
                chars: norm.chars().collect(),
            });
        }
        Ok(Self {
            cfg,
            provider,
            diseases,
            symptoms,
        })
    }

    pub fn config(&self) -> &AlignConfig {
        &self.cfg
    }

    pub fn provider(&self) -> Option<&Arc<dyn EmbeddingProvider>> {
        self.provider.as_ref()
    }

    fn index(&self, kind: EntityKind) -> &KindIndex {
        match kind {
            EntityKind::Disease => &self.diseases,
            EntityKind::Symptom => &self.symptoms,
        }
    }

    pub fn align(&self, query: &str, kind: EntityKind) -> Result<AlignmentResult, AlignError> {
        let norm = normalize_term(query, self.cfg.case_sensitive);
        if norm.is_empty() {
            return Ok(AlignmentResult::none(query));
        }
        let index = self.index(kind);

        if let Some(&pos) = index.exact.get(&norm) {
            return Ok(AlignmentResult {
                query: query.to_owned(),
                matched: Some(index.entries[pos].id.clone()),
                stage: AlignStage::Exact,
                score: 0.0,
            });
        }

        let q: Vec<char> = norm.chars().collect();
        let max = self.cfg.max_edit_distance;
        let mut best: Option<(usize, usize)> = None;
        for (pos, e) in index.entries.iter().enumerate() {
            if q.len().abs_diff(e.chars.len()) > max {
                continue;
            }
            let d = levenshtein_chars(&q, &e.chars);
            if d <= max && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, pos));
            }
        }
        if let Some((d, pos)) = best {
            return Ok(AlignmentResult {
                query: query.to_owned(),
                matched: Some(index.entries[pos].id.clone()),
                stage: AlignStage::EditDistance,
                score: d as f64,
            });
        }

        let Some(provider) = self.provider.as_deref() else {
            return Ok(AlignmentResult::none(query));
        };
        let Some(qv) = embed_checked(provider, query)? else {
            return Ok(AlignmentResult::none(query));
        };
        let vectors = index.vectors(provider)?;
        let mut best: Option<(f64, usize)> = None;
        for (pos, v) in vectors.iter().enumerate() {
            let Some(v) = v else { continue };
            let sim = cosine(&qv, v);
            if best.is_none_or(|(bs, _)| sim > bs) {
                best = Some((sim, pos));
            }
        }
        match best {
            Some((sim, pos)) if sim >= self.cfg.tau => Ok(AlignmentResult {
                query: query.to_owned(),
                matched: Some(index.entries[pos].id.clone()),
                stage: AlignStage::Embedding,
                score: sim,
            }),
            _ => Ok(AlignmentResult::none(query)),
        }
    }
}

/// One-shot alignment. Builds a throwaway index; prefer [`Aligner`] for
/// repeated queries against the same graph.
pub fn align(
    query: &str,
    kg: &KnowledgeGraph,
    kind: EntityKind,
    provider: Option<Arc<dyn EmbeddingProvider>>,
    cfg: AlignConfig,
) -> Result<AlignmentResult, AlignError> {
    Aligner::new(kg, provider, cfg)?.align(query, kind)
}

/// Split a structured oracle answer into asserted and denied terms.
pub fn extract_mentions(answer: &OracleAnswer) -> Result<(Vec<String>, Vec<String>), AlignError> {
    for p in &answer.asserted {
        let np = normalize_term(p, false);
        if answer.denied.iter().any(|n| normalize_term(n, false) == np) {
            return Err(AlignError::Contradictory(p.clone()));
        }
    }
    Ok((answer.asserted.clone(), answer.denied.clone()))
}
