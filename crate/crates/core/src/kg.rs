//! Disease–symptom knowledge graph: flat-file loader, validation, and
//! diagnostic subgraph extraction.
//!
//! The on-disk format is two tab-separated tables:
//!
//! ```text
//! # nodes: id<TAB>kind<TAB>name
//! D1<TAB>disease<TAB>Influenza
//! S1<TAB>symptom<TAB>Fever
//! # edges: src_id<TAB>relation<TAB>dst_id
//! D1<TAB>disease_symptom<TAB>S1
//! ```
//!
//! The graph is immutable once loaded and can be shared freely across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque, stable entity identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for EntityId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Disease,
    Symptom,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Disease => "disease",
            EntityKind::Symptom => "symptom",
        }
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "disease" => Ok(EntityKind::Disease),
            "symptom" => Ok(EntityKind::Symptom),
            other => Err(format!("unknown entity kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    DiseaseSymptom,
    DiseaseDisease,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::DiseaseSymptom => "disease_symptom",
            Relation::DiseaseDisease => "disease_disease",
        }
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "disease_symptom" => Ok(Relation::DiseaseSymptom),
            "disease_disease" => Ok(Relation::DiseaseDisease),
            other => Err(format!("unknown relation {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEntity {
    pub id: EntityId,
    pub name: String,
    pub kind: EntityKind,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: EntityId,
    pub relation: Relation,
    pub dst: EntityId,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{file} line {line}: {message}")]
    Parse {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("duplicate entity id {0:?}")]
    DuplicateEntity(EntityId),
    #[error("edge references missing entity {0:?}")]
    DanglingEndpoint(EntityId),
    #[error("invalid edge {src} {relation} {dst}: {reason}")]
    InvalidEdge {
        src: EntityId,
        relation: &'static str,
        dst: EntityId,
        reason: &'static str,
    },
    #[error("duplicate edge {src} {relation} {dst}")]
    DuplicateEdge {
        src: EntityId,
        relation: &'static str,
        dst: EntityId,
    },
    #[error("unknown entity {0:?}")]
    UnknownEntity(EntityId),
    #[error("{0:?} is not a disease")]
    NotADisease(EntityId),
    #[error("disease {0:?} appears twice in the differential")]
    DuplicateCandidate(EntityId),
    #[error("differential is empty")]
    EmptyDifferential,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Trim and collapse runs of whitespace to a single space. Case is preserved.
pub fn normalize_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Validated disease–symptom knowledge graph.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: BTreeMap<EntityId, KgEntity>,
    edges: BTreeSet<Edge>,
    symptoms_of: BTreeMap<EntityId, BTreeSet<EntityId>>,
    diseases_of: BTreeMap<EntityId, BTreeSet<EntityId>>,
}

impl KnowledgeGraph {
    /// Build and validate a graph from in-memory parts.
    pub fn from_parts(
        entities: impl IntoIterator<Item = KgEntity>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self, KgError> {
        let mut kg = KnowledgeGraph::default();
        for mut entity in entities {
            entity.name = normalize_whitespace(&entity.name);
            if entity.name.is_empty() {
                return Err(KgError::Parse {
                    file: "nodes",
                    line: 0,
                    message: format!("entity {} has an empty name", entity.id),
                });
            }
            if kg.entities.contains_key(&entity.id) {
                return Err(KgError::DuplicateEntity(entity.id));
            }
            if entity.kind == EntityKind::Disease {
                kg.symptoms_of.insert(entity.id.clone(), BTreeSet::new());
            }
            kg.entities.insert(entity.id.clone(), entity);
        }
        for edge in edges {
            kg.insert_edge(edge)?;
        }
        Ok(kg)
    }

    fn insert_edge(&mut self, edge: Edge) -> Result<(), KgError> {
        let src = self
            .entities
            .get(&edge.src)
            .ok_or_else(|| KgError::DanglingEndpoint(edge.src.clone()))?;
        let dst = self
            .entities
            .get(&edge.dst)
            .ok_or_else(|| KgError::DanglingEndpoint(edge.dst.clone()))?;
        let invalid = |reason| KgError::InvalidEdge {
            src: edge.src.clone(),
            relation: edge.relation.as_str(),
            dst: edge.dst.clone(),
            reason,
        };
        if edge.src == edge.dst {
            return Err(invalid("self-loop"));
        }
        match edge.relation {
            Relation::DiseaseSymptom => {
                if src.kind != EntityKind::Disease || dst.kind != EntityKind::Symptom {
                    return Err(invalid("disease_symptom must connect a disease to a symptom"));
                }
            }
            Relation::DiseaseDisease => {
                if src.kind != EntityKind::Disease || dst.kind != EntityKind::Disease {
                    return Err(invalid("disease_disease must connect two diseases"));
                }
            }
        }
        if self.edges.contains(&edge) {
            return Err(KgError::DuplicateEdge {
                src: edge.src,
                relation: edge.relation.as_str(),
                dst: edge.dst,
            });
        }
        if edge.relation == Relation::DiseaseSymptom {
            self.symptoms_of
                .entry(edge.src.clone())
                .or_default()
                .insert(edge.dst.clone());
            self.diseases_of
                .entry(edge.dst.clone())
                .or_default()
                .insert(edge.src.clone());
        }
        self.edges.insert(edge);
        Ok(())
    }

    /// Parse node and edge tables from readers.
    pub fn load<N: BufRead, E: BufRead>(nodes: N, edges: E) -> Result<Self, KgError> {
        let mut entities = Vec::new();
        for (line, fields) in rows(nodes, "nodes")? {
            let [id, kind, name] = fields;
            let kind = kind.parse::<EntityKind>().map_err(|message| KgError::Parse {
                file: "nodes",
                line,
                message,
            })?;
            let name = normalize_whitespace(&name);
            if name.is_empty() {
                return Err(KgError::Parse {
                    file: "nodes",
                    line,
                    message: "empty entity name".into(),
                });
            }
            entities.push(KgEntity {
                id: EntityId(id),
                name,
                kind,
            });
        }
        let mut parsed_edges = Vec::new();
        for (line, fields) in rows(edges, "edges")? {
            let [src, relation, dst] = fields;
            let relation = relation.parse::<Relation>().map_err(|message| KgError::Parse {
                file: "edges",
                line,
                message,
            })?;
            parsed_edges.push(Edge {
                src: EntityId(src),
                relation,
                dst: EntityId(dst),
            });
        }
        Self::from_parts(entities, parsed_edges)
    }

    pub fn load_files(nodes: impl AsRef<Path>, edges: impl AsRef<Path>) -> Result<Self, KgError> {
        let nodes = BufReader::new(File::open(nodes)?);
        let edges = BufReader::new(File::open(edges)?);
        Self::load(nodes, edges)
    }

    /// Write the node table in the loader's format.
    pub fn write_nodes<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# id\tkind\tname")?;
        for e in self.entities.values() {
            writeln!(out, "{}\t{}\t{}", e.id, e.kind.as_str(), e.name)?;
        }
        Ok(())
    }

    /// Write the edge table in the loader's format.
    pub fn write_edges<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# src_id\trelation\tdst_id")?;
        for e in &self.edges {
            writeln!(out, "{}\t{}\t{}", e.src, e.relation.as_str(), e.dst)?;
        }
        Ok(())
    }

    pub fn entity(&self, id: &EntityId) -> Option<&KgEntity> {
        self.entities.get(id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &KgEntity> {
        self.entities.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Disease ids in ascending order.
    pub fn diseases(&self) -> impl Iterator<Item = &EntityId> {
        self.symptoms_of.keys()
    }

    pub fn disease_count(&self) -> usize {
        self.symptoms_of.len()
    }

    pub fn symptoms(&self) -> impl Iterator<Item = &KgEntity> {
        self.entities
            .values()
            .filter(|e| e.kind == EntityKind::Symptom)
    }

    pub fn count_kind(&self, kind: EntityKind) -> usize {
        self.entities.values().filter(|e| e.kind == kind).count()
    }

    pub fn count_relation(&self, relation: Relation) -> usize {
        self.edges.iter().filter(|e| e.relation == relation).count()
    }

    pub fn name_of(&self, id: &EntityId) -> Option<&str> {
        self.entities.get(id).map(|e| e.name.as_str())
    }

    /// N(D): symptoms directly connected to `disease`.
    pub fn neighbors(&self, disease: &EntityId) -> Result<&BTreeSet<EntityId>, KgError> {
        match self.entities.get(disease) {
            None => Err(KgError::UnknownEntity(disease.clone())),
            Some(e) if e.kind != EntityKind::Disease => Err(KgError::NotADisease(disease.clone())),
            Some(_) => Ok(&self.symptoms_of[disease]),
        }
    }

    /// Diseases that list `symptom` among their manifestations.
    pub fn diseases_with(&self, symptom: &EntityId) -> impl Iterator<Item = &EntityId> {
        self.diseases_of.get(symptom).into_iter().flatten()
    }

    /// Number of disease–symptom edges incident to `symptom`.
    pub fn symptom_degree(&self, symptom: &EntityId) -> usize {
        self.diseases_of.get(symptom).map_or(0, BTreeSet::len)
    }

    pub fn build_subgraph(&self, differential: &[EntityId]) -> Result<DiagnosticSubgraph, KgError> {
        if differential.is_empty() {
            return Err(KgError::EmptyDifferential);
        }
        let mut adjacency = BTreeMap::new();
        let mut symptoms = BTreeSet::new();
        for disease in differential {
            let n = self.neighbors(disease)?;
            if adjacency.insert(disease.clone(), n.clone()).is_some() {
                return Err(KgError::DuplicateCandidate(disease.clone()));
            }
            symptoms.extend(n.iter().cloned());
        }
        Ok(DiagnosticSubgraph {
            diseases: differential.to_vec(),
            symptoms,
            adjacency,
        })
    }
}

fn rows<R: BufRead>(reader: R, file: &'static str) -> Result<Vec<(usize, [String; 3])>, KgError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                file,
                line: line_no,
                message: format!("expected 3 tab-separated columns, found {}", fields.len()),
            });
        }
        let id = fields[0].trim();
        let third = fields[2].trim();
        if id.is_empty() || third.is_empty() {
            return Err(KgError::Parse {
                file,
                line: line_no,
                message: "empty column".into(),
            });
        }
        out.push((
            line_no,
            [id.to_owned(), fields[1].trim().to_owned(), fields[2].to_owned()],
        ));
    }
    Ok(out)
}

/// Task-specific bipartite graph over the current differential and the
/// symptoms directly connected to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSubgraph {
    pub diseases: Vec<EntityId>,
    pub symptoms: BTreeSet<EntityId>,
    pub adjacency: BTreeMap<EntityId, BTreeSet<EntityId>>,
}

impl DiagnosticSubgraph {
    /// Construct directly from an adjacency list, preserving disease order.
    /// Mostly useful for tests and synthetic inputs.
    pub fn from_adjacency(adjacency: Vec<(EntityId, BTreeSet<EntityId>)>) -> Self {
        let diseases = adjacency.iter().map(|(d, _)| d.clone()).collect();
        let symptoms = adjacency.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        Self {
            diseases,
            symptoms,
            adjacency: adjacency.into_iter().collect(),
        }
    }

    pub fn neighbors(&self, disease: &EntityId) -> Option<&BTreeSet<EntityId>> {
        self.adjacency.get(disease)
    }

    pub fn contains_disease(&self, disease: &EntityId) -> bool {
        self.adjacency.contains_key(disease)
    }

    pub fn is_empty(&self) -> bool {
        self.diseases.is_empty()
    }
}
