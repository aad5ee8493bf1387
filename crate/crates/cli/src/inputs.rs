//! Loading the graph, embeddings and cases named on the command line, with
//! errors classified into process exit codes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dxgraph::align::EmbeddingError;
use dxgraph::bench::{load_cases, CaseError};
use dxgraph::kg::KgError;
use dxgraph::{AlignConfig, CaseFile, DiagnosisEngine, EmbeddingProvider, KnowledgeGraph, VectorTable};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A file is missing or unreadable.
    #[error("{0}")]
    Path(String),
    /// A file was read but its content is invalid.
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Path(_) => 2,
            CliError::Schema(_) => 3,
            CliError::Usage(_) => 2,
            CliError::Other(_) => 1,
        }
    }
}

fn kg_error(paths: &KgPaths, e: KgError) -> CliError {
    let where_ = format!("{} / {}", paths.nodes.display(), paths.edges.display());
    match e {
        KgError::Io(io) => CliError::Path(format!("cannot read knowledge graph {where_}: {io}")),
        other => CliError::Schema(format!("invalid knowledge graph {where_}: {other}")),
    }
}

#[derive(Debug, Clone)]
pub struct KgPaths {
    pub nodes: PathBuf,
    pub edges: PathBuf,
}

impl KgPaths {
    /// From `--kg nodes.tsv,edges.tsv`, falling back to the
    /// `DXGRAPH_KG_NODES` / `DXGRAPH_KG_EDGES` environment variables.
    pub fn resolve(flag: Option<&str>) -> Result<Self, CliError> {
        if let Some(flag) = flag {
            let (nodes, edges) = flag
                .split_once(',')
                .ok_or_else(|| CliError::Usage(format!("--kg expects NODES,EDGES, got {flag:?}")))?;
            return Ok(Self {
                nodes: nodes.trim().into(),
                edges: edges.trim().into(),
            });
        }
        match (std::env::var_os("DXGRAPH_KG_NODES"), std::env::var_os("DXGRAPH_KG_EDGES")) {
            (Some(n), Some(e)) => Ok(Self {
                nodes: n.into(),
                edges: e.into(),
            }),
            _ => Err(CliError::Usage(
                "no knowledge graph: pass --kg NODES,EDGES or set DXGRAPH_KG_NODES and DXGRAPH_KG_EDGES".into(),
            )),
        }
    }

    pub fn load(&self) -> Result<KnowledgeGraph, CliError> {
        KnowledgeGraph::load_files(&self.nodes, &self.edges).map_err(|e| kg_error(self, e))
    }
}

pub fn load_vectors(path: &Path) -> Result<Arc<dyn EmbeddingProvider>, CliError> {
    match VectorTable::load(path) {
        Ok(t) => Ok(Arc::new(t)),
        Err(EmbeddingError::Io(msg)) => Err(CliError::Path(format!("cannot read vectors {}: {msg}", path.display()))),
        Err(e) => Err(CliError::Schema(format!("invalid vectors {}: {e}", path.display()))),
    }
}

pub fn build_engine(
    kg: KnowledgeGraph,
    vectors: Option<&Path>,
    align: AlignConfig,
) -> Result<Arc<DiagnosisEngine>, CliError> {
    let provider = vectors.map(load_vectors).transpose()?;
    DiagnosisEngine::new(Arc::new(kg), provider, align)
        .map(Arc::new)
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn read_cases(path: &Path) -> Result<Vec<CaseFile>, CliError> {
    load_cases(path).map_err(|e| match e {
        CaseError::Io { .. } => CliError::Path(e.to_string()),
        other => CliError::Schema(format!("{}: {other}", path.display())),
    })
}

/// Parse `1..10` (inclusive), `3..=5`, `7` or `1,4,9`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("cannot parse seeds {text:?}"));
    let t = text.trim();
    if let Some((a, b)) = t.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    t.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}
