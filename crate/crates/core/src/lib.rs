//! Knowledge-graph-guided active diagnosis.
//!
//! A disease-symptom graph ([`kg`]) is the hypothesis space. Each turn the
//! engine proposes a differential, conditions it on the evidence gathered
//! so far ([`inference`]), and asks about the symptom with the highest
//! expected information gain. Free-text terms are mapped onto graph
//! entities by [`align`]; the running OSCE record lives in [`record`];
//! [`session`] drives the loop and [`bench`] measures it.

pub mod align;
pub mod bench;
pub mod inference;
pub mod kg;
pub mod record;
pub mod session;

pub use align::{AlignConfig, AlignStage, Aligner, AlignmentResult, EmbeddingProvider, VectorTable};
pub use bench::{BenchReport, CaseFile, Noise};
pub use inference::{DifferentialSet, EvidenceState, InferenceConfig, InquiryPlan};
pub use kg::{EntityId, EntityKind, KnowledgeGraph};
pub use record::{OsceRecord, Polarity};
pub use session::{
    DiagnosisEngine, OracleAnswer, QuestionPolicy, Session, SessionConfig, SessionOutcome, TerminationReason,
};
