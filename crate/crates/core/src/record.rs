//! OSCE-format diagnostic record carried across turns.
//!
//! Updates are applied by value: each [`OsceRecord::apply_update`] returns a
//! new record and leaves the input untouched. A symptom re-recorded with the
//! opposite polarity is revised to the latest answer and the revision is
//! reported back to the caller for auditing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::normalize_term;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Present,
    Absent,
}

impl Polarity {
    pub fn opposite(self) -> Self {
        match self {
            Polarity::Present => Polarity::Absent,
            Polarity::Absent => Polarity::Present,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: String,
    pub gender: String,
}

impl Demographics {
    /// Parse strings like `"30-year-old female"`. Anything unrecognized is
    /// kept verbatim in `age`.
    pub fn parse(text: &str) -> Self {
        let text = text.trim();
        let lower = text.to_lowercase();
        if let Some((age, rest)) = lower.split_once("-year-old") {
            let age = age.trim();
            if !age.is_empty() && age.chars().all(|c| c.is_ascii_digit()) {
                return Demographics {
                    age: age.to_owned(),
                    gender: rest.trim().to_owned(),
                };
            }
        }
        Demographics {
            age: text.to_owned(),
            gender: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomEntry {
    pub name: String,
    pub polarity: Polarity,
    pub turn: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamEntry {
    pub name: String,
    pub result: String,
    pub turn: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OsceRecord {
    pub chief_complaint: String,
    pub demographics: Demographics,
    pub symptoms: Vec<SymptomEntry>,
    pub examinations: Vec<ExamEntry>,
    pub revision: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordUpdate {
    pub turn: u32,
    #[serde(default)]
    pub new_positives: Vec<String>,
    #[serde(default)]
    pub new_negatives: Vec<String>,
    #[serde(default)]
    pub new_exams: Vec<(String, String)>,
}

/// A symptom whose recorded polarity was overturned by a later answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarityRevision {
    pub name: String,
    pub from: Polarity,
    pub to: Polarity,
    pub recorded_turn: u32,
    pub revised_turn: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("chief complaint is empty")]
    EmptyChiefComplaint,
    #[error("update for turn {update} is older than recorded turn {last}")]
    StaleTurn { update: u32, last: u32 },
    #[error("{0:?} is both asserted and denied in one update")]
    Contradictory(String),
}

impl OsceRecord {
    pub fn new(demographics: Demographics, chief_complaint: &str) -> Result<Self, RecordError> {
        let chief_complaint = chief_complaint.trim();
        if chief_complaint.is_empty() {
            return Err(RecordError::EmptyChiefComplaint);
        }
        Ok(Self {
            chief_complaint: chief_complaint.to_owned(),
            demographics,
            symptoms: Vec::new(),
            examinations: Vec::new(),
            revision: 0,
        })
    }

    /// Highest turn index recorded anywhere in the record.
    pub fn last_turn(&self) -> u32 {
        let s = self.symptoms.iter().map(|e| e.turn);
        let x = self.examinations.iter().map(|e| e.turn);
        s.chain(x).max().unwrap_or(0)
    }

    pub fn polarity_of(&self, name: &str) -> Option<Polarity> {
        let key = normalize_term(name, false);
        self.symptoms.iter().find(|e| e.name == key).map(|e| e.polarity)
    }

    pub fn apply_update(
        &self,
        update: &RecordUpdate,
    ) -> Result<(OsceRecord, Vec<PolarityRevision>), RecordError> {
        let last = self.last_turn();
        if update.turn < last {
            return Err(RecordError::StaleTurn {
                update: update.turn,
                last,
            });
        }
        let positives: Vec<String> = update
            .new_positives
            .iter()
            .map(|s| normalize_term(s, false))
            .filter(|s| !s.is_empty())
            .collect();
        let negatives: Vec<String> = update
            .new_negatives
            .iter()
            .map(|s| normalize_term(s, false))
            .filter(|s| !s.is_empty())
            .collect();
        if let Some(p) = positives.iter().find(|p| negatives.contains(p)) {
            return Err(RecordError::Contradictory(p.clone()));
        }

        let mut next = self.clone();
        let mut revisions = Vec::new();
        let facts = positives
            .into_iter()
            .map(|n| (n, Polarity::Present))
            .chain(negatives.into_iter().map(|n| (n, Polarity::Absent)));
        for (name, polarity) in facts {
            match next.symptoms.iter().position(|e| e.name == name) {
                Some(i) if next.symptoms[i].polarity == polarity => {}
                Some(i) => {
                    let old = next.symptoms.remove(i);
                    revisions.push(PolarityRevision {
                        name: name.clone(),
                        from: old.polarity,
                        to: polarity,
                        recorded_turn: old.turn,
                        revised_turn: update.turn,
                    });
                    next.symptoms.push(SymptomEntry {
                        name,
                        polarity,
                        turn: update.turn,
                    });
                }
                None => next.symptoms.push(SymptomEntry {
                    name,
                    polarity,
                    turn: update.turn,
                }),
            }
        }
        for (name, result) in &update.new_exams {
            let name = name.trim();
            let key = normalize_term(name, false);
            let existing = next
                .examinations
                .iter()
                .position(|e| normalize_term(&e.name, false) == key);
            match existing {
                Some(i) if next.examinations[i].result == *result => continue,
                Some(i) => {
                    next.examinations.remove(i);
                }
                None => {}
            }
            next.examinations.push(ExamEntry {
                name: name.to_owned(),
                result: result.clone(),
                turn: update.turn,
            });
        }
        next.revision += 1;
        Ok((next, revisions))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}
