//! Corpus ingestion: JSONL records, completeness filtering and seeded splits.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record with empty id at position {0}")]
    EmptyId(usize),
    #[error("split sizes sum to {requested} but there are {available} examples")]
    SplitSizeMismatch { requested: usize, available: usize },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

/// One line of the input corpus. Missing fields and JSON `null` both mean absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub background_text: Option<String>,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub topic: String,
    #[serde(default)]
    pub category: String,
}

/// A record carrying all three content fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalExample {
    pub id: String,
    pub background_text: String,
    pub image_ref: String,
    pub reference_question: String,
    pub subject: String,
    pub topic: String,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    /// The 3606/1204/1132 split of the 5,942 complete ScienceQA examples.
    pub const SCIENCEQA: SplitCounts = SplitCounts {
        train: 3606,
        validation: 1204,
        test: 1132,
    };

    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        Self {
            train,
            validation,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    /// Scales the ScienceQA proportions to `n` examples: train and validation
    /// are floored, test takes the remainder. Exact for `n = 5942`.
    pub fn proportional(n: usize) -> Self {
        let base = Self::SCIENCEQA;
        let total = base.total();
        let train = n * base.train / total;
        let validation = n * base.validation / total;
        Self::new(train, validation, n - train - validation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts::new(self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Validation, SplitPart::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
            SplitPart::Test => "test",
        }
    }
}

fn has_content(field: &Option<String>) -> bool {
    field.as_deref().is_some_and(|s| !s.trim().is_empty())
}

/// Keeps the records with a question, a background text and an image locator,
/// in input order and without touching their text.
///
/// Ids are checked for uniqueness across all records, not only the kept ones.
pub fn filter_complete(records: &[RawRecord]) -> Result<Vec<MultimodalExample>, CorpusError> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut out = Vec::new();
    for (pos, record) in records.iter().enumerate() {
        if record.id.is_empty() {
            return Err(CorpusError::EmptyId(pos));
        }
        if !seen.insert(record.id.as_str()) {
            return Err(CorpusError::DuplicateId(record.id.clone()));
        }
        if has_content(&record.question)
            && has_content(&record.background_text)
            && has_content(&record.image_ref)
        {
            out.push(MultimodalExample {
                id: record.id.clone(),
                background_text: record.background_text.clone().unwrap_or_default(),
                image_ref: record.image_ref.clone().unwrap_or_default(),
                reference_question: record.question.clone().unwrap_or_default(),
                subject: record.subject.clone(),
                topic: record.topic.clone(),
                category: record.category.clone(),
            });
        }
    }
    Ok(out)
}

/// Shuffles the example ids with [`SplitMix64`] seeded by `seed` (Fisher-Yates,
/// see [`SplitMix64::shuffle`]) and cuts the permutation into train,
/// validation and test, in that order.
pub fn split(
    examples: &[MultimodalExample],
    seed: u64,
    counts: SplitCounts,
) -> Result<SplitAssignment, CorpusError> {
    if counts.total() != examples.len() {
        return Err(CorpusError::SplitSizeMismatch {
            requested: counts.total(),
            available: examples.len(),
        });
    }
    let mut ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
    SplitMix64::new(seed).shuffle(&mut ids);
    let test = ids.split_off(counts.train + counts.validation);
    let validation = ids.split_off(counts.train);
    Ok(SplitAssignment {
        seed,
        train: ids,
        validation,
        test,
    })
}

/// Reads one JSON value per non-blank line, reporting 1-based line numbers on failure.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>, CorpusError>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            line: idx + 1,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            line: idx + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<RawRecord>, CorpusError> {
    read_jsonl(reader)
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
