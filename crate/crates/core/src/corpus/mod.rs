//! Learning-curve meta-knowledge: run records, persistence, normalization,
//! leave-one-dataset-out splits and a synthetic generator.

mod io;
mod normalize;
mod synth;

pub use io::{load_jsonl, save_jsonl, read_jsonl, write_jsonl, SCHEMA_VERSION};
pub use normalize::{NormalizationStats, Range};
pub use synth::{synth_generate, synth_generate_with_latents, CurveFamily, SyntheticLatent, SyntheticSpec, SYNTH_VOCABULARY};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown schema_version {version}")]
    UnknownSchemaVersion { line: usize, version: u64 },
    #[error("duplicate run_id {0:?}")]
    DuplicateRunId(String),
    #[error("run {run_id:?}: {reason}")]
    InvalidRecord { run_id: String, reason: String },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("run {run_id:?}: length {l} outside 0..={len}")]
    Range { run_id: String, l: usize, len: usize },
    #[error("dataset {0:?} has a degenerate value range (max == min)")]
    DegenerateDataset(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// One training run: its description and full learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset_id: String,
    pub run_id: String,
    pub arch_tokens: Vec<String>,
    pub hparams: BTreeMap<String, f64>,
    pub curve: Vec<f64>,
    pub metric_orientation: Orientation,
}

impl RunRecord {
    /// Number of epochs `L`.
    pub fn len(&self) -> usize {
        self.curve.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curve.is_empty()
    }

    pub fn final_value(&self) -> f64 {
        *self.curve.last().expect("validated records have nonempty curves")
    }

    /// The partial curve `y_1..y_l`; `l = 0` gives the empty curve.
    pub fn truncate(&self, l: usize) -> Result<&[f64]> {
        if l > self.curve.len() {
            return Err(CorpusError::Range {
                run_id: self.run_id.clone(),
                l,
                len: self.curve.len(),
            });
        }
        Ok(&self.curve[..l])
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| CorpusError::InvalidRecord {
            run_id: self.run_id.clone(),
            reason: reason.to_string(),
        };
        if self.curve.is_empty() {
            return Err(invalid("empty curve"));
        }
        if let Some(v) = self.curve.iter().find(|v| !v.is_finite()) {
            return Err(invalid(&format!("non-finite curve value {v}")));
        }
        if self.arch_tokens.is_empty() {
            return Err(invalid("empty arch_tokens"));
        }
        if self.arch_tokens.iter().any(String::is_empty) {
            return Err(invalid("empty architecture token"));
        }
        if let Some((k, v)) = self.hparams.iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid(&format!("non-finite hyperparameter {k}={v}")));
        }
        Ok(())
    }
}

/// Token → index map over all architecture tokens of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Most frequent token first; ties broken lexicographically.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records {
            for t in &r.arch_tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocabulary {
            tokens: ordered.into_iter().map(|(t, _)| t.to_string()).collect(),
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Vocabulary { tokens }
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A validated, immutable collection of run records.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<RunRecord>,
    vocabulary: Vocabulary,
    dataset_ids: Vec<String>,
    schema_version: u32,
}

impl Corpus {
    pub fn new(records: Vec<RunRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = BTreeSet::new();
        let mut dataset_ids: Vec<String> = Vec::new();
        let mut orientation: BTreeMap<&str, Orientation> = BTreeMap::new();
        let hparam_keys: Vec<&String> = records[0].hparams.keys().collect();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.run_id.as_str()) {
                return Err(CorpusError::DuplicateRunId(r.run_id.clone()));
            }
            if !dataset_ids.contains(&r.dataset_id) {
                dataset_ids.push(r.dataset_id.clone());
            }
            let o = *orientation.entry(r.dataset_id.as_str()).or_insert(r.metric_orientation);
            if o != r.metric_orientation {
                return Err(CorpusError::InvalidRecord {
                    run_id: r.run_id.clone(),
                    reason: format!("metric orientation differs from dataset {:?}", r.dataset_id),
                });
            }
            if !r.hparams.keys().eq(hparam_keys.iter().copied()) {
                return Err(CorpusError::InvalidRecord {
                    run_id: r.run_id.clone(),
                    reason: "hyperparameter keys differ from the rest of the corpus".into(),
                });
            }
        }
        let vocabulary = Vocabulary::from_records(&records);
        Ok(Corpus {
            records,
            vocabulary,
            dataset_ids,
            schema_version: SCHEMA_VERSION,
        })
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    /// Dataset ids in order of first appearance.
    pub fn dataset_ids(&self) -> &[String] {
        &self.dataset_ids
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn hparam_keys(&self) -> Vec<String> {
        self.records[0].hparams.keys().cloned().collect()
    }

    pub fn dataset_records(&self, dataset_id: &str) -> Vec<&RunRecord> {
        self.records.iter().filter(|r| r.dataset_id == dataset_id).collect()
    }

    pub fn find_run(&self, run_id: &str) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.run_id == run_id)
    }

    /// Leave-one-dataset-out partition: `(training side, held-out side)`.
    pub fn lodo_split(&self, held_out: &str) -> Result<(Vec<&RunRecord>, Vec<&RunRecord>)> {
        if !self.dataset_ids.iter().any(|d| d == held_out) {
            return Err(CorpusError::UnknownDataset(held_out.to_string()));
        }
        Ok(self.records.iter().partition(|r| r.dataset_id != held_out))
    }
}
