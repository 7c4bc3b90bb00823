//! Evaluation protocols: ranking quality against observed curve length,
//! random-search replays with regret and epoch accounting, regularized
//! evolution on a tabular corpus, and result aggregation.

mod evolution;
mod ranking;
mod replay;
mod report;
mod spearman;

pub use evolution::{regularized_evolution, Evaluation, EvolutionConfig, EvolutionResult, TracePoint};
pub use ranking::{protocol_model_config, ranking_experiment, RankingConfig, RankingEvalResult, RankingPoint, Scorer};
pub use replay::{default_hyperband, default_successive_halving, order_runs, random_search_replay, ReplayResult};
pub use report::{aggregate_report, read_results_csv, write_results_csv, ReportRow, ResultRow};
pub use spearman::{average_ranks, spearman};

use thiserror::Error;

use crate::corpus::{CorpusError, Orientation, RunRecord};
use crate::ranker::RankerError;
use crate::termination::TerminationError;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("undefined correlation")]
    UndefinedCorrelation,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dataset {dataset:?} has {found} runs, {needed} needed")]
    InsufficientRuns { dataset: String, needed: usize, found: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Termination(#[from] TerminationError),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SearchError>;

/// Derives an independent stream seed from `seed` and `k`.
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `v` with higher meaning better.
fn oriented(record: &RunRecord, v: f64) -> f64 {
    match record.metric_orientation {
        Orientation::HigherBetter => v,
        Orientation::LowerBetter => -v,
    }
}
