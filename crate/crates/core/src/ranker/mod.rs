//! Pairwise learning-curve ranking model: input encoders, scoring, pair
//! losses, per-length training and checkpoints.

mod bank;
mod config;
mod features;
mod model;
mod train;

pub use bank::{load_checkpoint, save_checkpoint, Manifest, ModelBank, CHECKPOINT_SCHEMA_VERSION, MANIFEST_FILE};
pub use config::{CurveEncoderVariant, LrSchedule, ModelConfig, PairSampling, TrainingConfig};
pub use features::{EncodedInput, FeatureSpace};
pub use model::{Forward, Ranker, RankerParams};
pub use train::{reconstruction_accuracy, total_loss, train_fl, train_fl_with, PairExample, TrainedModel, TrainingMetrics};

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("run {run_id:?}: unknown architecture token {token:?}")]
    UnknownToken { token: String, run_id: String },
    #[error("run {run_id:?}: hyperparameter keys do not match the feature space")]
    HparamMismatch { run_id: String },
    #[error("no valid training pair (need two runs of one dataset)")]
    NoPairs,
    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: &'static str },
    #[error("no model for curve length {0}")]
    MissingLength(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RankerError>;

/// `p̂ = e^(f_i − f_j) / (1 + e^(f_i − f_j))`, evaluated without overflow.
pub fn pair_probability(f_i: f64, f_j: f64) -> f64 {
    let d = f_i - f_j;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Ranking target of a pair from final values oriented so higher is better.
pub fn pair_target(final_i: f64, final_j: f64) -> f64 {
    if final_i > final_j {
        1.0
    } else if final_i == final_j {
        0.5
    } else {
        0.0
    }
}

pub const PROB_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy over `(target, predicted)` pairs.
pub fn loss_ce(pairs: &[(f64, f64)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|&(p, q)| {
            let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -p * q.ln() - (1.0 - p) * (1.0 - q).ln()
        })
        .sum();
    total / pairs.len() as f64
}

/// Clamps a raw final-performance prediction (higher is better) into
/// `[floor, cap]`, where `floor` is the best value already observed on the
/// partial curve and `cap` is the mean of previously completed finals.
/// The floor wins when the two conflict. Without context the raw value is
/// returned unchanged.
pub fn predict_final(raw: f64, best_observed: f64, completed_finals: &[f64]) -> f64 {
    if completed_finals.is_empty() {
        return raw;
    }
    let cap = completed_finals.iter().sum::<f64>() / completed_finals.len() as f64;
    raw.min(cap).max(best_observed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn probability_examples() {
        assert_eq!(pair_probability(1.3, 1.3), 0.5);
        assert!((pair_probability(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        assert_eq!(pair_probability(800.0, 0.0), 1.0);
        assert_eq!(pair_probability(-800.0, 0.0), 0.0);
    }

    #[test]
    fn target_examples() {
        assert_eq!(pair_target(0.9, 0.8), 1.0);
        assert_eq!(pair_target(0.8, 0.8), 0.5);
        assert_eq!(pair_target(0.7, 0.8), 0.0);
    }

    #[test]
    fn ce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_ce(&[(1.0, 0.5)]) - ln2).abs() < 1e-15);
        assert!((loss_ce(&[(0.5, 0.5)]) - ln2).abs() < 1e-15);
        assert!(loss_ce(&[(1.0, 1.0 - 1e-15)]) < 1e-11);
        assert!(loss_ce(&[(1.0, 0.0)]).is_finite());
    }

    #[test]
    fn ce_for_half_target_is_minimal_at_half() {
        let at_half = loss_ce(&[(0.5, 0.5)]);
        for i in 1..1000 {
            let q = i as f64 / 1000.0;
            assert!(loss_ce(&[(0.5, q)]) >= at_half);
        }
    }

    #[test]
    fn predict_final_bounds() {
        assert_eq!(predict_final(0.99, 0.60, &[0.7, 0.8]), 0.75);
        assert_eq!(predict_final(0.40, 0.60, &[0.7, 0.8]), 0.60);
        assert_eq!(predict_final(0.50, 0.80, &[0.7, 0.8]), 0.80);
        assert_eq!(predict_final(0.50, 0.80, &[]), 0.50);
    }

    proptest! {
        #[test]
        fn antisymmetric(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert!((pair_probability(a, b) + pair_probability(b, a) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn translation_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -20.0f64..20.0) {
            prop_assert!((pair_probability(a + c, b + c) - pair_probability(a, b)).abs() <= 1e-12);
        }
    }
}
