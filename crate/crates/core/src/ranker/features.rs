use serde::{Deserialize, Serialize};

use super::{RankerError, Result};
use crate::corpus::{NormalizationStats, RunRecord, Vocabulary};

/// Model-ready view of one run at a given curve length.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    /// Normalized partial curve `y_1..y_l`.
    pub curve: Vec<f64>,
    pub tokens: Vec<usize>,
    pub dataset_id: String,
    pub hparams: Vec<f64>,
}

impl EncodedInput {
    pub fn best_value(&self) -> f64 {
        self.curve.iter().copied().fold(0.0, f64::max)
    }
}

/// Everything needed to turn a [`RunRecord`] into an [`EncodedInput`]:
/// vocabulary, hyperparameter transform and curve normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub vocabulary: Vocabulary,
    pub hparam_keys: Vec<String>,
    pub hparam_log: Vec<bool>,
    pub hparam_mean: Vec<f64>,
    pub hparam_scale: Vec<f64>,
    pub normalization: NormalizationStats,
}

impl FeatureSpace {
    /// Fits the transform on `records`; keys listed in `log_keys` pass
    /// through `ln` before standardization.
    pub fn fit(records: &[&RunRecord], log_keys: &[String]) -> Result<Self> {
        let first = records.first().ok_or(RankerError::NoPairs)?;
        let hparam_keys: Vec<String> = first.hparams.keys().cloned().collect();
        let hparam_log: Vec<bool> = hparam_keys.iter().map(|k| log_keys.contains(k)).collect();
        let mut space = FeatureSpace {
            vocabulary: Vocabulary::from_records(records.iter().copied()),
            hparam_keys,
            hparam_log,
            hparam_mean: Vec::new(),
            hparam_scale: Vec::new(),
            normalization: NormalizationStats::from_records(records.iter().copied()),
        };
        let raw: Vec<Vec<f64>> = records.iter().map(|r| space.raw_hparams(r)).collect::<Result<_>>()?;
        let n = raw.len() as f64;
        for k in 0..space.hparam_keys.len() {
            let mean = raw.iter().map(|v| v[k]).sum::<f64>() / n;
            let var = raw.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            space.hparam_mean.push(mean);
            space.hparam_scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Ok(space)
    }

    pub fn hparam_dim(&self) -> usize {
        self.hparam_keys.len()
    }

    fn raw_hparams(&self, record: &RunRecord) -> Result<Vec<f64>> {
        if record.hparams.len() != self.hparam_keys.len() {
            return Err(RankerError::HparamMismatch {
                run_id: record.run_id.clone(),
            });
        }
        self.hparam_keys
            .iter()
            .zip(&self.hparam_log)
            .map(|(k, &log)| {
                let v = *record.hparams.get(k).ok_or_else(|| RankerError::HparamMismatch {
                    run_id: record.run_id.clone(),
                })?;
                Ok(if log { v.max(f64::MIN_POSITIVE).ln() } else { v })
            })
            .collect()
    }

    pub fn tokens(&self, record: &RunRecord) -> Result<Vec<usize>> {
        record
            .arch_tokens
            .iter()
            .map(|t| {
                self.vocabulary.index(t).ok_or_else(|| RankerError::UnknownToken {
                    token: t.clone(),
                    run_id: record.run_id.clone(),
                })
            })
            .collect()
    }

    pub fn encode(&self, record: &RunRecord, l: usize) -> Result<EncodedInput> {
        let hparams = self
            .raw_hparams(record)?
            .into_iter()
            .enumerate()
            .map(|(k, v)| (v - self.hparam_mean[k]) / self.hparam_scale[k])
            .collect();
        Ok(EncodedInput {
            curve: self.normalization.normalize(record, l)?,
            tokens: self.tokens(record)?,
            dataset_id: record.dataset_id.clone(),
            hparams,
        })
    }

    /// Final value in normalized, higher-is-better units.
    pub fn normalized_final(&self, record: &RunRecord) -> Result<f64> {
        Ok(self.normalization.normalized_final(record)?)
    }
}
