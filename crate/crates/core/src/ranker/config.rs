use serde::{Deserialize, Serialize};

use super::{RankerError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveEncoderVariant {
    /// One convolution per admissible kernel size, each followed by global max pooling.
    ConvGlobalMax,
    /// A single feature: the best value observed so far.
    BestValueOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    SameDataset,
    AnyDataset,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over all steps.
    Cosine,
}

impl LrSchedule {
    /// Learning rate at `step` of `steps`.
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub steps: usize,
    pub pairs_per_step: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Runs per step whose architectures are reconstructed by the decoder.
    pub reconstruction_batch: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 2000,
            pairs_per_step: 256,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            reconstruction_batch: 16,
            seed: 0,
        }
    }
}

/// Fixed hyperparameters of the ranking network and its training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub curve_kernel_sizes: Vec<usize>,
    pub filters_per_kernel: usize,
    pub arch_embed_dim: usize,
    pub arch_hidden_dim: usize,
    pub dataset_embed_dim: usize,
    pub combiner_hidden: usize,
    /// Weight of the ranking loss against the reconstruction loss.
    pub alpha: f64,
    /// Weight of the final-performance head loss; 0 disables it.
    pub perf_head_weight: f64,
    pub curve_encoder: CurveEncoderVariant,
    pub pair_sampling: PairSampling,
    /// Hyperparameters fed through `ln` before standardization.
    pub log_hparams: Vec<String>,
    pub training: TrainingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            curve_kernel_sizes: vec![1, 2, 3, 4],
            filters_per_kernel: 16,
            arch_embed_dim: 16,
            arch_hidden_dim: 32,
            dataset_embed_dim: 8,
            combiner_hidden: 64,
            alpha: 0.8,
            perf_head_weight: 0.2,
            curve_encoder: CurveEncoderVariant::ConvGlobalMax,
            pair_sampling: PairSampling::SameDataset,
            log_hparams: vec!["learning_rate".into(), "lr".into(), "batch_size".into()],
            training: TrainingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RankerError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.perf_head_weight >= 0.0 && self.perf_head_weight.is_finite()) {
            return bad(format!("perf_head_weight {} must be >= 0", self.perf_head_weight));
        }
        if self.curve_kernel_sizes.is_empty() || self.curve_kernel_sizes.contains(&0) {
            return bad("curve_kernel_sizes must be nonempty and positive".into());
        }
        let mut sorted = self.curve_kernel_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.curve_kernel_sizes.len() {
            return bad("curve_kernel_sizes must be distinct".into());
        }
        for (name, v) in [
            ("filters_per_kernel", self.filters_per_kernel),
            ("arch_embed_dim", self.arch_embed_dim),
            ("arch_hidden_dim", self.arch_hidden_dim),
            ("dataset_embed_dim", self.dataset_embed_dim),
            ("combiner_hidden", self.combiner_hidden),
            ("steps", self.training.steps),
            ("pairs_per_step", self.training.pairs_per_step),
            ("reconstruction_batch", self.training.reconstruction_batch),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.training.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }

    /// Width of the learning-curve representation, independent of curve length.
    pub fn curve_width(&self) -> usize {
        match self.curve_encoder {
            CurveEncoderVariant::ConvGlobalMax => self.curve_kernel_sizes.len() * self.filters_per_kernel,
            CurveEncoderVariant::BestValueOnly => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.curve_width(), 64);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.rate(0.01, 0, 100), 0.01);
        assert!((LrSchedule::Cosine.rate(0.01, 50, 100) - 0.005).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.01, 99, 100), 0.01);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = ModelConfig {
            alpha: 1.5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.alpha = 0.5;
        c.arch_hidden_dim = 0;
        assert!(c.validate().is_err());
        c.arch_hidden_dim = 4;
        c.curve_kernel_sizes = vec![2, 2];
        assert!(c.validate().is_err());
    }
}
