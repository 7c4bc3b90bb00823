use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix_seed, oriented, spearman, Result, SearchError};
use crate::corpus::{Corpus, NormalizationStats, RunRecord};
use crate::ranker::{train_fl_with, FeatureSpace, LrSchedule, ModelBank, ModelConfig, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    LcRankNet,
    LastValue,
    Oracle,
    Constant,
    Random,
}

impl Scorer {
    pub const ALL: [Scorer; 5] = [
        Scorer::LcRankNet,
        Scorer::LastValue,
        Scorer::Oracle,
        Scorer::Constant,
        Scorer::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::LcRankNet => "lcranknet",
            Scorer::LastValue => "last-value",
            Scorer::Oracle => "oracle",
            Scorer::Constant => "constant",
            Scorer::Random => "random",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scorer::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scorer {s:?}"))
    }
}

/// Model configuration used by the ranking and replay protocols: the
/// default architecture with a shorter, faster training schedule and no
/// final-performance head.
pub fn protocol_model_config() -> ModelConfig {
    ModelConfig {
        perf_head_weight: 0.0,
        training: TrainingConfig {
            steps: 1000,
            pairs_per_step: 16,
            learning_rate: 1e-2,
            lr_schedule: LrSchedule::Cosine,
            reconstruction_batch: 4,
            seed: 0,
        },
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingConfig {
    pub test_runs: usize,
    pub train_runs: usize,
    pub repetitions: usize,
    /// Observed fractions of the curve length.
    pub fractions: Vec<f64>,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            test_runs: 50,
            train_runs: 5,
            repetitions: 10,
            fractions: (0..=10).map(|i| i as f64 * 0.03).collect(),
            model: protocol_model_config(),
            seed: 0,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_runs < 2 || self.repetitions == 0 {
            return Err(SearchError::Config("need test_runs >= 2 and repetitions >= 1".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(SearchError::Config(format!("length fraction {f} outside [0, 1]")));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Seed of repetition `rep`.
    pub fn repetition_seed(&self, rep: usize) -> u64 {
        mix_seed(self.seed, rep as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingPoint {
    pub fraction: f64,
    pub length: usize,
    /// Correlation per repetition; `None` where it is undefined.
    pub spearman: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingEvalResult {
    pub dataset: String,
    pub scorer: Scorer,
    pub seeds: Vec<u64>,
    pub points: Vec<RankingPoint>,
}

fn summarize(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Correlation between ranks induced by `scorer` on the first `l` epochs
/// of every test run and the ranks of their final values, at each length,
/// for one repetition.
fn repetition(
    scorer: Scorer,
    test: &[&RunRecord],
    train: &[&RunRecord],
    meta: &[&RunRecord],
    lengths: &[usize],
    model: &ModelConfig,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let finals: Vec<f64> = test.iter().map(|r| oriented(r, r.final_value())).collect();
    let score_at = |l: usize| -> Result<Option<f64>> {
        let scores: Vec<f64> = match scorer {
            Scorer::Oracle => finals.clone(),
            Scorer::Constant => vec![0.0; test.len()],
            Scorer::LastValue => {
                if l == 0 {
                    return Ok(None);
                }
                test.iter().map(|r| oriented(r, r.curve[l - 1])).collect()
            }
            Scorer::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, l as u64));
                test.iter().map(|_| rng.random::<f64>()).collect()
            }
            Scorer::LcRankNet => {
                let mut records: Vec<&RunRecord> = meta.to_vec();
                records.extend_from_slice(train);
                let mut features = FeatureSpace::fit(&records, &model.log_hparams)?;
                features.normalization = NormalizationStats::from_records(meta.iter().copied());
                let mut cfg = model.clone();
                cfg.training.seed = ModelBank::length_seed(model.training.seed ^ seed, l);
                let trained = train_fl_with(&records, l, &cfg, features)?;
                let ranker = trained.ranker;
                let inputs = test
                    .iter()
                    .map(|r| ranker.features.encode(r, l))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                ranker.scores(&inputs)?
            }
        };
        match spearman(&scores, &finals) {
            Ok(r) => Ok(Some(r)),
            Err(SearchError::UndefinedCorrelation) => Ok(None),
            Err(e) => Err(e),
        }
    };
    lengths.par_iter().map(|&l| score_at(l)).collect()
}

/// Repeatedly samples test and training runs from `held_out`, ranks the
/// test runs from partial curves of growing length and reports Spearman
/// correlation with their final values.
pub fn ranking_experiment(
    corpus: &Corpus,
    held_out: &str,
    config: &RankingConfig,
    scorer: Scorer,
) -> Result<RankingEvalResult> {
    config.validate()?;
    let (meta, runs) = corpus.lodo_split(held_out)?;
    let needed = config.test_runs + config.train_runs;
    if runs.len() < needed {
        return Err(SearchError::InsufficientRuns {
            dataset: held_out.to_string(),
            needed,
            found: runs.len(),
        });
    }
    let max_len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    let lengths: Vec<usize> = config
        .fractions
        .iter()
        .map(|f| ((f * max_len as f64).round() as usize).min(max_len))
        .collect();
    let seeds: Vec<u64> = (0..config.repetitions).map(|k| config.repetition_seed(k)).collect();
    let per_rep: Vec<Vec<Option<f64>>> = seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = runs.clone();
            shuffled.shuffle(&mut rng);
            let test = &shuffled[..config.test_runs];
            let train = &shuffled[config.test_runs..needed];
            repetition(scorer, test, train, &meta, &lengths, &config.model, seed)
        })
        .collect::<Result<_>>()?;
    let points = config
        .fractions
        .iter()
        .zip(&lengths)
        .enumerate()
        .map(|(k, (&fraction, &length))| {
            let values: Vec<Option<f64>> = per_rep.iter().map(|r| r[k]).collect();
            let (mean, sd) = summarize(&values);
            RankingPoint {
                fraction,
                length,
                spearman: values,
                mean,
                sd,
            }
        })
        .collect();
    Ok(RankingEvalResult {
        dataset: held_out.to_string(),
        scorer,
        seeds,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SyntheticSpec};

    fn corpus() -> Corpus {
        synth_generate(&SyntheticSpec {
            n_datasets: 2,
            runs_per_dataset: 60,
            epochs: 20,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn config() -> RankingConfig {
        RankingConfig {
            repetitions: 3,
            fractions: vec![0.0, 0.1, 0.3],
            ..RankingConfig::default()
        }
    }

    #[test]
    fn oracle_is_perfect_everywhere() {
        let c = corpus();
        let r = ranking_experiment(&c, "synth-0", &config(), Scorer::Oracle).unwrap();
        assert_eq!(r.points.iter().map(|p| p.length).collect::<Vec<_>>(), vec![0, 2, 6]);
        for p in &r.points {
            assert_eq!(p.mean, Some(1.0));
            assert_eq!(p.sd, Some(0.0));
        }
    }

    #[test]
    fn constant_gives_missing_points() {
        let r = ranking_experiment(&corpus(), "synth-0", &config(), Scorer::Constant).unwrap();
        assert!(r.points.iter().all(|p| p.mean.is_none() && p.spearman.iter().all(Option::is_none)));
    }

    #[test]
    fn last_value_is_undefined_at_zero() {
        let r = ranking_experiment(&corpus(), "synth-0", &config(), Scorer::LastValue).unwrap();
        assert!(r.points[0].mean.is_none());
        assert!(r.points[2].mean.unwrap() > 0.5);
    }

    #[test]
    fn random_is_deterministic_and_centered() {
        let cfg = RankingConfig {
            repetitions: 10,
            ..config()
        };
        let a = ranking_experiment(&corpus(), "synth-1", &cfg, Scorer::Random).unwrap();
        let b = ranking_experiment(&corpus(), "synth-1", &cfg, Scorer::Random).unwrap();
        assert_eq!(a, b);
        for p in &a.points {
            assert!(p.mean.unwrap().abs() <= 0.25);
        }
    }

    #[test]
    fn too_few_runs_is_an_error() {
        let cfg = RankingConfig {
            test_runs: 58,
            ..config()
        };
        assert!(matches!(
            ranking_experiment(&corpus(), "synth-0", &cfg, Scorer::Oracle),
            Err(SearchError::InsufficientRuns { needed: 63, found: 60, .. })
        ));
    }

    #[test]
    fn scorer_names_round_trip() {
        for s in Scorer::ALL {
            assert_eq!(s.name().parse::<Scorer>().unwrap(), s);
        }
        assert!("best".parse::<Scorer>().is_err());
    }
}
