use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PairSampling;
use super::{pair_target, EncodedInput, FeatureSpace, ModelConfig, Ranker, RankerError, Result, PROB_CLAMP};
use crate::corpus::{Orientation, RunRecord};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

/// An ordered pair of training runs and its ranking target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairExample {
    pub i: usize,
    pub j: usize,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub step: usize,
    pub loss_ce: f64,
    pub loss_rec: f64,
    pub loss_perf: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub ranker: Ranker,
    pub metrics: Vec<TrainingMetrics>,
}

fn oriented(r: &RunRecord) -> f64 {
    match r.metric_orientation {
        Orientation::HigherBetter => r.final_value(),
        Orientation::LowerBetter => -r.final_value(),
    }
}

/// Groups of run indices among which ordered pairs are drawn.
fn pair_pools(records: &[&RunRecord], sampling: PairSampling) -> Vec<Vec<usize>> {
    let pools: Vec<Vec<usize>> = match sampling {
        PairSampling::AnyDataset => vec![(0..records.len()).collect()],
        PairSampling::SameDataset => {
            let mut ids: Vec<&str> = Vec::new();
            let mut pools: Vec<Vec<usize>> = Vec::new();
            for (i, r) in records.iter().enumerate() {
                match ids.iter().position(|d| *d == r.dataset_id) {
                    Some(p) => pools[p].push(i),
                    None => {
                        ids.push(&r.dataset_id);
                        pools.push(vec![i]);
                    }
                }
            }
            pools
        }
    };
    pools.into_iter().filter(|p| p.len() >= 2).collect()
}

/// Draws ordered pairs uniformly from all admissible pairs.
struct PairSampler {
    pools: Vec<Vec<usize>>,
    cumulative: Vec<u64>,
}

impl PairSampler {
    fn new(pools: Vec<Vec<usize>>) -> Result<Self> {
        if pools.is_empty() {
            return Err(RankerError::NoPairs);
        }
        let mut total = 0u64;
        let cumulative = pools
            .iter()
            .map(|p| {
                let n = p.len() as u64;
                total += n * (n - 1);
                total
            })
            .collect();
        Ok(PairSampler { pools, cumulative })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random_range(0..total);
        let p = self.cumulative.partition_point(|&c| c <= u);
        let pool = &self.pools[p];
        let i = rng.random_range(0..pool.len());
        let mut j = rng.random_range(0..pool.len() - 1);
        if j >= i {
            j += 1;
        }
        (pool[i], pool[j])
    }
}

/// Trains `f_l` on `records`, fitting the input transform on them first.
pub fn train_fl(records: &[&RunRecord], l: usize, config: &ModelConfig) -> Result<TrainedModel> {
    let features = FeatureSpace::fit(records, &config.log_hparams)?;
    train_fl_with(records, l, config, features)
}

/// Trains `f_l` with a given input transform. Only `y_1..y_l` and the final
/// value of each curve are read.
pub fn train_fl_with(records: &[&RunRecord], l: usize, config: &ModelConfig, features: FeatureSpace) -> Result<TrainedModel> {
    config.validate()?;
    let sampler = PairSampler::new(pair_pools(records, config.pair_sampling))?;
    let inputs: Vec<EncodedInput> = records.iter().map(|r| features.encode(r, l)).collect::<Result<_>>()?;
    let finals: Vec<f64> = records.iter().map(|r| oriented(r)).collect();
    let use_perf = config.perf_head_weight > 0.0;
    let perf_targets: Vec<f64> = if use_perf {
        records.iter().map(|r| features.normalized_final(r)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut dataset_ids: Vec<String> = Vec::new();
    for r in records {
        if !dataset_ids.contains(&r.dataset_id) {
            dataset_ids.push(r.dataset_id.clone());
        }
    }
    let seed = config.training.seed;
    let mut ranker = Ranker::new(config.clone(), features, &dataset_ids, l, seed)?;
    let mut adam = AdamState::new(
        ranker.params.store().tensors(),
        AdamConfig {
            learning_rate: config.training.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut metrics = Vec::with_capacity(config.training.steps);
    let mut slot = vec![usize::MAX; records.len()];

    let tc = &config.training;
    for step in 0..tc.steps {
        adam.config.learning_rate = tc.lr_schedule.rate(tc.learning_rate, step, tc.steps);
        let mut unique: Vec<usize> = Vec::new();
        let mut pairs = Vec::with_capacity(config.training.pairs_per_step);
        for _ in 0..config.training.pairs_per_step {
            let (i, j) = sampler.sample(&mut rng);
            for r in [i, j] {
                if slot[r] == usize::MAX {
                    slot[r] = unique.len();
                    unique.push(r);
                }
            }
            pairs.push(PairExample {
                i: slot[i],
                j: slot[j],
                target: pair_target(finals[i], finals[j]),
            });
        }
        let batch: Vec<&EncodedInput> = unique.iter().map(|&r| &inputs[r]).collect();

        let g = Graph::new();
        let vars = ranker.params.store().bind(&g);
        let want: Vec<f64> = if use_perf { unique.iter().map(|&r| perf_targets[r]).collect() } else { Vec::new() };
        let (total, parts) = total_loss(&ranker, &g, &vars, &batch, &pairs, use_perf.then_some(&want[..]))?;
        let m = TrainingMetrics { step, ..parts };
        if !m.loss_total.is_finite() {
            return Err(RankerError::Diverged { step, what: "loss" });
        }
        metrics.push(m);

        let mut grads = g.backward(total)?;
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| grads.take(v)).collect();
        adam.step(ranker.params.store_mut().tensors_mut(), &grads)?;
        if !ranker.params.store().all_finite() {
            return Err(RankerError::Diverged { step, what: "parameters" });
        }
        for &r in &unique {
            slot[r] = usize::MAX;
        }
    }
    Ok(TrainedModel { ranker, metrics })
}

/// Builds `L_total = α·L_ce + (1 − α)·L_rec (+ λ·L_perf)` for one batch.
/// `pairs` index into `batch`; `perf_targets` (normalized finals, one per
/// batch entry) enable the final-performance term.
pub fn total_loss(
    ranker: &Ranker,
    g: &Graph,
    vars: &[Var],
    batch: &[&EncodedInput],
    pairs: &[PairExample],
    perf_targets: Option<&[f64]>,
) -> Result<(Var, TrainingMetrics)> {
    let alpha = ranker.config.alpha;
    let fwd = ranker.forward(g, vars, batch, ranker.config.training.reconstruction_batch)?;
    let ce = pair_loss(g, fwd.scores, pairs)?;
    let rec = fwd.rec_loss.expect("at least one decoded row");
    let mut total = g.add(g.scale(ce, alpha), g.scale(rec, 1.0 - alpha))?;
    let mut loss_perf = 0.0;
    if let Some(want) = perf_targets {
        let want = g.constant(Tensor::new(&[batch.len(), 1], want.to_vec())?);
        let perf = g.mean(g.square(g.sub(fwd.perf, want)?));
        loss_perf = g.scalar(perf);
        total = g.add(total, g.scale(perf, ranker.config.perf_head_weight))?;
    }
    let m = TrainingMetrics {
        step: 0,
        loss_ce: g.scalar(ce),
        loss_rec: g.scalar(rec),
        loss_perf,
        loss_total: g.scalar(total),
    };
    Ok((total, m))
}

/// Mean pairwise cross-entropy of `σ(f_i − f_j)` against the targets.
pub(crate) fn pair_loss(g: &Graph, scores: Var, pairs: &[PairExample]) -> Result<Var> {
    let n = pairs.len();
    let fi = g.gather_rows(scores, &pairs.iter().map(|p| p.i).collect::<Vec<_>>())?;
    let fj = g.gather_rows(scores, &pairs.iter().map(|p| p.j).collect::<Vec<_>>())?;
    let p_hat = g.clamp(g.sigmoid(g.sub(fi, fj)?), PROB_CLAMP, 1.0 - PROB_CLAMP);
    let target: Vec<f64> = pairs.iter().map(|p| p.target).collect();
    let rest: Vec<f64> = target.iter().map(|p| 1.0 - p).collect();
    let t = g.constant(Tensor::new(&[n, 1], target)?);
    let u = g.constant(Tensor::new(&[n, 1], rest)?);
    let log_p = g.log(p_hat)?;
    let log_q = g.log(g.add_scalar(g.neg(p_hat), 1.0))?;
    let both = g.add(g.mul(t, log_p)?, g.mul(u, log_q)?)?;
    Ok(g.scale(g.sum(both), -1.0 / n as f64))
}

/// Teacher-forced token accuracy of the architecture decoder on `records`.
pub fn reconstruction_accuracy(ranker: &Ranker, records: &[&RunRecord]) -> Result<f64> {
    let inputs: Vec<EncodedInput> = records
        .iter()
        .map(|r| ranker.features.encode(r, ranker.length))
        .collect::<Result<_>>()?;
    Ok(ranker.reconstruction(&inputs)?.0)
}
