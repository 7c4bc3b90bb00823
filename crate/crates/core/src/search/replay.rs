use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, SearchError};
use crate::corpus::{Corpus, NormalizationStats, RunRecord};
use crate::termination::{halving_replay, replay_policy, ReplayDecision, ReplayRun, SearchState, TerminationPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub dataset: String,
    pub policy: String,
    pub seed: u64,
    pub chosen_run_id: String,
    /// Best final over the whole order minus the final of the chosen run,
    /// in normalized units.
    pub regret: f64,
    pub epochs_consumed: usize,
    pub decisions: Vec<ReplayDecision>,
}

/// `records` in a seeded random order.
pub fn order_runs<'a>(records: &[&'a RunRecord], seed: u64) -> Vec<&'a RunRecord> {
    let mut out = records.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Successive halving over all `n_runs` at once, with the interval chosen
/// so that the rounds span the full curve length.
pub fn default_successive_halving(n_runs: usize, max_len: usize) -> TerminationPolicy {
    let mut rounds = 1;
    let mut alive = n_runs.max(1);
    while alive > 1 {
        alive /= 2;
        rounds += 1;
    }
    TerminationPolicy::SuccessiveHalving {
        initial_runs: n_runs.max(1),
        interval: max_len.div_ceil(rounds).max(1),
    }
}

pub fn default_hyperband(max_len: usize) -> TerminationPolicy {
    TerminationPolicy::Hyperband {
        max_resource: max_len.max(1),
        eta: 3,
    }
}

/// Replays a random search over the runs of `held_out` in a seeded order
/// under `policy`. Curves are normalized with the dataset's own range.
pub fn random_search_replay(
    corpus: &Corpus,
    held_out: &str,
    policy: &TerminationPolicy,
    order_seed: u64,
) -> Result<ReplayResult> {
    policy.validate()?;
    let (_, records) = corpus.lodo_split(held_out)?;
    if records.is_empty() {
        return Err(SearchError::InsufficientRuns {
            dataset: held_out.to_string(),
            needed: 1,
            found: 0,
        });
    }
    let stats = NormalizationStats::from_records(records.iter().copied());
    let ordered = order_runs(&records, order_seed);
    let runs: Vec<ReplayRun> = ordered
        .iter()
        .map(|r| ReplayRun::new(r, &stats))
        .collect::<std::result::Result<_, _>>()?;
    let reference = runs.iter().map(ReplayRun::final_value).fold(f64::NEG_INFINITY, f64::max);

    let (decisions, chosen) = if policy.is_sequential() {
        let policy = policy.for_dataset(held_out)?;
        policy.check_coverage(runs.iter().map(ReplayRun::len).max().unwrap_or(0))?;
        let mut state = SearchState::new();
        let mut decisions = Vec::with_capacity(runs.len());
        for run in &runs {
            decisions.push(replay_policy(run, &mut state, &policy)?);
        }
        let chosen_id = state.incumbent.as_ref().map(|r| r.run_id.clone()).expect("first run completes");
        let chosen = runs.iter().position(|r| r.record.run_id == chosen_id).expect("incumbent is a replayed run");
        (decisions, chosen)
    } else {
        halving_replay(&runs, policy)?
    };
    let epochs_consumed = decisions.iter().map(|d| d.stop_epoch).sum();
    Ok(ReplayResult {
        dataset: held_out.to_string(),
        policy: policy.name().to_string(),
        seed: order_seed,
        chosen_run_id: runs[chosen].record.run_id.clone(),
        regret: reference - runs[chosen].final_value(),
        epochs_consumed,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SyntheticSpec};

    fn corpus() -> Corpus {
        synth_generate(&SyntheticSpec {
            n_datasets: 2,
            runs_per_dataset: 40,
            epochs: 30,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn none_policy_has_zero_regret_and_full_cost() {
        let c = corpus();
        let r = random_search_replay(&c, "synth-1", &TerminationPolicy::None, 7).unwrap();
        assert_eq!(r.regret, 0.0);
        assert_eq!(r.epochs_consumed, 40 * 30);
        assert!(r.decisions.iter().all(|d| !d.stopped_early));
    }

    #[test]
    fn baselines_respect_accounting_bounds() {
        let c = corpus();
        for policy in [
            TerminationPolicy::LastValue { cadence: 3, margin: 0.0 },
            default_successive_halving(40, 30),
            default_hyperband(30),
        ] {
            for seed in 0..3 {
                let r = random_search_replay(&c, "synth-0", &policy, seed).unwrap();
                assert!(r.regret >= 0.0, "{}", r.policy);
                assert!(r.epochs_consumed < 40 * 30, "{}", r.policy);
                assert_eq!(r.decisions.len(), 40);
                assert_eq!(r.epochs_consumed, r.decisions.iter().map(|d| d.stop_epoch).sum::<usize>());
            }
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let c = corpus();
        let p = default_hyperband(30);
        assert_eq!(
            random_search_replay(&c, "synth-0", &p, 3).unwrap(),
            random_search_replay(&c, "synth-0", &p, 3).unwrap()
        );
    }

    #[test]
    fn default_sh_spans_the_curve() {
        match default_successive_halving(100, 100) {
            TerminationPolicy::SuccessiveHalving { initial_runs, interval } => {
                assert_eq!(initial_runs, 100);
                assert_eq!(interval, 15);
            }
            _ => unreachable!(),
        }
    }
}
