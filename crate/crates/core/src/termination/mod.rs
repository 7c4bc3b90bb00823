//! Early-termination policies and their replay against fully stored curves.

mod schedule;

pub use schedule::{
    halving_replay, hyperband_brackets, run_rounds, successive_halving_rounds, successive_halving_schedule, Bracket,
    HalvingRound, RoundsOutcome,
};

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, NormalizationStats, RunRecord};
use crate::ranker::{pair_probability, ModelBank, RankerError};

#[derive(Debug, Error)]
pub enum TerminationError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TerminationError>;

pub const DEFAULT_DELTA: f64 = 0.45;
pub const DEFAULT_CADENCE: usize = 3;

/// How the incumbent is presented to `f_l` when scoring a pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncumbentInput {
    /// Incumbent curve cut to the same length as the candidate.
    #[default]
    Truncated,
    Full,
}

#[derive(Debug, Clone)]
pub struct LcRankNetPolicy {
    pub delta: f64,
    pub cadence: usize,
    pub incumbent_input: IncumbentInput,
    pub bank: Arc<ModelBank>,
}

impl LcRankNetPolicy {
    pub fn new(bank: ModelBank) -> Self {
        LcRankNetPolicy {
            delta: DEFAULT_DELTA,
            cadence: DEFAULT_CADENCE,
            incumbent_input: IncumbentInput::Truncated,
            bank: Arc::new(bank),
        }
    }
}

#[derive(Debug, Clone)]
pub enum TerminationPolicy {
    None,
    LcRankNet(LcRankNetPolicy),
    /// Stops when the best partial value plus `margin` is below `y_max`.
    LastValue { cadence: usize, margin: f64 },
    /// Runs are grouped in consecutive blocks of `initial_runs`.
    SuccessiveHalving { initial_runs: usize, interval: usize },
    Hyperband { max_resource: usize, eta: usize },
}

impl TerminationPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            TerminationPolicy::None => "none",
            TerminationPolicy::LcRankNet(_) => "lcranknet",
            TerminationPolicy::LastValue { .. } => "last-value",
            TerminationPolicy::SuccessiveHalving { .. } => "sh",
            TerminationPolicy::Hyperband { .. } => "hyperband",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TerminationError::InvalidPolicy(m.to_string()));
        match self {
            TerminationPolicy::None => Ok(()),
            TerminationPolicy::LcRankNet(p) => {
                if !(0.0..=1.0).contains(&p.delta) {
                    return bad("delta must lie in [0, 1]");
                }
                if p.cadence == 0 {
                    return bad("cadence must be at least 1");
                }
                Ok(())
            }
            TerminationPolicy::LastValue { cadence, margin } => {
                if *cadence == 0 {
                    return bad("cadence must be at least 1");
                }
                if !margin.is_finite() {
                    return bad("margin must be finite");
                }
                Ok(())
            }
            TerminationPolicy::SuccessiveHalving { initial_runs, interval } => {
                if *initial_runs == 0 || *interval == 0 {
                    return bad("successive halving needs n >= 1 and r >= 1");
                }
                Ok(())
            }
            TerminationPolicy::Hyperband { max_resource, eta } => {
                if *max_resource == 0 || *eta < 2 {
                    return bad("hyperband needs R >= 1 and eta >= 2");
                }
                Ok(())
            }
        }
    }

    /// Sequential policies decide run by run against an incumbent; the
    /// others schedule a whole block of runs at once.
    pub fn is_sequential(&self) -> bool {
        matches!(
            self,
            TerminationPolicy::None | TerminationPolicy::LcRankNet(_) | TerminationPolicy::LastValue { .. }
        )
    }

    /// Copy of the policy whose model bank knows `dataset_id`.
    pub fn for_dataset(&self, dataset_id: &str) -> Result<TerminationPolicy> {
        let mut out = self.clone();
        if let TerminationPolicy::LcRankNet(p) = &mut out {
            let known = p
                .bank
                .models()
                .all(|m| m.params.dataset_index(dataset_id).is_some());
            if !known {
                Arc::make_mut(&mut p.bank).ensure_dataset(dataset_id)?;
            }
        }
        Ok(out)
    }

    /// Checks that an LCRankNet bank holds a model at every decision point
    /// of curves of length `max_len`.
    pub fn check_coverage(&self, max_len: usize) -> Result<()> {
        if let TerminationPolicy::LcRankNet(p) = self {
            for l in (p.cadence..max_len).step_by(p.cadence) {
                p.bank.get(l)?;
            }
        }
        Ok(())
    }
}

/// A run prepared for replay: its curve in normalized, higher-is-better units.
#[derive(Debug, Clone)]
pub struct ReplayRun<'a> {
    pub record: &'a RunRecord,
    pub curve: Vec<f64>,
}

impl<'a> ReplayRun<'a> {
    pub fn new(record: &'a RunRecord, stats: &NormalizationStats) -> Result<Self> {
        Ok(ReplayRun {
            record,
            curve: stats.normalize(record, record.len())?,
        })
    }

    pub fn len(&self) -> usize {
        self.curve.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curve.is_empty()
    }

    pub fn final_value(&self) -> f64 {
        *self.curve.last().unwrap_or(&f64::NEG_INFINITY)
    }

    /// Best value among the first `l` epochs.
    pub fn best_until(&self, l: usize) -> f64 {
        best(&self.curve[..l.min(self.curve.len())])
    }
}

fn best(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Mutable state of one sequential search.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub incumbent: Option<RunRecord>,
    pub y_max: f64,
    pub completed_finals: Vec<f64>,
    pub epochs_consumed: usize,
}

impl Default for SearchState {
    fn default() -> Self {
        SearchState {
            incumbent: None,
            y_max: f64::NEG_INFINITY,
            completed_finals: Vec::new(),
            epochs_consumed: 0,
        }
    }
}

impl SearchState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    Stop,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Continue => "continue",
            Action::Stop => "stop",
        }
    }
}

/// One consultation of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    /// Best partial value seen so far.
    pub statistic: f64,
    /// Pair probability against the incumbent, when it was computed.
    pub p: Option<f64>,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDecision {
    pub run_id: String,
    pub stop_epoch: usize,
    pub stopped_early: bool,
    pub trace: Vec<Checkpoint>,
}

impl ReplayDecision {
    /// `(epoch, p)` for every checkpoint where a probability was computed.
    pub fn probabilities(&self) -> Vec<(usize, f64)> {
        self.trace.iter().filter_map(|c| c.p.map(|p| (c.epoch, p))).collect()
    }
}

/// One LCRankNet check on the partial curve `partial` (normalized) of `run`.
/// Returns whether to stop and the pair probability if it was needed.
pub fn should_stop_lcranknet(
    policy: &LcRankNetPolicy,
    run: &RunRecord,
    partial: &[f64],
    state: &SearchState,
) -> Result<(bool, Option<f64>)> {
    let Some(incumbent) = &state.incumbent else {
        return Ok((false, None));
    };
    if best(partial) > state.y_max {
        return Ok((false, None));
    }
    let l = partial.len();
    let model = policy.bank.get(l)?;
    let inc_len = match policy.incumbent_input {
        IncumbentInput::Truncated => l,
        IncumbentInput::Full => incumbent.len(),
    };
    let inputs = [
        model.features.encode(run, l)?,
        model.features.encode(incumbent, inc_len)?,
    ];
    let s = model.scores(&inputs)?;
    let p = pair_probability(s[0], s[1]);
    Ok((p <= policy.delta, Some(p)))
}

pub fn last_value_stop(partial: &[f64], y_max: f64, margin: f64) -> bool {
    !partial.is_empty() && best(partial) + margin < y_max
}

/// Replays one run under a sequential policy, updating `state`.
pub fn replay_policy(run: &ReplayRun, state: &mut SearchState, policy: &TerminationPolicy) -> Result<ReplayDecision> {
    let cadence = match policy {
        TerminationPolicy::None => None,
        TerminationPolicy::LcRankNet(p) => Some(p.cadence),
        TerminationPolicy::LastValue { cadence, .. } => Some(*cadence),
        _ => {
            return Err(TerminationError::InvalidPolicy(format!(
                "{} schedules whole run sets, not single runs",
                policy.name()
            )))
        }
    };
    let len = run.len();
    let mut stop_epoch = len;
    let mut trace = Vec::new();
    if let (Some(cadence), Some(_)) = (cadence, &state.incumbent) {
        for e in (cadence..len).step_by(cadence) {
            let partial = &run.curve[..e];
            let (stop, p) = match policy {
                TerminationPolicy::LcRankNet(p) => should_stop_lcranknet(p, run.record, partial, state)?,
                TerminationPolicy::LastValue { margin, .. } => (last_value_stop(partial, state.y_max, *margin), None),
                _ => unreachable!(),
            };
            trace.push(Checkpoint {
                epoch: e,
                statistic: best(partial),
                p,
                action: if stop { Action::Stop } else { Action::Continue },
            });
            if stop {
                stop_epoch = e;
                break;
            }
        }
    }
    state.epochs_consumed += stop_epoch;
    if stop_epoch == len {
        let fin = run.final_value();
        state.completed_finals.push(fin);
        if fin > state.y_max {
            state.y_max = fin;
            state.incumbent = Some(run.record.clone());
        }
    }
    Ok(ReplayDecision {
        run_id: run.record.run_id.clone(),
        stop_epoch,
        stopped_early: stop_epoch < len,
        trace,
    })
}

/// Writes decision traces as CSV: `run_id,epoch,p,statistic,action`.
pub fn write_trace_csv<W: Write>(writer: W, decisions: &[ReplayDecision]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["run_id", "epoch", "p", "statistic", "action"])?;
    for d in decisions {
        for c in &d.trace {
            w.write_record([
                d.run_id.clone(),
                c.epoch.to_string(),
                c.p.map(|p| p.to_string()).unwrap_or_default(),
                c.statistic.to_string(),
                c.action.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
