use super::{best, Action, Checkpoint, ReplayDecision, ReplayRun, Result, TerminationError, TerminationPolicy};

/// Runs entering a round and the cumulative epoch count each reaches in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HalvingRound {
    pub runs: usize,
    pub resource: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bracket {
    pub s: usize,
    pub rounds: Vec<HalvingRound>,
}

impl Bracket {
    /// `Σ n_i · r_i` as planned, without reuse of earlier epochs.
    pub fn planned_budget(&self) -> usize {
        self.rounds.iter().map(|r| r.runs * r.resource).sum()
    }
}

/// Rounds of successive halving with `n` starting runs and `r` epochs per
/// round on curves of length `max_len`. Each round keeps `floor(n/2)`.
pub fn successive_halving_rounds(n: usize, r: usize, max_len: usize) -> Vec<HalvingRound> {
    if n == 1 {
        return vec![HalvingRound {
            runs: 1,
            resource: max_len,
        }];
    }
    let mut rounds = vec![HalvingRound {
        runs: n,
        resource: r.min(max_len),
    }];
    loop {
        let last = rounds[rounds.len() - 1];
        if last.runs <= 1 || last.resource >= max_len {
            break;
        }
        rounds.push(HalvingRound {
            runs: last.runs / 2,
            resource: (last.resource + r).min(max_len),
        });
    }
    rounds
}

fn pow(base: usize, exp: usize) -> usize {
    (0..exp).fold(1, |acc, _| acc * base)
}

/// Hyperband brackets for maximum resource `max_resource` and ratio `eta`,
/// from the most exploratory (`s = s_max`) down to `s = 0`.
pub fn hyperband_brackets(max_resource: usize, eta: usize) -> Vec<Bracket> {
    let mut s_max = 0;
    while pow(eta, s_max + 1) <= max_resource {
        s_max += 1;
    }
    (0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max + 1) * pow(eta, s)).div_ceil(s + 1);
            let rounds = (0..=s)
                .map(|i| HalvingRound {
                    runs: n / pow(eta, i),
                    resource: (max_resource * pow(eta, i) / pow(eta, s)).max(1),
                })
                .collect();
            Bracket { s, rounds }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundsOutcome {
    pub stop_epochs: Vec<usize>,
    pub traces: Vec<Vec<Checkpoint>>,
    /// Runs still alive after the last round, best first.
    pub survivors: Vec<usize>,
}

/// Executes `rounds` over `curves`. After every round but the last, runs
/// are ranked by their best partial value (ties go to the lower index) and
/// the top `runs` of the next round continue. A run's stop epoch is the
/// resource of the last round it took part in.
pub fn run_rounds(curves: &[&[f64]], rounds: &[HalvingRound]) -> RoundsOutcome {
    let mut stop_epochs = vec![0; curves.len()];
    let mut traces = vec![Vec::new(); curves.len()];
    let mut alive: Vec<usize> = (0..curves.len()).collect();
    for (k, round) in rounds.iter().enumerate() {
        for &i in &alive {
            stop_epochs[i] = round.resource.min(curves[i].len());
        }
        let stat = |i: usize| best(&curves[i][..stop_epochs[i]]);
        alive.sort_by(|&a, &b| stat(b).total_cmp(&stat(a)).then(a.cmp(&b)));
        let Some(next) = rounds.get(k + 1) else {
            break;
        };
        let keep = next.runs.max(1).min(alive.len());
        for (pos, &i) in alive.iter().enumerate() {
            traces[i].push(Checkpoint {
                epoch: stop_epochs[i],
                statistic: stat(i),
                p: None,
                action: if pos < keep { Action::Continue } else { Action::Stop },
            });
        }
        alive.truncate(keep);
    }
    RoundsOutcome {
        stop_epochs,
        traces,
        survivors: alive,
    }
}

/// Stop epoch of every curve under successive halving with `n` starting
/// runs and interval `r`; curves beyond the first `n` are not started.
pub fn successive_halving_schedule(curves: &[&[f64]], n: usize, r: usize) -> Vec<usize> {
    let max_len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    let used = n.min(curves.len());
    let mut out = run_rounds(&curves[..used], &successive_halving_rounds(n, r, max_len)).stop_epochs;
    out.resize(curves.len(), 0);
    out
}

/// Replays a block policy over `runs` in order. Successive halving handles
/// consecutive groups of `initial_runs`; Hyperband fills its brackets in
/// order, starting over at the first bracket when all are full. Returns the
/// decisions and the index of the chosen run: the best final among runs
/// observed to their last epoch, else the best surviving partial.
pub fn halving_replay(runs: &[ReplayRun], policy: &TerminationPolicy) -> Result<(Vec<ReplayDecision>, usize)> {
    policy.validate()?;
    if runs.is_empty() {
        return Err(TerminationError::InvalidPolicy("no runs to schedule".into()));
    }
    let max_len = runs.iter().map(ReplayRun::len).max().unwrap_or(0);
    let plans: Vec<Vec<HalvingRound>> = match policy {
        TerminationPolicy::SuccessiveHalving { initial_runs, interval } => {
            vec![successive_halving_rounds(*initial_runs, *interval, max_len)]
        }
        TerminationPolicy::Hyperband { max_resource, eta } => hyperband_brackets(*max_resource, *eta)
            .into_iter()
            .map(|b| b.rounds)
            .collect(),
        _ => {
            return Err(TerminationError::InvalidPolicy(format!(
                "{} is not a block schedule",
                policy.name()
            )))
        }
    };
    let mut decisions = Vec::with_capacity(runs.len());
    let mut candidates = Vec::new();
    let mut start = 0;
    for plan in plans.iter().cycle() {
        if start >= runs.len() {
            break;
        }
        let end = (start + plan[0].runs).min(runs.len());
        let curves: Vec<&[f64]> = runs[start..end].iter().map(|r| r.curve.as_slice()).collect();
        let outcome = run_rounds(&curves, plan);
        for (k, run) in runs[start..end].iter().enumerate() {
            let stop_epoch = outcome.stop_epochs[k];
            decisions.push(ReplayDecision {
                run_id: run.record.run_id.clone(),
                stop_epoch,
                stopped_early: stop_epoch < run.len(),
                trace: outcome.traces[k].clone(),
            });
        }
        candidates.extend(outcome.survivors.iter().map(|&k| start + k));
        start = end;
    }
    let complete = |i: &usize| decisions[*i].stop_epoch == runs[*i].len();
    let value = |i: usize| {
        if complete(&i) {
            runs[i].final_value()
        } else {
            runs[i].best_until(decisions[i].stop_epoch)
        }
    };
    let pool: Vec<usize> = if candidates.iter().any(complete) {
        candidates.iter().copied().filter(complete).collect()
    } else {
        candidates
    };
    let chosen = pool
        .into_iter()
        .reduce(|a, b| if value(b) > value(a) { b } else { a })
        .expect("at least one survivor");
    Ok((decisions, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(values: &[f64], len: usize) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v; len]).collect()
    }

    #[test]
    fn sh_budget_matches_closed_form() {
        let curves = flat(&[0.1, 0.8, 0.3, 0.5, 0.2, 0.9, 0.4, 0.6], 20);
        let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
        let stops = successive_halving_schedule(&refs, 8, 3);
        assert_eq!(stops.iter().sum::<usize>(), 8 * 3 + 4 * 3 + 2 * 3 + 3);
        assert_eq!(stops[5], 12);
        assert_eq!(stops[1], 9);
    }

    #[test]
    fn sh_budget_oracle_over_sizes() {
        for n in 2..40usize {
            for r in 1..5 {
                let curves = flat(&(0..n).map(|i| i as f64).collect::<Vec<_>>(), 1000);
                let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
                let total: usize = successive_halving_schedule(&refs, n, r).iter().sum();
                let mut oracle = 0;
                let mut alive = n;
                while alive > 1 {
                    oracle += alive * r;
                    alive /= 2;
                }
                oracle += r;
                assert_eq!(total, oracle, "n={n} r={r}");
            }
        }
    }

    #[test]
    fn sh_single_run_completes() {
        let curves = flat(&[0.5], 30);
        let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
        assert_eq!(successive_halving_schedule(&refs, 1, 3), vec![30]);
    }

    #[test]
    fn sh_ties_stop_the_later_run() {
        let curves = flat(&[0.5, 0.5], 10);
        let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
        assert_eq!(successive_halving_schedule(&refs, 2, 3), vec![6, 3]);
    }

    #[test]
    fn sh_is_capped_by_curve_length() {
        let curves = flat(&[0.1, 0.2, 0.3, 0.4], 5);
        let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
        let stops = successive_halving_schedule(&refs, 4, 3);
        assert_eq!(stops, vec![3, 3, 5, 5]);
    }

    #[test]
    fn hyperband_81_3() {
        let b = hyperband_brackets(81, 3);
        let starts: Vec<(usize, usize)> = b.iter().map(|b| (b.rounds[0].runs, b.rounds[0].resource)).collect();
        assert_eq!(starts, vec![(81, 1), (34, 3), (15, 9), (8, 27), (5, 81)]);
        let oracle = |s_max: usize, s: usize| -> Vec<(usize, usize)> {
            let eta = 3f64;
            let n = ((s_max as f64 + 1.0) / (s as f64 + 1.0) * eta.powi(s as i32)).ceil();
            (0..=s)
                .map(|i| {
                    let ni = (n * eta.powi(-(i as i32))).floor() as usize;
                    let ri = (81.0 * eta.powi(i as i32 - s as i32)).round() as usize;
                    (ni, ri)
                })
                .collect()
        };
        for br in &b {
            let got: Vec<(usize, usize)> = br.rounds.iter().map(|r| (r.runs, r.resource)).collect();
            assert_eq!(got, oracle(4, br.s));
            assert_eq!(br.rounds.last().unwrap().resource, 81);
            assert!(br.planned_budget() <= 5 * 81);
        }
    }

    #[test]
    fn hyperband_single_bracket() {
        let b = hyperband_brackets(1, 3);
        assert_eq!(
            b,
            vec![Bracket {
                s: 0,
                rounds: vec![HalvingRound { runs: 1, resource: 1 }]
            }]
        );
    }

    #[test]
    fn hyperband_budget_within_rounding() {
        for r in 1..200 {
            for eta in 2..5 {
                let b = hyperband_brackets(r, eta);
                let s_max = b[0].s;
                assert!(pow(eta, s_max) <= r && pow(eta, s_max + 1) > r);
                for br in &b {
                    assert!(br.planned_budget() <= (s_max + 1) * r + br.rounds.len() * r.div_ceil(pow(eta, br.s)));
                    assert_eq!(br.rounds.last().unwrap().resource, r);
                }
            }
        }
    }
}
