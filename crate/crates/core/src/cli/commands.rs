use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::svg::{bar_chart, line_chart};
use super::{
    CliError, Command, GenCorpusArgs, OptimizeArgs, PolicyArgs, RankArgs, ReportArgs, Result, SimulateArgs, TrainArgs,
};
use crate::corpus::{load_jsonl, save_jsonl, synth_generate, Corpus, NormalizationStats, SyntheticSpec};
use crate::ranker::{FeatureSpace, ModelBank, ModelConfig};
use crate::search::{
    default_hyperband, default_successive_halving, protocol_model_config, random_search_replay, ranking_experiment,
    read_results_csv, regularized_evolution, write_results_csv, EvolutionConfig, RankingConfig, ResultRow, Scorer,
};
use crate::termination::{write_trace_csv, IncumbentInput, LcRankNetPolicy, TerminationPolicy};

fn list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    load_jsonl(path).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn check_holdout(corpus: &Corpus, holdout: &str) -> Result<()> {
    if corpus.dataset_ids().iter().any(|d| d == holdout) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "unknown holdout {holdout:?} (datasets: {})",
            corpus.dataset_ids().join(", ")
        )))
    }
}

fn write_rows(path: &Path, comments: &[String], rows: &[ResultRow]) -> Result<()> {
    let mut w = create(path)?;
    write_results_csv(&mut w, comments, rows)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn model_comment(cfg: &ModelConfig) -> String {
    format!("model = {}", serde_json::to_string(cfg).unwrap_or_default())
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_datasets: a.datasets,
        runs_per_dataset: a.runs,
        epochs: a.epochs,
        noise_sd: a.noise,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    spec.validate()?;
    let corpus = synth_generate(&spec)?;
    save_jsonl(&corpus, &a.out).map_err(|e| CliError::Io(format!("{}: {e}", a.out.display())))?;
    println!("wrote {} records to {}", corpus.len(), a.out.display());
    Ok(())
}

/// Lengths from a comma list or `cadence:K`.
pub fn parse_lengths(spec: &str, max_len: usize) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("invalid --lengths {spec:?}"));
    let mut lengths: Vec<usize> = if let Some(k) = spec.strip_prefix("cadence:") {
        let k: usize = k.trim().parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        (k..max_len).step_by(k).collect()
    } else {
        list(spec)
            .into_iter()
            .map(|x| x.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.is_empty() {
        return Err(bad());
    }
    if let Some(l) = lengths.iter().find(|&&l| l > max_len) {
        return Err(CliError::Usage(format!("length {l} exceeds the curve length {max_len}")));
    }
    Ok(lengths)
}

/// Model configuration of `train` and `optimize` before flag overrides.
pub fn train_base_config() -> ModelConfig {
    ModelConfig {
        perf_head_weight: ModelConfig::default().perf_head_weight,
        ..protocol_model_config()
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.apply(train_base_config())?;
    let corpus = load_corpus(&a.corpus)?;
    check_holdout(&corpus, &a.holdout)?;
    let (meta, held) = corpus.lodo_split(&a.holdout)?;
    let max_len = held.iter().map(|r| r.len()).max().unwrap_or(0);
    let lengths = parse_lengths(&a.lengths, max_len)?;
    let features = FeatureSpace::fit(&meta, &cfg.log_hparams)?;
    let (mut bank, metrics) = ModelBank::train(&meta, &lengths, &cfg, &features)?;
    bank.holdout = Some(a.holdout.clone());
    let manifest = bank.save_dir(&a.out_dir)?;
    for (l, m) in &metrics {
        if let Some(last) = m.last() {
            println!(
                "l={l} loss_total={:.6} loss_ce={:.6} loss_rec={:.6}",
                last.loss_total, last.loss_ce, last.loss_rec
            );
        }
    }
    println!("wrote {} checkpoints to {}", manifest.models.len(), a.out_dir.display());
    Ok(())
}

pub fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    list(s)
        .into_iter()
        .map(|x| {
            x.parse::<f64>()
                .ok()
                .filter(|f| (0.0..=1.0).contains(f))
                .ok_or_else(|| CliError::Usage(format!("invalid fraction {x:?}")))
        })
        .collect()
}

pub fn rank(a: &RankArgs, cmd: &Command) -> Result<()> {
    let scorers: Vec<Scorer> = list(&a.scorers)
        .into_iter()
        .map(|s| s.parse().map_err(CliError::Usage))
        .collect::<Result<_>>()?;
    if scorers.is_empty() {
        return Err(CliError::Usage("no scorer given".into()));
    }
    let config = RankingConfig {
        test_runs: a.test_runs,
        train_runs: a.train_runs,
        repetitions: a.repetitions,
        fractions: parse_fractions(&a.fractions)?,
        model: a.model.apply(protocol_model_config())?,
        seed: a.seed,
    };
    config.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    check_holdout(&corpus, &a.holdout)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for scorer in scorers {
        let r = ranking_experiment(&corpus, &a.holdout, &config, scorer)?;
        for p in &r.points {
            match (p.mean, p.sd) {
                (Some(m), Some(sd)) => println!("{scorer} fraction={} length={} mean={m:.4} sd={sd:.4}", p.fraction, p.length),
                _ => println!("{scorer} fraction={} length={} undefined", p.fraction, p.length),
            }
        }
        series.push((
            scorer.name().to_string(),
            r.points.iter().filter_map(|p| p.mean.map(|m| (p.fraction, m))).collect(),
        ));
        rows.extend(ResultRow::from_ranking(&r));
    }
    let mut comments = cmd.resolved();
    comments.push(model_comment(&config.model));
    write_rows(&a.out, &comments, &rows)?;
    if let Some(svg) = &a.svg {
        let title = format!("Rank correlation on {}", a.holdout);
        write_text(svg, &line_chart(&title, "observed fraction of curve", "mean Spearman", &series))?;
    }
    Ok(())
}

fn load_bank(p: &PolicyArgs, holdout: &str) -> Result<ModelBank> {
    let Some(dir) = &p.bank else {
        return Err(CliError::Usage("policy lcranknet needs --bank".into()));
    };
    let bank = ModelBank::load_dir(dir).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", dir.display())),
        other => other,
    })?;
    if let Some(h) = &bank.holdout {
        if h != holdout {
            return Err(CliError::Usage(format!(
                "bank in {} was trained with holdout {h:?}, not {holdout:?}",
                dir.display()
            )));
        }
    }
    Ok(bank)
}

fn incumbent_input(s: &str) -> Result<IncumbentInput> {
    match s {
        "truncated" => Ok(IncumbentInput::Truncated),
        "full" => Ok(IncumbentInput::Full),
        _ => Err(CliError::Usage(format!("unknown incumbent input {s:?} (truncated, full)"))),
    }
}

fn build_policy(name: &str, p: &PolicyArgs, corpus: &Corpus, holdout: &str) -> Result<TerminationPolicy> {
    let records = corpus.dataset_records(holdout);
    let max_len = records.iter().map(|r| r.len()).max().unwrap_or(0);
    let policy = match name {
        "none" => TerminationPolicy::None,
        "lcranknet" => TerminationPolicy::LcRankNet(LcRankNetPolicy {
            delta: p.delta,
            cadence: p.cadence,
            incumbent_input: incumbent_input(&p.incumbent)?,
            ..LcRankNetPolicy::new(load_bank(p, holdout)?)
        }),
        "last-value" => TerminationPolicy::LastValue {
            cadence: p.cadence,
            margin: p.margin,
        },
        "sh" => default_successive_halving(records.len(), max_len),
        "hyperband" => default_hyperband(max_len),
        _ => {
            return Err(CliError::Usage(format!(
                "unknown policy {name:?} (none, lcranknet, last-value, sh, hyperband)"
            )))
        }
    };
    policy.validate()?;
    if let TerminationPolicy::LcRankNet(_) = &policy {
        policy.check_coverage(max_len)?;
    }
    Ok(policy)
}

pub fn simulate(a: &SimulateArgs, cmd: &Command) -> Result<()> {
    let names = list(&a.policies);
    if names.is_empty() || a.seeds == 0 {
        return Err(CliError::Usage("need at least one policy and one seed".into()));
    }
    let corpus = load_corpus(&a.corpus)?;
    check_holdout(&corpus, &a.holdout)?;
    let policies: Vec<TerminationPolicy> = names
        .iter()
        .map(|n| build_policy(n, &a.policy, &corpus, &a.holdout))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, u64)> = (0..policies.len())
        .flat_map(|i| (0..a.seeds).map(move |k| (i, a.seed + k)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(i, seed)| random_search_replay(&corpus, &a.holdout, &policies[i], seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rows: Vec<ResultRow> = results.iter().map(ResultRow::from_replay).collect();
    write_rows(&a.out, &cmd.resolved(), &rows)?;
    if let Some(dir) = &a.trace_dir {
        for r in &results {
            let path = dir.join(format!("{}_seed{}.csv", r.policy, r.seed));
            let mut w = create(&path)?;
            write_trace_csv(&mut w, &r.decisions)?;
            w.flush()?;
        }
    }
    let mut bars = Vec::new();
    for p in &policies {
        let mine: Vec<_> = results.iter().filter(|r| r.policy == p.name()).collect();
        let n = mine.len() as f64;
        let epochs = mine.iter().map(|r| r.epochs_consumed as f64).sum::<f64>() / n;
        let regret = mine.iter().map(|r| r.regret).sum::<f64>() / n;
        println!("{} epochs={epochs:.1} regret={regret:.6}", p.name());
        bars.push((p.name().to_string(), epochs));
    }
    if let Some(svg) = &a.svg {
        let title = format!("Epochs consumed on {}", a.holdout);
        write_text(svg, &bar_chart(&title, "mean epochs", &bars))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    evaluations: usize,
    epochs: usize,
    incumbent: f64,
}

pub fn optimize(a: &OptimizeArgs, cmd: &Command) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    check_holdout(&corpus, &a.holdout)?;
    if !matches!(a.policy.as_str(), "none" | "lcranknet" | "last-value") {
        return Err(CliError::Usage(format!(
            "optimize supports policies none, lcranknet, last-value, not {:?}",
            a.policy
        )));
    }
    let policy = build_policy(&a.policy, &a.policy_args, &corpus, &a.holdout)?;
    let config = EvolutionConfig {
        population: a.population,
        tournament: a.tournament,
        mutation_rate: a.mutation_rate,
        budget: a.budget,
        seed: a.seed,
    };
    let result = regularized_evolution(&corpus, &a.holdout, &policy, &config)?;
    let records = corpus.dataset_records(&a.holdout);
    let stats = NormalizationStats::from_records(records.iter().copied());
    let mut best = f64::NEG_INFINITY;
    for r in &records {
        best = best.max(stats.normalized_final(r)?);
    }
    let regret = best - result.best_final;
    let row = ResultRow {
        protocol: "optimize".into(),
        dataset: result.dataset.clone(),
        policy: result.policy.clone(),
        seed: a.seed,
        length_fraction: None,
        spearman: None,
        regret: Some(regret),
        epochs: Some(result.epochs_consumed),
    };
    write_rows(&a.out, &cmd.resolved(), &[row])?;
    if let Some(path) = &a.trace {
        let mut w = create(path)?;
        for c in cmd.resolved() {
            writeln!(w, "# {c}")?;
        }
        let mut csv = csv::Writer::from_writer(w);
        for t in &result.trace {
            csv.serialize(TraceRow {
                evaluations: t.evaluations,
                epochs: t.epochs,
                incumbent: t.incumbent,
            })?;
        }
        csv.flush()?;
    }
    println!(
        "best {} regret={regret:.6} epochs={} evaluations={}",
        result.best_run_id,
        result.epochs_consumed,
        result.evaluations.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    protocol: String,
    dataset: String,
    policy: String,
    length_fraction: Option<f64>,
    n: usize,
    spearman: Option<f64>,
    regret: Option<f64>,
    epochs: Option<f64>,
    speedup: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fraction_key(f: Option<f64>) -> i64 {
    f.map_or(-1, |f| (f * 1e9).round() as i64)
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let inputs = list(&a.input);
    if inputs.is_empty() {
        return Err(CliError::Usage("no --input given".into()));
    }
    let mut rows = Vec::new();
    for path in inputs {
        let f = File::open(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
        rows.extend(read_results_csv(f).map_err(|e| CliError::Io(format!("{path}: {e}")))?);
    }
    if rows.is_empty() {
        return Err(CliError::Usage("input CSVs contain no rows".into()));
    }
    type Key = (String, String, String, i64);
    let mut cells: BTreeMap<Key, Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        let key = (r.protocol.clone(), r.dataset.clone(), r.policy.clone(), fraction_key(r.length_fraction));
        cells.entry(key).or_default().push(r);
    }
    let summary: Vec<SummaryRow> = cells
        .iter()
        .map(|((protocol, dataset, policy, _), v)| {
            let epochs = mean(v.iter().filter_map(|r| r.epochs.map(|e| e as f64)));
            let none = cells
                .iter()
                .filter(|((p, d, q, _), _)| p == protocol && d == dataset && q == "none")
                .flat_map(|(_, v)| v.iter().filter_map(|r| r.epochs.map(|e| e as f64)));
            let speedup = match (mean(none), epochs) {
                (Some(n), Some(e)) if e > 0.0 => Some(n / e),
                _ => None,
            };
            SummaryRow {
                protocol: protocol.clone(),
                dataset: dataset.clone(),
                policy: policy.clone(),
                length_fraction: v[0].length_fraction,
                n: v.len(),
                spearman: mean(v.iter().filter_map(|r| r.spearman)),
                regret: mean(v.iter().filter_map(|r| r.regret)),
                epochs,
                speedup,
            }
        })
        .collect();
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", a.out_dir.display())))?;
    let mut w = csv::Writer::from_writer(create(&a.out_dir.join("summary.csv"))?);
    for s in &summary {
        w.serialize(s)?;
    }
    w.flush()?;

    let mut protocols: Vec<&str> = summary.iter().map(|s| s.protocol.as_str()).collect();
    protocols.dedup();
    for protocol in protocols {
        let mine: Vec<&SummaryRow> = summary.iter().filter(|s| s.protocol == protocol).collect();
        let svg = if protocol == "rank" {
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for s in &mine {
                if let (Some(f), Some(rho)) = (s.length_fraction, s.spearman) {
                    series.entry(format!("{}/{}", s.dataset, s.policy)).or_default().push((f, rho));
                }
            }
            let series: Vec<_> = series.into_iter().collect();
            line_chart("Rank correlation vs. observed curve", "observed fraction of curve", "mean Spearman", &series)
        } else {
            let bars: Vec<(String, f64)> = mine
                .iter()
                .map(|s| (format!("{}/{}", s.dataset, s.policy), s.epochs.unwrap_or(0.0)))
                .collect();
            let regrets: Vec<String> = mine
                .iter()
                .map(|s| format!("{} {:.4}", s.policy, s.regret.unwrap_or(f64::NAN)))
                .collect();
            bar_chart(
                &format!("{protocol}: epochs per policy (regret {})", regrets.join(", ")),
                "mean epochs",
                &bars,
            )
        };
        write_text(&a.out_dir.join(format!("{protocol}.svg")), &svg)?;
    }
    println!("summarized {} rows into {}", rows.len(), a.out_dir.display());
    Ok(())
}
