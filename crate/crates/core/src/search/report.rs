use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{RankingEvalResult, ReplayResult, Result, SearchError};

/// Aggregate of replays over seeds for one (dataset, policy) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub policy: String,
    pub seeds: usize,
    pub regret: f64,
    pub epochs: f64,
    /// Mean epochs of the `none` policy on the same dataset over mean epochs
    /// of this policy; absent without a `none` result.
    pub speedup: Option<f64>,
}

pub fn aggregate_report(results: &[ReplayResult]) -> Result<Vec<ReportRow>> {
    if results.is_empty() {
        return Err(SearchError::Config("no results to aggregate".into()));
    }
    let mut cells: BTreeMap<(&str, &str), Vec<&ReplayResult>> = BTreeMap::new();
    for r in results {
        cells.entry((r.dataset.as_str(), r.policy.as_str())).or_default().push(r);
    }
    let mean = |v: &[&ReplayResult], f: &dyn Fn(&ReplayResult) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64;
    let epochs = |v: &[&ReplayResult]| mean(v, &|r| r.epochs_consumed as f64);
    Ok(cells
        .iter()
        .map(|(&(dataset, policy), v)| {
            let e = epochs(v);
            ReportRow {
                dataset: dataset.to_string(),
                policy: policy.to_string(),
                seeds: v.len(),
                regret: mean(v, &|r| r.regret),
                epochs: e,
                speedup: cells.get(&(dataset, "none")).map(|n| epochs(n) / e),
            }
        })
        .collect())
}

/// One line of a results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: String,
    pub dataset: String,
    pub policy: String,
    pub seed: u64,
    pub length_fraction: Option<f64>,
    pub spearman: Option<f64>,
    pub regret: Option<f64>,
    pub epochs: Option<usize>,
}

impl ResultRow {
    /// One row per length and repetition.
    pub fn from_ranking(result: &RankingEvalResult) -> Vec<ResultRow> {
        result
            .points
            .iter()
            .flat_map(|p| {
                p.spearman.iter().zip(&result.seeds).map(move |(&rho, &seed)| ResultRow {
                    protocol: "rank".into(),
                    dataset: result.dataset.clone(),
                    policy: result.scorer.name().into(),
                    seed,
                    length_fraction: Some(p.fraction),
                    spearman: rho,
                    regret: None,
                    epochs: None,
                })
            })
            .collect()
    }

    pub fn from_replay(result: &ReplayResult) -> ResultRow {
        ResultRow {
            protocol: "simulate".into(),
            dataset: result.dataset.clone(),
            policy: result.policy.clone(),
            seed: result.seed,
            length_fraction: None,
            spearman: None,
            regret: Some(result.regret),
            epochs: Some(result.epochs_consumed),
        }
    }
}

/// Writes `comments` as leading `# ` lines, then the rows with a header.
pub fn write_results_csv<W: Write>(mut writer: W, comments: &[String], rows: &[ResultRow]) -> Result<()> {
    for c in comments {
        writeln!(writer, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "protocol",
            "dataset",
            "policy",
            "seed",
            "length_fraction",
            "spearman",
            "regret",
            "epochs",
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_results_csv`], skipping comment lines.
pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(dataset: &str, policy: &str, seed: u64, epochs: usize, regret: f64) -> ReplayResult {
        ReplayResult {
            dataset: dataset.into(),
            policy: policy.into(),
            seed,
            chosen_run_id: "r".into(),
            regret,
            epochs_consumed: epochs,
            decisions: Vec::new(),
        }
    }

    #[test]
    fn speedups_and_ordering() {
        let rows = aggregate_report(&[
            result("b", "none", 0, 100, 0.0),
            result("b", "lcranknet", 0, 50, 0.02),
            result("b", "lcranknet", 1, 50, 0.0),
            result("a", "sh", 0, 30, 0.1),
        ])
        .unwrap();
        let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r.dataset.as_str(), r.policy.as_str())).collect();
        assert_eq!(keys, vec![("a", "sh"), ("b", "lcranknet"), ("b", "none")]);
        assert_eq!(rows[0].speedup, None);
        assert_eq!(rows[1].speedup, Some(2.0));
        assert_eq!(rows[1].regret, 0.01);
        assert_eq!(rows[1].seeds, 2);
        assert_eq!(rows[2].speedup, Some(1.0));
        assert!(aggregate_report(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_with_empty_cells() {
        let rows = vec![
            ResultRow::from_replay(&result("d", "none", 3, 10, 0.0)),
            ResultRow {
                protocol: "rank".into(),
                dataset: "d".into(),
                policy: "oracle".into(),
                seed: 1,
                length_fraction: Some(0.03),
                spearman: None,
                regret: None,
                epochs: None,
            },
        ];
        let mut out = Vec::new();
        write_results_csv(&mut out, &["seed = 3".into()], &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "# seed = 3\nprotocol,dataset,policy,seed,length_fraction,spearman,regret,epochs\n\
             simulate,d,none,3,,,0.0,10\nrank,d,oracle,1,0.03,,,\n"
        );
        assert_eq!(read_results_csv(text.as_bytes()).unwrap(), rows);
    }
}
