use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::value::RawValue;
use serde_json::Value;

use super::{Corpus, CorpusError, Orientation, Result, RunRecord};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Line<'a> {
    schema_version: u32,
    dataset_id: &'a str,
    run_id: &'a str,
    arch_tokens: &'a [String],
    hparams: &'a BTreeMap<String, f64>,
    curve: Vec<Box<RawValue>>,
    metric_orientation: Orientation,
}

/// 17 significant digits, which round-trips every finite `f64`.
fn exact_number(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.16e}")).expect("formatted float is valid JSON")
}

pub fn write_jsonl<W: Write>(corpus: &Corpus, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for r in corpus.records() {
        let line = Line {
            schema_version: corpus.schema_version(),
            dataset_id: &r.dataset_id,
            run_id: &r.run_id,
            arch_tokens: &r.arch_tokens,
            hparams: &r.hparams,
            curve: r.curve.iter().copied().map(exact_number).collect(),
            metric_orientation: r.metric_orientation,
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read>(reader: R) -> Result<Corpus> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed { line: lineno, message };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed("missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(CorpusError::UnknownSchemaVersion { line: lineno, version });
        }
        let record: RunRecord = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        records.push(record);
    }
    Corpus::new(records)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    read_jsonl(File::open(path)?)
}

pub fn save_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(corpus, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::record;
    use super::*;

    fn load_str(s: &str) -> Result<Corpus> {
        read_jsonl(s.as_bytes())
    }

    #[test]
    fn empty_input_is_an_empty_corpus_error() {
        assert!(matches!(load_str(""), Err(CorpusError::Empty)));
        assert_eq!(load_str("\n").unwrap_err().to_string(), "empty corpus");
    }

    #[test]
    fn two_valid_lines() {
        let text = concat!(
            r#"{"schema_version":1,"dataset_id":"a","run_id":"1","arch_tokens":["x"],"hparams":{},"curve":[0.1,0.2],"metric_orientation":"higher_better"}"#,
            "\n",
            r#"{"schema_version":1,"dataset_id":"b","run_id":"2","arch_tokens":["y"],"hparams":{},"curve":[0.3],"metric_orientation":"lower_better"}"#,
            "\n"
        );
        let c = load_str(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.dataset_ids(), &["a", "b"]);
    }

    #[test]
    fn line_errors_carry_line_numbers() {
        let good = r#"{"schema_version":1,"dataset_id":"a","run_id":"1","arch_tokens":["x"],"hparams":{},"curve":[0.1],"metric_orientation":"higher_better"}"#;
        let err = load_str(&format!("{good}\n{{not json\n")).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");

        let v2 = good.replace("\"schema_version\":1", "\"schema_version\":2");
        let err = load_str(&v2).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownSchemaVersion { line: 1, version: 2 }));

        let dup = format!("{good}\n{good}\n");
        assert!(matches!(load_str(&dup), Err(CorpusError::DuplicateRunId(_))));

        let empty_curve = good.replace("[0.1]", "[]");
        let err = load_str(&empty_curve).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidRecord { ref run_id, .. } if run_id == "1"));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tricky = [0.1 + 0.2, 1.0 / 3.0, 5e-324, 0.9999999999999999, 123456.78901234567];
        let c = Corpus::new(vec![
            record("zeta", "r1", &["a", "b"], &tricky),
            record("alpha", "r2", &["b"], &[0.5]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_jsonl(&c, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dataset_ids(), &["zeta", "alpha"]);
        for (a, b) in back.records()[0].curve.iter().zip(tricky) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let c = Corpus::new(vec![record("d", "r", &["a"], &[0.5])]).unwrap();
        let err = save_jsonl(&c, "/nonexistent-dir/x/corpus.jsonl").unwrap_err();
        assert!(matches!(err, CorpusError::Io(_)));
    }
}
