use std::ffi::{CStr, CString};
use std::ptr;

use lcrank::corpus::{save_jsonl, synth_generate, SyntheticSpec};
use lcrank::ranker::{FeatureSpace, ModelBank, ModelConfig, TrainingConfig};
use lcrank_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lcr_last_error()).to_str().unwrap().to_string() }
}

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        n_datasets: 2,
        runs_per_dataset: 12,
        epochs: 9,
        seed: 4,
        ..SyntheticSpec::default()
    }
}

#[test]
fn pair_probability_and_spearman() {
    assert_eq!(lcr_pair_probability(1.5, 1.5), 0.5);
    assert!((lcr_pair_probability(2.0, -1.0) + lcr_pair_probability(-1.0, 2.0) - 1.0).abs() < 1e-15);
    let (a, b) = ([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 4.0, 3.0]);
    let mut rho = 0.0;
    assert_eq!(unsafe { lcr_spearman(a.as_ptr(), b.as_ptr(), 4, &mut rho) }, LcrStatus::Ok);
    assert!((rho - 0.8).abs() < 1e-15);
    assert_eq!(unsafe { lcr_spearman(a.as_ptr(), ptr::null(), 4, &mut rho) }, LcrStatus::NullPointer);
    assert_eq!(last_error(), "b is null");
    let flat = [1.0; 4];
    assert_eq!(unsafe { lcr_spearman(flat.as_ptr(), b.as_ptr(), 4, &mut rho) }, LcrStatus::Numeric);
}

#[test]
fn predict_final_is_bounded() {
    let finals = [0.4, 0.9];
    let mut y = 0.0;
    assert_eq!(unsafe { lcr_predict_final(5.0, 0.5, finals.as_ptr(), 2, &mut y) }, LcrStatus::Ok);
    assert_eq!(y, 0.65);
    assert_eq!(unsafe { lcr_predict_final(0.1, 0.5, finals.as_ptr(), 2, &mut y) }, LcrStatus::Ok);
    assert_eq!(y, 0.5);
    assert_eq!(unsafe { lcr_predict_final(0.1, 0.7, finals.as_ptr(), 2, &mut y) }, LcrStatus::Ok);
    assert_eq!(y, 0.7);
}

#[test]
fn corpus_handles() {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { lcr_corpus_generate(2, 5, 4, 0.0, 1, &mut c) }, LcrStatus::Ok);
    assert_eq!(unsafe { lcr_corpus_len(c) }, 10);
    unsafe { lcr_corpus_free(c) };
    assert_eq!(unsafe { lcr_corpus_generate(0, 5, 4, 0.0, 1, &mut c) }, LcrStatus::InvalidArgument);
    let missing = CString::new("/nonexistent/x.jsonl").unwrap();
    assert_eq!(unsafe { lcr_corpus_load(missing.as_ptr(), &mut c) }, LcrStatus::Io);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { lcr_corpus_len(ptr::null()) }, 0);
    unsafe { lcr_corpus_free(ptr::null_mut()) };
}

#[test]
fn bank_scoring_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_generate(&spec()).unwrap();
    let path = dir.path().join("c.jsonl");
    save_jsonl(&corpus, &path).unwrap();
    let (meta, _) = corpus.lodo_split("synth-1").unwrap();
    let cfg = ModelConfig {
        training: TrainingConfig {
            steps: 10,
            pairs_per_step: 4,
            reconstruction_batch: 2,
            ..TrainingConfig::default()
        },
        ..ModelConfig::default()
    };
    let features = FeatureSpace::fit(&meta, &cfg.log_hparams).unwrap();
    let (bank, _) = ModelBank::train(&meta, &[3, 6], &cfg, &features).unwrap();
    let bank_dir = dir.path().join("bank");
    bank.save_dir(&bank_dir).unwrap();

    let (cpath, bpath) = (
        CString::new(path.to_str().unwrap()).unwrap(),
        CString::new(bank_dir.to_str().unwrap()).unwrap(),
    );
    let (mut c, mut b) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(lcr_corpus_load(cpath.as_ptr(), &mut c), LcrStatus::Ok);
        assert_eq!(lcr_bank_load(bpath.as_ptr(), &mut b), LcrStatus::Ok);
        let run = CString::new(corpus.dataset_records("synth-1")[0].run_id.as_str()).unwrap();
        let mut score = f64::NAN;
        assert_eq!(lcr_bank_score(b, c, run.as_ptr(), 3, &mut score), LcrStatus::Ok);
        assert!(score.is_finite());
        assert_eq!(lcr_bank_score(b, c, run.as_ptr(), 4, &mut score), LcrStatus::NotFound);
        assert!(last_error().contains("length 4"));
        let nobody = CString::new("nobody").unwrap();
        assert_eq!(lcr_bank_score(b, c, nobody.as_ptr(), 3, &mut score), LcrStatus::NotFound);

        let holdout = CString::new("synth-1").unwrap();
        let (mut regret, mut epochs) = (f64::NAN, 0usize);
        for (policy, status) in [("none", LcrStatus::Ok), ("lcranknet", LcrStatus::Ok), ("sh", LcrStatus::Ok)] {
            let p = CString::new(policy).unwrap();
            let got = lcr_replay(c, holdout.as_ptr(), p.as_ptr(), b, 0.45, 3, 0, &mut regret, &mut epochs);
            assert_eq!(got, status, "{policy}: {}", last_error());
            assert!(regret >= 0.0);
            if policy == "none" {
                assert_eq!((regret, epochs), (0.0, 12 * 9));
            } else {
                assert!(epochs <= 12 * 9);
            }
        }
        let p = CString::new("lcranknet").unwrap();
        let got = lcr_replay(c, holdout.as_ptr(), p.as_ptr(), ptr::null(), 0.45, 3, 0, &mut regret, &mut epochs);
        assert_eq!(got, LcrStatus::NullPointer);
        let p = CString::new("bogus").unwrap();
        let got = lcr_replay(c, holdout.as_ptr(), p.as_ptr(), b, 0.45, 3, 0, &mut regret, &mut epochs);
        assert_eq!(got, LcrStatus::InvalidArgument);
        lcr_bank_free(b);
        lcr_corpus_free(c);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lcrank.h")).unwrap();
    for name in [
        "lcr_last_error",
        "lcr_pair_probability",
        "lcr_predict_final",
        "lcr_spearman",
        "lcr_corpus_load",
        "lcr_corpus_generate",
        "lcr_corpus_free",
        "lcr_bank_load",
        "lcr_bank_score",
        "lcr_bank_free",
        "lcr_replay",
        "LCR_STATUS_NOT_FOUND = 5",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
