//! C ABI over `lcrank`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Fallible calls return an [`LcrStatus`]
//! and write results through out-pointers; on failure
//! [`lcr_last_error`] describes the error on the calling thread.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lcrank::corpus::{load_jsonl, synth_generate, Corpus, CorpusError, SyntheticSpec};
use lcrank::ranker::{pair_probability, predict_final, ModelBank, RankerError};
use lcrank::search::{default_hyperband, default_successive_halving, random_search_replay, spearman, SearchError};
use lcrank::termination::{LcRankNetPolicy, TerminationError, TerminationPolicy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    NotFound = 5,
    Panic = 6,
}

/// Loaded or generated run corpus.
pub struct LcrCorpus(Corpus);

/// Bank of rankers, one per curve length.
pub struct LcrBank(ModelBank);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LcrStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(LcrStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(LcrStatus::InvalidArgument, msg.into())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let status = match e {
            CorpusError::Io(_) => LcrStatus::Io,
            CorpusError::UnknownDataset(_) => LcrStatus::NotFound,
            _ => LcrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<RankerError> for Failure {
    fn from(e: RankerError) -> Self {
        let status = match e {
            RankerError::Io(_) | RankerError::Checkpoint(_) => LcrStatus::Io,
            RankerError::Diverged { .. } | RankerError::Tensor(_) => LcrStatus::Numeric,
            RankerError::MissingLength(_) => LcrStatus::NotFound,
            RankerError::Corpus(c) => return c.into(),
            _ => LcrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<TerminationError> for Failure {
    fn from(e: TerminationError) -> Self {
        match e {
            TerminationError::Ranker(r) => r.into(),
            TerminationError::Corpus(c) => c.into(),
            TerminationError::Io(_) | TerminationError::Csv(_) => Failure(LcrStatus::Io, e.to_string()),
            TerminationError::InvalidPolicy(_) => Failure::invalid(e.to_string()),
        }
    }
}

impl From<SearchError> for Failure {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Termination(t) => t.into(),
            SearchError::Ranker(r) => r.into(),
            SearchError::Corpus(c) => c.into(),
            SearchError::UndefinedCorrelation => Failure(LcrStatus::Numeric, e.to_string()),
            SearchError::Io(_) | SearchError::Csv(_) => Failure(LcrStatus::Io, e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LcrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside lcrank".into());
            LcrStatus::Panic
        }
    }
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not UTF-8")))
}

unsafe fn as_slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn write<T>(out: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(what));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lcr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Probability that a run scored `f_i` outranks one scored `f_j`.
#[no_mangle]
pub extern "C" fn lcr_pair_probability(f_i: f64, f_j: f64) -> f64 {
    pair_probability(f_i, f_j)
}

/// Final-value estimate of a stopped run bounded by its best observed value
/// and the completed finals.
#[no_mangle]
pub unsafe extern "C" fn lcr_predict_final(
    raw: f64,
    best_observed: f64,
    finals: *const f64,
    n_finals: usize,
    out: *mut f64,
) -> LcrStatus {
    guard(|| {
        let finals = as_slice(finals, n_finals, "finals")?;
        write(out, predict_final(raw, best_observed, finals), "out")
    })
}

/// Spearman rank correlation of two arrays of length `n`.
#[no_mangle]
pub unsafe extern "C" fn lcr_spearman(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> LcrStatus {
    guard(|| {
        let a = as_slice(a, n, "a")?;
        let b = as_slice(b, n, "b")?;
        write(out, spearman(a, b)?, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn lcr_corpus_load(path: *const c_char, out: *mut *mut LcrCorpus) -> LcrStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        let corpus = load_jsonl(path)?;
        write(out, Box::into_raw(Box::new(LcrCorpus(corpus))), "out")
    })
}

/// Synthetic corpus of `datasets` × `runs` curves of `epochs` values.
#[no_mangle]
pub unsafe extern "C" fn lcr_corpus_generate(
    datasets: usize,
    runs: usize,
    epochs: usize,
    noise_sd: f64,
    seed: u64,
    out: *mut *mut LcrCorpus,
) -> LcrStatus {
    guard(|| {
        let spec = SyntheticSpec {
            n_datasets: datasets,
            runs_per_dataset: runs,
            epochs,
            noise_sd,
            seed,
            ..SyntheticSpec::default()
        };
        let corpus = synth_generate(&spec)?;
        write(out, Box::into_raw(Box::new(LcrCorpus(corpus))), "out")
    })
}

/// Number of runs, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn lcr_corpus_len(corpus: *const LcrCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn lcr_corpus_free(corpus: *mut LcrCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads a checkpoint directory written by `lcrank train`.
#[no_mangle]
pub unsafe extern "C" fn lcr_bank_load(dir: *const c_char, out: *mut *mut LcrBank) -> LcrStatus {
    guard(|| {
        let dir = as_str(dir, "dir")?;
        let bank = ModelBank::load_dir(dir)?;
        write(out, Box::into_raw(Box::new(LcrBank(bank))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn lcr_bank_free(bank: *mut LcrBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Score of run `run_id` observed for `length` epochs, from the bank's model
/// of that length. Higher scores rank higher.
#[no_mangle]
pub unsafe extern "C" fn lcr_bank_score(
    bank: *mut LcrBank,
    corpus: *const LcrCorpus,
    run_id: *const c_char,
    length: usize,
    out: *mut f64,
) -> LcrStatus {
    guard(|| {
        let bank = bank.as_mut().ok_or_else(|| Failure::null("bank"))?;
        let corpus = as_ref(corpus, "corpus")?;
        let run_id = as_str(run_id, "run_id")?;
        let record = corpus
            .0
            .find_run(run_id)
            .ok_or_else(|| Failure(LcrStatus::NotFound, format!("unknown run {run_id:?}")))?;
        bank.0.ensure_dataset(&record.dataset_id)?;
        let ranker = bank.0.get(length)?;
        let input = ranker.features.encode(record, length)?;
        write(out, ranker.score(&input)?, "out")
    })
}

/// Replays random search over the runs of `holdout` in the order given by
/// `order_seed`. `policy` is one of `none`, `lcranknet`, `last-value`, `sh`,
/// `hyperband`; `bank` may be null except for `lcranknet`, which uses
/// `delta` and `cadence`.
#[no_mangle]
pub unsafe extern "C" fn lcr_replay(
    corpus: *const LcrCorpus,
    holdout: *const c_char,
    policy: *const c_char,
    bank: *const LcrBank,
    delta: f64,
    cadence: usize,
    order_seed: u64,
    out_regret: *mut f64,
    out_epochs: *mut usize,
) -> LcrStatus {
    guard(|| {
        let corpus = &as_ref(corpus, "corpus")?.0;
        let holdout = as_str(holdout, "holdout")?;
        let records = corpus.dataset_records(holdout);
        if records.is_empty() {
            return Err(Failure(LcrStatus::NotFound, format!("unknown dataset {holdout:?}")));
        }
        let max_len = records.iter().map(|r| r.len()).max().unwrap_or(0);
        let policy = match as_str(policy, "policy")? {
            "none" => TerminationPolicy::None,
            "last-value" => TerminationPolicy::LastValue { cadence, margin: 0.0 },
            "sh" => default_successive_halving(records.len(), max_len),
            "hyperband" => default_hyperband(max_len),
            "lcranknet" => {
                let bank = as_ref(bank, "bank")?;
                TerminationPolicy::LcRankNet(LcRankNetPolicy {
                    delta,
                    cadence,
                    ..LcRankNetPolicy::new(bank.0.clone())
                })
            }
            other => return Err(Failure::invalid(format!("unknown policy {other:?}"))),
        };
        let r = random_search_replay(corpus, holdout, &policy, order_seed)?;
        write(out_regret, r.regret, "out_regret")?;
        write(out_epochs, r.epochs_consumed, "out_epochs")
    })
}
