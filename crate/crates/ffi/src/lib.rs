//! C ABI over `prlm-core`.
//!
//! Every fallible function returns a [`PrlmStatus`] and writes its result
//! through an out-pointer. On failure, [`prlm_last_error`] describes the
//! most recent error on the calling thread. Handles are opaque and must be
//! released with their matching `_free` function; strings returned by the
//! library are released with [`prlm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prlm_core::corpus::ProfileItem;
use prlm_core::metrics;
use prlm_core::policy::DeskPolicy;
use prlm_core::prm::{PersonalScorer, ScorerParams};
use prlm_core::retrieval::{retrieve_bm25, Bm25Index};
use prlm_core::reward::{composite_reward, correctness_reward, PersonalTarget, RewardWeights};
use prlm_core::textproc::parse_think;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrlmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Internal = 5,
}

/// Precision, recall and F1 of one ROUGE comparison.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrlmPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Parsed `<think>` output. `reasoning` is null when the text is not well
/// formed. Release the strings with [`prlm_think_clear`].
#[repr(C)]
#[derive(Debug)]
pub struct PrlmThink {
    pub well_formed: bool,
    pub reasoning: *mut c_char,
    pub answer: *mut c_char,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrlmReward {
    pub r_correct: f64,
    pub r_think: f64,
    pub r_personal: f64,
    pub total: f64,
}

/// Trained personalization scorer.
pub struct PrlmScorer(PersonalScorer);

/// Desk policy checkpoint.
pub struct PrlmPolicy(DeskPolicy);

/// BM25 index over a list of documents, addressed by position.
pub struct PrlmBm25(Bm25Index);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(PrlmStatus, String);

impl Failure {
    fn arg(msg: impl Into<String>) -> Self {
        Failure(PrlmStatus::InvalidArgument, msg.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrlmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PrlmStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PrlmStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PrlmStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(PrlmStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(PrlmStatus::NullPointer, "handle is null".into()))
}

fn owned(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prlm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn prlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prlm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// ROUGE-N for `n` in {1, 2}.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn prlm_rouge_n(
    candidate: *const c_char,
    reference: *const c_char,
    n: usize,
    out_prf: *mut PrlmPrf,
) -> PrlmStatus {
    guard(|| {
        let (c, r) = (text(candidate, "candidate")?, text(reference, "reference")?);
        let o = out(out_prf, "out_prf")?;
        let p = metrics::rouge_n(c, r, n).map_err(|e| Failure::arg(e.to_string()))?;
        *o = PrlmPrf { precision: p.precision, recall: p.recall, f1: p.f1 };
        Ok(())
    })
}

/// # Safety
/// See [`prlm_rouge_n`].
#[no_mangle]
pub unsafe extern "C" fn prlm_rouge_l(
    candidate: *const c_char,
    reference: *const c_char,
    out_prf: *mut PrlmPrf,
) -> PrlmStatus {
    guard(|| {
        let (c, r) = (text(candidate, "candidate")?, text(reference, "reference")?);
        let o = out(out_prf, "out_prf")?;
        let p = metrics::rouge_l(c, r);
        *o = PrlmPrf { precision: p.precision, recall: p.recall, f1: p.f1 };
        Ok(())
    })
}

/// Sentence BLEU in [0, 100].
///
/// # Safety
/// See [`prlm_rouge_n`].
#[no_mangle]
pub unsafe extern "C" fn prlm_bleu(candidate: *const c_char, reference: *const c_char, out_value: *mut f64) -> PrlmStatus {
    guard(|| {
        let (c, r) = (text(candidate, "candidate")?, text(reference, "reference")?);
        *out(out_value, "out_value")? = metrics::bleu(c, r).value;
        Ok(())
    })
}

/// Sum of ROUGE-1, ROUGE-2 and ROUGE-L F1.
///
/// # Safety
/// See [`prlm_rouge_n`].
#[no_mangle]
pub unsafe extern "C" fn prlm_correctness_reward(
    answer: *const c_char,
    reference: *const c_char,
    out_value: *mut f64,
) -> PrlmStatus {
    guard(|| {
        let (a, r) = (text(answer, "answer")?, text(reference, "reference")?);
        let o = out(out_value, "out_value")?;
        *o = correctness_reward(a, r).map_err(|e| Failure::arg(e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `raw` must be NUL-terminated; `out_think` must be valid. Any strings
/// already held by `out_think` are overwritten without being freed.
#[no_mangle]
pub unsafe extern "C" fn prlm_parse_think(raw: *const c_char, out_think: *mut PrlmThink) -> PrlmStatus {
    guard(|| {
        let raw = text(raw, "raw")?;
        let o = out(out_think, "out_think")?;
        let parsed = parse_think(raw);
        *o = PrlmThink {
            well_formed: parsed.well_formed,
            reasoning: parsed.reasoning.as_deref().map_or(ptr::null_mut(), owned),
            answer: owned(&parsed.answer),
        };
        Ok(())
    })
}

/// Frees the strings of a [`PrlmThink`] and nulls them.
///
/// # Safety
/// `think` must be null or filled by [`prlm_parse_think`].
#[no_mangle]
pub unsafe extern "C" fn prlm_think_clear(think: *mut PrlmThink) {
    if let Some(t) = think.as_mut() {
        prlm_string_free(t.reasoning);
        prlm_string_free(t.answer);
        t.reasoning = ptr::null_mut();
        t.answer = ptr::null_mut();
    }
}

/// Loads a scorer saved by `train-prm`.
///
/// # Safety
/// `path` must be NUL-terminated; `out_scorer` must be valid.
#[no_mangle]
pub unsafe extern "C" fn prlm_scorer_load(path: *const c_char, out_scorer: *mut *mut PrlmScorer) -> PrlmStatus {
    guard(|| {
        let path = text(path, "path")?;
        let o = out(out_scorer, "out_scorer")?;
        let params = ScorerParams::load(Path::new(path)).map_err(|e| Failure(PrlmStatus::Io, e.to_string()))?;
        *o = Box::into_raw(Box::new(PrlmScorer(PersonalScorer::Model(params))));
        Ok(())
    })
}

/// Raw score and its sigmoid for a query and response.
///
/// # Safety
/// `scorer` must come from [`prlm_scorer_load`]; other pointers as usual.
/// `out_reward` may be null.
#[no_mangle]
pub unsafe extern "C" fn prlm_scorer_score(
    scorer: *const PrlmScorer,
    query: *const c_char,
    response: *const c_char,
    out_score: *mut f64,
    out_reward: *mut f64,
) -> PrlmStatus {
    guard(|| {
        let s = handle(scorer)?;
        let (x, y) = (text(query, "query")?, text(response, "response")?);
        let o = out(out_score, "out_score")?;
        *o = s.0.raw_score(x, y).map_err(|e| Failure::arg(e.to_string()))?;
        if let Some(r) = out_reward.as_mut() {
            *r = s.0.reward(x, y).map_err(|e| Failure::arg(e.to_string()))?;
        }
        Ok(())
    })
}

/// # Safety
/// `scorer` must be null or come from [`prlm_scorer_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prlm_scorer_free(scorer: *mut PrlmScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Composite reward of a raw completion. `scorer` may be null, which
/// disables the personalization term.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_reward` must be valid.
#[no_mangle]
pub unsafe extern "C" fn prlm_composite_reward(
    raw_output: *const c_char,
    reference: *const c_char,
    query: *const c_char,
    scorer: *const PrlmScorer,
    alpha: f64,
    beta: f64,
    out_reward: *mut PrlmReward,
) -> PrlmStatus {
    guard(|| {
        let raw = text(raw_output, "raw_output")?;
        let (r, q) = (text(reference, "reference")?, text(query, "query")?);
        let o = out(out_reward, "out_reward")?;
        let w = RewardWeights::new(alpha, beta).map_err(|e| Failure::arg(e.to_string()))?;
        let s = scorer.as_ref().map(|s| &s.0);
        let b = composite_reward(&parse_think(raw), r, q, s, PersonalTarget::Answer, &w)
            .map_err(|e| Failure::arg(e.to_string()))?;
        *o = PrlmReward {
            r_correct: b.r_correct,
            r_think: b.r_think as f64,
            r_personal: b.r_personal,
            total: b.total,
        };
        Ok(())
    })
}

/// Loads a desk policy checkpoint written by `train-policy`.
///
/// # Safety
/// `path` must be NUL-terminated; `out_policy` must be valid.
#[no_mangle]
pub unsafe extern "C" fn prlm_policy_load(path: *const c_char, out_policy: *mut *mut PrlmPolicy) -> PrlmStatus {
    guard(|| {
        let path = text(path, "path")?;
        let o = out(out_policy, "out_policy")?;
        let p = DeskPolicy::load(Path::new(path)).map_err(|e| Failure(PrlmStatus::Io, e.to_string()))?;
        *o = Box::into_raw(Box::new(PrlmPolicy(p)));
        Ok(())
    })
}

/// Greedy completion of `prompt`. Free the result with [`prlm_string_free`].
///
/// # Safety
/// `policy` must come from [`prlm_policy_load`]; other pointers as usual.
#[no_mangle]
pub unsafe extern "C" fn prlm_policy_greedy(
    policy: *const PrlmPolicy,
    prompt: *const c_char,
    max_tokens: usize,
    out_text: *mut *mut c_char,
) -> PrlmStatus {
    guard(|| {
        let p = handle(policy)?;
        let prompt = text(prompt, "prompt")?;
        let o = out(out_text, "out_text")?;
        let c = p.0.greedy(prompt, max_tokens).map_err(|e| Failure::arg(e.to_string()))?;
        *o = owned(&c.text);
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or come from [`prlm_policy_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prlm_policy_free(policy: *mut PrlmPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Builds a BM25 index over `n_docs` documents.
///
/// # Safety
/// `docs` must point to `n_docs` NUL-terminated strings; `out_index` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn prlm_bm25_new(
    docs: *const *const c_char,
    n_docs: usize,
    k1: f64,
    b: f64,
    out_index: *mut *mut PrlmBm25,
) -> PrlmStatus {
    guard(|| {
        if docs.is_null() {
            return Err(Failure(PrlmStatus::NullPointer, "docs is null".into()));
        }
        let o = out(out_index, "out_index")?;
        if !(k1.is_finite() && k1 >= 0.0 && (0.0..=1.0).contains(&b)) {
            return Err(Failure::arg("k1 must be finite and >= 0, b must lie in [0, 1]"));
        }
        let profile = (0..n_docs)
            .map(|i| {
                Ok(ProfileItem {
                    id: format!("{i:020}"),
                    text: text(*docs.add(i), "document")?.to_string(),
                    timestamp: i as i64,
                    meta: Default::default(),
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let index = Bm25Index::build(&profile, k1, b).map_err(|e| Failure::arg(e.to_string()))?;
        *o = Box::into_raw(Box::new(PrlmBm25(index)));
        Ok(())
    })
}

/// Top `k` documents for `query`, best first, ties by position. Writes up
/// to `k` positions and scores and the number written to `out_len`.
///
/// # Safety
/// `index` must come from [`prlm_bm25_new`]; `out_docs` and `out_scores`
/// must hold at least `k` elements.
#[no_mangle]
pub unsafe extern "C" fn prlm_bm25_top_k(
    index: *const PrlmBm25,
    query: *const c_char,
    k: usize,
    out_docs: *mut usize,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> PrlmStatus {
    guard(|| {
        let idx = handle(index)?;
        let q = text(query, "query")?;
        if out_docs.is_null() || out_scores.is_null() {
            return Err(Failure(PrlmStatus::NullPointer, "output arrays are null".into()));
        }
        let len = out(out_len, "out_len")?;
        let ctx = retrieve_bm25(&idx.0, q, k).map_err(|e| Failure::arg(e.to_string()))?;
        for (i, s) in ctx.items.iter().enumerate() {
            *out_docs.add(i) = s.item.id.parse().expect("ids are positions");
            *out_scores.add(i) = s.score;
        }
        *len = ctx.items.len();
        Ok(())
    })
}

/// # Safety
/// `index` must be null or come from [`prlm_bm25_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prlm_bm25_free(index: *mut PrlmBm25) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}
