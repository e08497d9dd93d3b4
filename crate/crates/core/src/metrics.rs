//! ROUGE-1/2/L and BLEU over the project tokenizer.
//!
//! ROUGE is reported as F1. Sentence BLEU (used for per-sample scores) uses
//! add-one smoothing on orders with zero matches; the corpus report pools
//! counts across pairs before computing precisions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textproc::{ngram_total, ngrams, tokenize, TextError};

pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("ROUGE-N order must be 1 or 2, got {0}")]
    InvalidN(usize),
    #[error("corpus report needs at least one pair")]
    EmptyInput,
}

impl From<TextError> for MetricError {
    fn from(e: TextError) -> Self {
        match e {
            TextError::InvalidN(n) => MetricError::InvalidN(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, cand_total: usize, ref_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(overlap, cand_total);
        let recall = ratio(overlap, ref_total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub value: f64,
    /// Per-order precisions after smoothing, orders 1..=4.
    pub precisions: [f64; BLEU_MAX_ORDER],
    pub brevity_penalty: f64,
}

/// Size of the multiset intersection of the candidate and reference n-grams.
fn clipped_overlap(cand: &[String], reference: &[String], n: usize) -> usize {
    let c = ngrams(cand, n).expect("n >= 1");
    let r = ngrams(reference, n).expect("n >= 1");
    c.iter()
        .map(|(gram, &count)| count.min(r.get(gram).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<Prf, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::InvalidN(n));
    }
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    Ok(rouge_n_tokens(cand.as_slice(), refr.as_slice(), n))
}

pub(crate) fn rouge_n_tokens(cand: &[String], reference: &[String], n: usize) -> Prf {
    let overlap = clipped_overlap(cand, reference, n);
    Prf::from_counts(overlap, ngram_total(cand.len(), n), ngram_total(reference.len(), n))
}

/// Longest common subsequence length, O(|a|·|b|) time, O(|b|) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    rouge_l_tokens(cand.as_slice(), refr.as_slice())
}

pub(crate) fn rouge_l_tokens(cand: &[String], reference: &[String]) -> Prf {
    let lcs = lcs_len(cand, reference);
    Prf::from_counts(lcs, cand.len(), reference.len())
}

/// Matched/total n-gram counts per order plus lengths; sums across pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct BleuStats {
    matches: [usize; BLEU_MAX_ORDER],
    totals: [usize; BLEU_MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of(cand: &[String], reference: &[String]) -> Self {
        let mut stats = BleuStats {
            cand_len: cand.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            stats.matches[n - 1] = clipped_overlap(cand, reference, n);
            stats.totals[n - 1] = ngram_total(cand.len(), n);
        }
        stats
    }

    fn add(&mut self, other: &BleuStats) {
        for i in 0..BLEU_MAX_ORDER {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    fn score(&self) -> BleuScore {
        let zero = BleuScore {
            value: 0.0,
            precisions: [0.0; BLEU_MAX_ORDER],
            brevity_penalty: 1.0,
        };
        if self.cand_len == 0 {
            return zero;
        }
        let brevity_penalty = if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        };
        let mut precisions = [0.0; BLEU_MAX_ORDER];
        for i in 0..BLEU_MAX_ORDER {
            let (m, t) = (self.matches[i], self.totals[i]);
            precisions[i] = if t == 0 {
                0.0
            } else if m == 0 {
                1.0 / (t as f64 + 1.0)
            } else {
                m as f64 / t as f64
            };
        }
        // an order with no candidate n-grams at all leaves the geometric mean at 0
        let value = if precisions.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            let mean_log =
                precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_ORDER as f64;
            100.0 * brevity_penalty * mean_log.exp()
        };
        BleuScore {
            value,
            precisions,
            brevity_penalty,
        }
    }
}

/// Sentence-level BLEU with add-one smoothing on zero-match orders.
pub fn bleu(candidate: &str, reference: &str) -> BleuScore {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    BleuStats::of(cand.as_slice(), refr.as_slice()).score()
}

/// Aggregate scores for one method, all on a 0..100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
}

/// Neumaier sum over values sorted by total order, so the result does not
/// depend on input order.
pub(crate) fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values.iter() {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn stable_mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    stable_sum(values) / n
}

pub fn corpus_report<C, R>(pairs: &[(C, R)]) -> Result<CorpusReport, MetricError>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut r1 = Vec::with_capacity(pairs.len());
    let mut r2 = Vec::with_capacity(pairs.len());
    let mut rl = Vec::with_capacity(pairs.len());
    let mut pooled = BleuStats::default();
    for (cand, refr) in pairs {
        let c = tokenize(cand.as_ref());
        let r = tokenize(refr.as_ref());
        r1.push(rouge_n_tokens(c.as_slice(), r.as_slice(), 1).f1);
        r2.push(rouge_n_tokens(c.as_slice(), r.as_slice(), 2).f1);
        rl.push(rouge_l_tokens(c.as_slice(), r.as_slice()).f1);
        pooled.add(&BleuStats::of(c.as_slice(), r.as_slice()));
    }
    Ok(CorpusReport {
        rouge1: 100.0 * stable_mean(&mut r1),
        rouge2: 100.0 * stable_mean(&mut r2),
        rouge_l: 100.0 * stable_mean(&mut rl),
        bleu: pooled.score().value,
    })
}

/// Unigram counts, handy for callers that need overlap ratios.
pub fn unigram_counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}
