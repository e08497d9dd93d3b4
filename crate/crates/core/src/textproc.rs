//! Tokenization, n-gram extraction and `<think>` block parsing.
//!
//! The tokenizer is fixed project-wide: Unicode lowercase, whitespace split,
//! leading/trailing ASCII punctuation stripped from every token. Every metric
//! and reward in the crate goes through it, so scores stay comparable between
//! runs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("n-gram order must be >= 1, got {0}")]
    InvalidN(usize),
}

/// A tokenized string.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    /// Character count of the source text.
    pub source_len: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.tokens
    }
}

pub fn tokenize(text: &str) -> TokenSeq {
    let tokens = text
        .split_whitespace()
        .map(|raw| raw.to_lowercase())
        .map(|tok| tok.trim_matches(|c: char| c.is_ascii_punctuation()).to_string())
        .filter(|tok| !tok.is_empty())
        .collect();
    TokenSeq {
        tokens,
        source_len: text.chars().count(),
    }
}

/// Multiset of contiguous n-grams.
pub type NgramCounts<'a> = HashMap<&'a [String], usize>;

pub fn ngrams(seq: &[String], n: usize) -> Result<NgramCounts<'_>, TextError> {
    if n < 1 {
        return Err(TextError::InvalidN(n));
    }
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for window in seq.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Total number of n-grams in a sequence of `len` tokens.
pub fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// A generated response split into reasoning trace and final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub raw: String,
    pub reasoning: Option<String>,
    pub answer: String,
    pub well_formed: bool,
}

impl StructuredOutput {
    /// Canonical `<think>R</think>y` form. Only meaningful when well formed.
    pub fn render(&self) -> String {
        match &self.reasoning {
            Some(r) => format!("{THINK_OPEN}{r}{THINK_CLOSE}{}", self.answer),
            None => self.answer.clone(),
        }
    }
}

/// Splits `raw` into reasoning and answer.
///
/// Well formed means: after trimming, the text starts with `<think>`, holds
/// exactly one open and one close tag in that order, and the trimmed text
/// after `</think>` is non-empty. Anything else is returned verbatim as the
/// answer with no reasoning.
pub fn parse_think(raw: &str) -> StructuredOutput {
    let malformed = || StructuredOutput {
        raw: raw.to_string(),
        reasoning: None,
        answer: raw.to_string(),
        well_formed: false,
    };

    let trimmed = raw.trim();
    let Some(rest) = trimmed.strip_prefix(THINK_OPEN) else {
        return malformed();
    };
    if trimmed.matches(THINK_OPEN).count() != 1 || trimmed.matches(THINK_CLOSE).count() != 1 {
        return malformed();
    }
    // the only open tag is the prefix, so the close tag necessarily follows it
    let Some((reasoning, answer)) = rest.split_once(THINK_CLOSE) else {
        return malformed();
    };
    let answer = answer.trim();
    if answer.is_empty() {
        return malformed();
    }
    StructuredOutput {
        raw: raw.to_string(),
        reasoning: Some(reasoning.to_string()),
        answer: answer.to_string(),
        well_formed: true,
    }
}
