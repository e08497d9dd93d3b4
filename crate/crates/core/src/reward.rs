//! Composite reward `r = r_correct + α·r_think + β·r_personal`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{rouge_l_tokens, rouge_n_tokens, stable_sum};
use crate::prm::{PersonalScorer, PrmError};
use crate::textproc::{tokenize, StructuredOutput};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reference must be non-empty")]
    EmptyReference,
    #[error("reward weights must be finite and non-negative")]
    BadWeights,
    #[error("personalization scorer failed: {0}")]
    Scorer(#[from] PrmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl RewardWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, RewardError> {
        let w = RewardWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.alpha) && ok(self.beta) {
            Ok(())
        } else {
            Err(RewardError::BadWeights)
        }
    }
}

/// What the personalization scorer sees as `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonalTarget {
    /// The parsed final answer.
    #[default]
    Answer,
    /// The raw completion, reasoning included.
    FullOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_correct: f64,
    pub r_think: u8,
    /// 0 when no scorer is configured.
    pub r_personal: f64,
    pub personal_enabled: bool,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn compose(r_correct: f64, r_think: u8, r_personal: Option<f64>, w: &RewardWeights) -> Self {
        let (r_personal, personal_enabled) = match r_personal {
            Some(v) => (v, true),
            None => (0.0, false),
        };
        RewardBreakdown {
            r_correct,
            r_think,
            r_personal,
            personal_enabled,
            total: r_correct + w.alpha * r_think as f64 + w.beta * r_personal,
        }
    }
}

pub fn format_reward(out: &StructuredOutput) -> u8 {
    u8::from(out.well_formed)
}

/// ROUGE-1 + ROUGE-2 + ROUGE-L F1 of the answer against the reference.
pub fn correctness_reward(answer: &str, reference: &str) -> Result<f64, RewardError> {
    let r = tokenize(reference);
    if r.is_empty() {
        return Err(RewardError::EmptyReference);
    }
    let a = tokenize(answer);
    let (a, r) = (a.as_slice(), r.as_slice());
    let mut parts = [rouge_n_tokens(a, r, 1).f1, rouge_n_tokens(a, r, 2).f1, rouge_l_tokens(a, r).f1];
    Ok(stable_sum(&mut parts))
}

/// Scores one parsed completion. Malformed completions are scored on their
/// raw text (which `parse_think` already places in `answer`).
pub fn composite_reward(
    out: &StructuredOutput,
    reference: &str,
    query: &str,
    scorer: Option<&PersonalScorer>,
    target: PersonalTarget,
    w: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let r_correct = correctness_reward(&out.answer, reference)?;
    let r_think = format_reward(out);
    let r_personal = match scorer {
        Some(s) => {
            let y = match target {
                PersonalTarget::Answer => out.answer.as_str(),
                PersonalTarget::FullOutput => out.raw.as_str(),
            };
            Some(s.reward(query, y)?)
        }
        None => None,
    };
    Ok(RewardBreakdown::compose(r_correct, r_think, r_personal, w))
}

/// One line of a reward dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDumpLine {
    pub example_id: String,
    pub sample_idx: usize,
    pub r_correct: f64,
    pub r_think: u8,
    pub r_personal: f64,
    pub total: f64,
}

impl RewardDumpLine {
    pub fn new(example_id: &str, sample_idx: usize, r: &RewardBreakdown) -> Self {
        RewardDumpLine {
            example_id: example_id.to_string(),
            sample_idx,
            r_correct: r.r_correct,
            r_think: r.r_think,
            r_personal: r.r_personal,
            total: r.total,
        }
    }
}
