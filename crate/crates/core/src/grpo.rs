//! Group relative policy optimization over the desk policy.
//!
//! Conventions: advantages are standardized with the population standard
//! deviation plus `std_floor`, and a group whose deviation is below the floor
//! gets all-zero advantages. Token losses are averaged per sequence, then
//! over the group.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example, Split, StyleMap};
use crate::hashing::{derive_seed, fnv1a64};
use crate::policy::{build_prompt, PolicyError, PolicyHandle, PromptTemplate, TemplateError};
use crate::prm::PersonalScorer;
use crate::retrieval::{RetrievalError, Retriever};
use crate::reward::{composite_reward, PersonalTarget, RewardBreakdown, RewardError, RewardWeights};
use crate::textproc::{parse_think, tokenize, StructuredOutput};

pub const DEFAULT_SAMPLE_LIMIT: usize = 500;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size {0} is below 2")]
    GroupTooSmall(usize),
    #[error("rewards must be finite")]
    NonFiniteReward,
    #[error("invalid GRPO configuration: {0}")]
    BadConfig(String),
    #[error("group {input_key}: per-output lists are not aligned")]
    Misaligned { input_key: String },
    #[error("non-finite gradient in group {input_key}")]
    NonFiniteGradient { input_key: String },
    #[error("steps must be >= 1")]
    ZeroSteps,
    #[error("the train split is empty")]
    EmptyTrainSplit,
    #[error("training requires the desk policy; the remote backend is generation-only")]
    NotTrainable,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrpoMode {
    #[default]
    OnPolicySingleStep,
    ClippedMultiEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub max_completion: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub lr: f64,
    pub std_floor: f64,
    pub mode: GrpoMode,
    /// Gradient steps per group in clipped mode.
    pub epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 4,
            max_completion: 768,
            clip_eps: 0.2,
            kl_coef: 0.0,
            lr: 1e-2,
            std_floor: 1e-8,
            mode: GrpoMode::OnPolicySingleStep,
            epochs: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::BadConfig(m.to_string()));
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if self.max_completion < 1 {
            return bad("max_completion must be >= 1");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return bad("kl_coef must be finite and >= 0");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.std_floor.is_finite() && self.std_floor >= 0.0) {
            return bad("std_floor must be finite and >= 0");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        Ok(())
    }
}

/// `A_j = (r_j − mean) / (pop_std + std_floor)`, or all zeros when
/// `pop_std < std_floor`.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward);
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g).sqrt();
    if std < std_floor || std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + std_floor)).collect())
}

/// G sampled outputs for one input, with everything the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub input_key: String,
    pub prompt: String,
    pub outputs: Vec<StructuredOutput>,
    pub tokens: Vec<Vec<u32>>,
    /// Log-probabilities at sampling time.
    pub token_logprobs: Vec<Vec<f64>>,
    pub ref_logprobs: Option<Vec<Vec<f64>>>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl GroupSample {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let g = self.outputs.len();
        if g < 2 {
            return Err(GrpoError::GroupTooSmall(g));
        }
        let misaligned = || GrpoError::Misaligned {
            input_key: self.input_key.clone(),
        };
        if self.tokens.len() != g || self.token_logprobs.len() != g || self.rewards.len() != g || self.advantages.len() != g
        {
            return Err(misaligned());
        }
        for j in 0..g {
            if self.tokens[j].is_empty() || self.token_logprobs[j].len() != self.tokens[j].len() {
                return Err(misaligned());
            }
            if let Some(r) = &self.ref_logprobs {
                if r.len() != g || r[j].len() != self.tokens[j].len() {
                    return Err(misaligned());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
}

/// Per-token loss and the coefficient on `∇ log π(token)` for one output.
fn token_terms(
    cfg: &GrpoConfig,
    adv: f64,
    old: &[f64],
    new: &[f64],
    reference: Option<&[f64]>,
    scale: f64,
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let coeffs = (0..new.len())
        .map(|t| match cfg.mode {
            GrpoMode::OnPolicySingleStep => {
                loss -= scale * adv * new[t];
                -scale * adv
            }
            GrpoMode::ClippedMultiEpoch => {
                let rho = (new[t] - old[t]).exp();
                let unclipped = rho * adv;
                let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
                let mut c = 0.0;
                if unclipped <= clipped {
                    loss -= scale * unclipped;
                    c -= scale * adv * rho;
                } else {
                    loss -= scale * clipped;
                }
                if let Some(r) = reference {
                    if cfg.kl_coef > 0.0 {
                        let ratio = (r[t] - new[t]).exp();
                        loss += scale * cfg.kl_coef * (ratio - (r[t] - new[t]) - 1.0);
                        c += scale * cfg.kl_coef * (1.0 - ratio);
                    }
                }
                c
            }
        })
        .collect();
    (loss, coeffs)
}

/// Computes the loss gradient for `group` and applies one step of size
/// `cfg.lr`. Nothing is applied if the gradient is not finite.
pub fn policy_gradient_step(
    group: &GroupSample,
    policy: &mut PolicyHandle,
    cfg: &GrpoConfig,
) -> Result<UpdateStats, GrpoError> {
    cfg.validate()?;
    group.validate()?;
    if cfg.kl_coef > 0.0 && cfg.mode == GrpoMode::ClippedMultiEpoch && group.ref_logprobs.is_none() {
        return Err(GrpoError::BadConfig("kl_coef > 0 needs reference log-probabilities".into()));
    }
    let desk = policy.desk_mut().map_err(|_| GrpoError::NotTrainable)?;
    let g = group.len() as f64;
    let mut grad = vec![0.0; desk.num_params()];
    let mut loss = 0.0;
    for j in 0..group.len() {
        let toks = &group.tokens[j];
        let current = match cfg.mode {
            GrpoMode::OnPolicySingleStep => group.token_logprobs[j].clone(),
            GrpoMode::ClippedMultiEpoch => desk.logprob(&group.prompt, toks)?,
        };
        let reference = group.ref_logprobs.as_ref().map(|r| r[j].as_slice());
        let scale = 1.0 / (g * toks.len() as f64);
        let (l, coeffs) = token_terms(
            cfg,
            group.advantages[j],
            &group.token_logprobs[j],
            &current,
            reference,
            scale,
        );
        loss += l;
        desk.accumulate_logprob_grad(&group.prompt, toks, &coeffs, &mut grad)?;
    }
    let grad_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !grad_norm.is_finite() || !loss.is_finite() {
        return Err(GrpoError::NonFiniteGradient {
            input_key: group.input_key.clone(),
        });
    }
    desk.apply_gradient(&grad, cfg.lr)?;
    let mean_reward = group.rewards.iter().map(|r| r.total).sum::<f64>() / g;
    Ok(UpdateStats {
        loss,
        grad_norm,
        mean_reward,
    })
}

/// Whether the answer contains `style` as a whole token.
pub fn has_style(answer: &str, style: &str) -> bool {
    let style = style.to_lowercase();
    tokenize(answer).as_slice().iter().any(|t| *t == style)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingStep {
    pub step: usize,
    pub mean_reward: f64,
    pub r_think_rate: f64,
    pub mean_r_personal: f64,
    pub personalization_acc: Option<f64>,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<TrainingStep>,
}

pub const TRAINING_LOG_HEADER: &str = "step,mean_reward,r_think_rate,mean_r_personal,personalization_acc,loss,grad_norm";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAINING_LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let acc = r.personalization_acc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, r.mean_reward, r.r_think_rate, r.mean_r_personal, acc, r.loss, r.grad_norm
            );
        }
        s
    }

    /// Mean of `field` over rows `from..to` (clamped); `None` if empty.
    pub fn window_mean(&self, from: usize, to: usize, field: impl Fn(&TrainingStep) -> Option<f64>) -> Option<f64> {
        let to = to.min(self.rows.len());
        let vals: Vec<f64> = self.rows.get(from.min(to)..to)?.iter().filter_map(field).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean of `field` over the last `n` rows.
    pub fn tail_mean(&self, n: usize, field: impl Fn(&TrainingStep) -> Option<f64>) -> Option<f64> {
        self.window_mean(self.rows.len().saturating_sub(n), self.rows.len(), field)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLoopConfig {
    pub grpo: GrpoConfig,
    pub steps: usize,
    pub seed: u64,
    pub sample_limit: usize,
    pub weights: RewardWeights,
    pub personal_target: PersonalTarget,
    /// Supervised `<think> </think>` steps run once before the first update.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            grpo: GrpoConfig::default(),
            steps: 2000,
            seed: 0,
            sample_limit: DEFAULT_SAMPLE_LIMIT,
            weights: RewardWeights::default(),
            personal_target: PersonalTarget::Answer,
            warmup_steps: 0,
            warmup_lr: 1.0,
        }
    }
}

/// Everything the loop reads but never mutates.
#[derive(Clone, Copy)]
pub struct TrainEnv<'a> {
    pub ds: &'a Dataset,
    pub retriever: &'a Retriever,
    pub template: &'a PromptTemplate,
    /// `None` trains without the personalization reward.
    pub scorer: Option<&'a PersonalScorer>,
    /// Ground-truth styles of a synthetic dataset, for the accuracy column.
    pub styles: Option<&'a StyleMap>,
}

/// Seeded training subset: a shuffled prefix of the train split.
pub fn training_subset<'a>(ds: &'a Dataset, limit: usize, seed: u64) -> Vec<&'a Example> {
    let mut train: Vec<&Example> = ds.split(Split::Train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "grpo-subset"));
    train.shuffle(&mut rng);
    train.truncate(limit);
    train
}

pub fn prompt_for(env: &TrainEnv<'_>, ex: &Example) -> Result<String, GrpoError> {
    let profile = env.ds.visible_profile(ex);
    let ctx = env.retriever.retrieve(&ex.example_id, &profile, &ex.query)?;
    Ok(build_prompt(&ex.query, &ctx, env.template)?)
}

/// Samples and scores one group under the current policy.
pub fn sample_group(
    env: &TrainEnv<'_>,
    policy: &PolicyHandle,
    ex: &Example,
    prompt: &str,
    cfg: &TrainLoopConfig,
    seed: u64,
) -> Result<GroupSample, GrpoError> {
    let samples = policy.sample(prompt, cfg.grpo.group_size, cfg.grpo.max_completion, seed)?;
    let mut group = GroupSample {
        input_key: ex.example_id.clone(),
        prompt: prompt.to_string(),
        outputs: Vec::with_capacity(samples.len()),
        tokens: Vec::with_capacity(samples.len()),
        token_logprobs: Vec::with_capacity(samples.len()),
        ref_logprobs: None,
        rewards: Vec::with_capacity(samples.len()),
        advantages: Vec::new(),
    };
    for s in samples {
        let out = parse_think(&s.text);
        let r = composite_reward(&out, &ex.reference, &ex.query, env.scorer, cfg.personal_target, &cfg.weights)?;
        group.outputs.push(out);
        group.tokens.push(s.tokens.ok_or(GrpoError::NotTrainable)?);
        group.token_logprobs.push(s.logprobs.ok_or(GrpoError::NotTrainable)?);
        group.rewards.push(r);
    }
    let totals: Vec<f64> = group.rewards.iter().map(|r| r.total).collect();
    group.advantages = group_advantages(&totals, cfg.grpo.std_floor)?;
    Ok(group)
}

fn log_row(step: usize, group: &GroupSample, stats: UpdateStats, style: Option<&str>) -> TrainingStep {
    let g = group.len() as f64;
    TrainingStep {
        step,
        mean_reward: stats.mean_reward,
        r_think_rate: group.rewards.iter().map(|r| r.r_think as f64).sum::<f64>() / g,
        mean_r_personal: group.rewards.iter().map(|r| r.r_personal).sum::<f64>() / g,
        personalization_acc: style.map(|s| group.outputs.iter().filter(|o| has_style(&o.answer, s)).count() as f64 / g),
        loss: stats.loss,
        grad_norm: stats.grad_norm,
    }
}

/// Runs `cfg.steps` GRPO steps over a seeded subset of the train split,
/// cycling through it in order. On a step error the policy is written to
/// `checkpoint` (when given) before the error is returned.
pub fn train_loop(
    env: &TrainEnv<'_>,
    policy: &mut PolicyHandle,
    cfg: &TrainLoopConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainingLog, GrpoError> {
    if cfg.steps == 0 {
        return Err(GrpoError::ZeroSteps);
    }
    cfg.grpo.validate()?;
    cfg.weights.validate()?;
    if !policy.is_trainable() {
        return Err(GrpoError::NotTrainable);
    }
    if cfg.sample_limit == 0 {
        return Err(GrpoError::BadConfig("sample_limit must be >= 1".into()));
    }
    if cfg.warmup_steps > 0 && !(cfg.warmup_lr.is_finite() && cfg.warmup_lr > 0.0) {
        return Err(GrpoError::BadConfig("warmup_lr must be finite and > 0".into()));
    }
    let subset = training_subset(env.ds, cfg.sample_limit, cfg.seed);
    if subset.is_empty() {
        return Err(GrpoError::EmptyTrainSplit);
    }
    let prompts = subset.iter().map(|ex| prompt_for(env, ex)).collect::<Result<Vec<_>, _>>()?;
    policy.desk_mut()?.format_warm_start(&prompts, cfg.warmup_steps, cfg.warmup_lr)?;
    let sample_seed = derive_seed(cfg.seed, "grpo-sample");
    let mut log = TrainingLog::default();
    for step in 0..cfg.steps {
        let i = step % subset.len();
        let ex = subset[i];
        let result = sample_group(env, policy, ex, &prompts[i], cfg, fnv1a64(sample_seed, &step.to_le_bytes()))
            .and_then(|group| {
                let mut stats = policy_gradient_step(&group, policy, &cfg.grpo)?;
                for _ in 1..cfg.grpo.epochs {
                    stats = policy_gradient_step(&group, policy, &cfg.grpo)?;
                }
                Ok((group, stats))
            });
        match result {
            Ok((group, stats)) => {
                let style = env.styles.and_then(|m| m.get(&ex.user_id)).map(String::as_str);
                log.rows.push(log_row(step + 1, &group, stats, style));
            }
            Err(e) => {
                if let (Some(path), Ok(desk)) = (checkpoint, policy.desk()) {
                    desk.save(path)?;
                }
                return Err(e);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_dataset_with, SynthConfig};
    use crate::policy::{DeskConfig, DeskPolicy, Vocab};
    use crate::retrieval::Strategy;
    use proptest::prelude::*;

    fn desk(v: usize, seed: u64) -> PolicyHandle {
        let words: Vec<String> = (0..v - 4).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::build(words.iter().map(String::as_str), v).unwrap();
        PolicyHandle::Desk(DeskPolicy::new(vocab, &DeskConfig { seed, ..DeskConfig::default() }).unwrap())
    }

    fn group_from(policy: &PolicyHandle, rewards: &[f64], seed: u64) -> GroupSample {
        let prompt = "w1 w2 w3".to_string();
        let samples = policy.sample(&prompt, rewards.len(), 6, seed).unwrap();
        let w = RewardWeights::default();
        GroupSample {
            input_key: "ex".into(),
            outputs: samples.iter().map(|s| parse_think(&s.text)).collect(),
            tokens: samples.iter().map(|s| s.tokens.clone().unwrap()).collect(),
            token_logprobs: samples.iter().map(|s| s.logprobs.clone().unwrap()).collect(),
            ref_logprobs: None,
            rewards: rewards.iter().map(|&r| RewardBreakdown::compose(r, 0, None, &w)).collect(),
            advantages: group_advantages(rewards, 1e-8).unwrap(),
            prompt,
        }
    }

    #[test]
    fn advantages_example() {
        let a = group_advantages(&[1.0, 2.0, 3.0, 4.0], 1e-8).unwrap();
        let s = 1.25f64.sqrt() + 1e-8;
        let want = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a[0] + 1.3416).abs() < 1e-4 && (a[1] + 0.4472).abs() < 1e-4);
        assert_eq!(group_advantages(&[0.7; 5], 1e-8).unwrap(), vec![0.0; 5]);
        assert!(matches!(group_advantages(&[1.0], 1e-8), Err(GrpoError::GroupTooSmall(1))));
        assert!(matches!(group_advantages(&[1.0, f64::NAN], 1e-8), Err(GrpoError::NonFiniteReward)));
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for cfg in [
            GrpoConfig { group_size: 1, ..Default::default() },
            GrpoConfig { max_completion: 0, ..Default::default() },
            GrpoConfig { clip_eps: 1.0, ..Default::default() },
            GrpoConfig { kl_coef: -1.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn zero_advantages_leave_parameters_bit_identical() {
        let mut p = desk(20, 1);
        let group = group_from(&p, &[0.5; 4], 3);
        let before = p.desk().unwrap().params.clone();
        for mode in [GrpoMode::OnPolicySingleStep, GrpoMode::ClippedMultiEpoch] {
            let cfg = GrpoConfig { mode, lr: 10.0, ..Default::default() };
            let stats = policy_gradient_step(&group, &mut p, &cfg).unwrap();
            assert_eq!(stats.grad_norm, 0.0);
            assert_eq!(stats.loss, 0.0);
        }
        let after = &p.desk().unwrap().params;
        assert!(before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn positive_advantage_sequence_becomes_more_likely() {
        for seed in 0..5 {
            let mut p = desk(24, seed);
            let group = group_from(&p, &[0.0, 0.0, 1.0, 0.0], seed);
            let target = group.tokens[2].clone();
            let before: f64 = p.logprob(&group.prompt, &target).unwrap().iter().sum();
            policy_gradient_step(&group, &mut p, &GrpoConfig { lr: 1e-2, ..Default::default() }).unwrap();
            let after: f64 = p.logprob(&group.prompt, &target).unwrap().iter().sum();
            assert!(after > before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn clipped_gradient_equals_on_policy_gradient_at_ratio_one() {
        let p = desk(16, 2);
        let group = group_from(&p, &[0.1, 0.9, 0.4, 0.3], 8);
        let mut a = p.clone();
        let mut b = p.clone();
        let on = GrpoConfig { lr: 0.05, ..Default::default() };
        let clipped = GrpoConfig { mode: GrpoMode::ClippedMultiEpoch, ..on };
        let sa = policy_gradient_step(&group, &mut a, &on).unwrap();
        let sb = policy_gradient_step(&group, &mut b, &clipped).unwrap();
        assert_eq!(sa.grad_norm, sb.grad_norm);
        assert_eq!(a.desk().unwrap().params, b.desk().unwrap().params);
    }

    #[test]
    fn clipping_stops_the_gradient_outside_the_trust_region() {
        let mut p = desk(16, 4);
        let mut group = group_from(&p, &[0.0, 1.0, 0.0, 0.0], 5);
        // pretend the old policy was much less likely: ratios far above 1 + ε
        for lps in group.token_logprobs.iter_mut() {
            lps.iter_mut().for_each(|l| *l -= 2.0);
        }
        let cfg = GrpoConfig { mode: GrpoMode::ClippedMultiEpoch, ..Default::default() };
        let stats = policy_gradient_step(&group, &mut p, &cfg).unwrap();
        // positive-advantage output is clipped; negative ones keep their gradient
        assert!(stats.grad_norm > 0.0);
        let mut only_pos = group.clone();
        only_pos.advantages = vec![0.0, 1.0, 0.0, 0.0];
        let stats = policy_gradient_step(&only_pos, &mut p, &cfg).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
    }

    #[test]
    fn kl_term_pulls_towards_reference() {
        let p = desk(16, 6);
        let mut group = group_from(&p, &[0.3; 4], 2);
        let refs: Vec<Vec<f64>> = group.token_logprobs.iter().map(|l| l.iter().map(|x| x + 0.5).collect()).collect();
        group.ref_logprobs = Some(refs);
        let cfg = GrpoConfig { mode: GrpoMode::ClippedMultiEpoch, kl_coef: 0.1, lr: 0.05, ..Default::default() };
        let mut q = p.clone();
        let stats = policy_gradient_step(&group, &mut q, &cfg).unwrap();
        let r = 0.5f64.exp();
        assert!((stats.loss - 0.1 * (r - 0.5 - 1.0)).abs() < 1e-12);
        let before: f64 = p.logprob(&group.prompt, &group.tokens[0]).unwrap().iter().sum();
        let after: f64 = q.logprob(&group.prompt, &group.tokens[0]).unwrap().iter().sum();
        assert!(after > before);
        group.ref_logprobs = None;
        assert!(policy_gradient_step(&group, &mut q, &cfg).is_err());
    }

    #[test]
    fn misaligned_groups_are_rejected() {
        let mut p = desk(12, 0);
        let mut group = group_from(&p, &[0.0, 1.0], 1);
        group.token_logprobs[1].push(0.0);
        assert!(matches!(
            policy_gradient_step(&group, &mut p, &GrpoConfig::default()),
            Err(GrpoError::Misaligned { .. })
        ));
    }

    #[test]
    fn nonfinite_gradient_aborts_without_update() {
        let mut p = desk(12, 0);
        let mut group = group_from(&p, &[0.0, 1.0], 1);
        group.advantages = vec![f64::INFINITY, 0.0];
        let before = p.desk().unwrap().params.clone();
        assert!(matches!(
            policy_gradient_step(&group, &mut p, &GrpoConfig::default()),
            Err(GrpoError::NonFiniteGradient { .. })
        ));
        assert_eq!(p.desk().unwrap().params, before);
    }

    #[test]
    fn style_detection_is_token_level() {
        assert!(has_style("Formal graph nets", "formal"));
        assert!(!has_style("informal graph", "formal"));
        assert!(!has_style("", "formal"));
    }

    fn tiny_env_run(steps: usize, seed: u64) -> (TrainingLog, PolicyHandle) {
        let mut sc = SynthConfig::new(3, 4, vec!["formal".into(), "terse".into()], 0.0);
        sc.items_per_user = 4;
        sc.examples_per_user = 4;
        let (ds, styles) = synth_dataset_with(&sc).unwrap();
        let vocab = Vocab::build(ds.examples.iter().map(|e| e.reference.as_str()), 64).unwrap();
        let mut policy = PolicyHandle::Desk(DeskPolicy::new(vocab, &DeskConfig::default()).unwrap());
        let retriever = Retriever::new(Strategy::Bm25, 2, seed);
        let template = PromptTemplate::default();
        let env = TrainEnv { ds: &ds, retriever: &retriever, template: &template, scorer: None, styles: Some(&styles) };
        let cfg = TrainLoopConfig {
            grpo: GrpoConfig { max_completion: 8, lr: 0.5, ..Default::default() },
            steps,
            seed,
            ..Default::default()
        };
        let log = train_loop(&env, &mut policy, &cfg, None).unwrap();
        (log, policy)
    }

    #[test]
    fn train_loop_is_deterministic_and_logs_every_step() {
        let (a, pa) = tiny_env_run(12, 5);
        let (b, pb) = tiny_env_run(12, 5);
        assert_eq!(a.rows.len(), 12);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(pa.desk().unwrap().to_json(), pb.desk().unwrap().to_json());
        assert!(a.to_csv().starts_with(TRAINING_LOG_HEADER));
        assert!(a.rows.iter().all(|r| r.mean_r_personal == 0.0 && r.personalization_acc.is_some()));
        let (c, _) = tiny_env_run(12, 6);
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn train_loop_preconditions() {
        let (ds, _) = synth_dataset_with(&SynthConfig::new(1, 2, vec!["formal".into()], 0.0)).unwrap();
        let retriever = Retriever::new(Strategy::Recency, 2, 0);
        let template = PromptTemplate::default();
        let env = TrainEnv { ds: &ds, retriever: &retriever, template: &template, scorer: None, styles: None };
        let mut p = desk(12, 0);
        let zero = TrainLoopConfig { steps: 0, ..Default::default() };
        assert!(matches!(train_loop(&env, &mut p, &zero, None), Err(GrpoError::ZeroSteps)));
        let client = crate::policy::RemoteClient::with_key(Default::default(), None).unwrap();
        let mut remote = PolicyHandle::Remote(client);
        assert!(matches!(
            train_loop(&env, &mut remote, &TrainLoopConfig::default(), None),
            Err(GrpoError::NotTrainable)
        ));
    }

    #[test]
    fn abort_writes_checkpoint() {
        let (ds, _) = synth_dataset_with(&SynthConfig::new(1, 2, vec!["formal".into()], 0.0)).unwrap();
        let mut bad = ds.clone();
        for ex in bad.examples.iter_mut() {
            ex.reference = "...".into();
        }
        let retriever = Retriever::new(Strategy::Recency, 2, 0);
        let template = PromptTemplate::default();
        let env = TrainEnv { ds: &bad, retriever: &retriever, template: &template, scorer: None, styles: None };
        let mut p = desk(12, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abort.json");
        let cfg = TrainLoopConfig { steps: 3, ..Default::default() };
        assert!(matches!(train_loop(&env, &mut p, &cfg, Some(&path)), Err(GrpoError::Reward(_))));
        assert_eq!(DeskPolicy::load(&path).unwrap(), *p.desk().unwrap());
    }

    proptest! {
        #[test]
        fn advantage_identities(
            rewards in proptest::collection::vec(-5.0f64..5.0, 2..=8),
            shift in -10.0f64..10.0, scale in 0.01f64..100.0,
        ) {
            let a = group_advantages(&rewards, 1e-8).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
            let g = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / g;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g).sqrt();
            if std >= 1e-2 {
                let sa = (a.iter().map(|x| x * x).sum::<f64>() / g).sqrt();
                prop_assert!((sa - 1.0).abs() <= 1e-6);
            }
            // The floor in the denominator bounds the drift by |A|·floor/std.
            let same = |other: Vec<f64>| a.iter().zip(&other).all(|(x, y)| (x - y).abs() < 1e-5);
            if std >= 1e-2 {
                let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
                prop_assert!(same(group_advantages(&shifted, 1e-8).unwrap()));
            }
            if std >= 1e-2 && std * scale >= 1e-2 {
                let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
                prop_assert!(same(group_advantages(&scaled, 1e-8).unwrap()));
            }
        }
    }
}
