//! Desk-scale autoregressive policy.
//!
//! The next-token context is the mean of the prompt-token embeddings plus one
//! embedding per slot of a trailing window over the generated tokens:
//!
//! ```text
//! h_t = mean_i P[x_i] + Σ_{j<W} E_j[o_{t-1-j}]      (START row before the first token)
//! g_t = u·h_t + u0                                   (copy gate)
//! π(· | x, o_<t) = softmax(O·h_t + b + g_t·f)
//! ```
//!
//! `f_v` is the frequency of token `v` in the prompt (`<unk>` excluded), so a
//! positive gate copies tokens that the prompt repeats. There is no
//! attention, so the gradients below are short and checkable against finite
//! differences.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::random::normal;
use crate::textproc::{THINK_CLOSE, THINK_OPEN};

pub const DESK_FORMAT_VERSION: u32 = 1;
pub const MAX_VOCAB: usize = 256;

pub const EOS: u32 = 0;
pub const OPEN: u32 = 1;
pub const CLOSE: u32 = 2;
pub const UNK: u32 = 3;
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
const SPECIALS: [&str; 4] = [EOS_TOKEN, THINK_OPEN, THINK_CLOSE, UNK_TOKEN];

/// Splits text into policy words: think tags are kept whole, everything else
/// is lowercased with ASCII punctuation trimmed.
pub fn split_words(text: &str) -> Vec<String> {
    let spaced = text
        .replace(THINK_CLOSE, " \u{0}c ")
        .replace(THINK_OPEN, " \u{0}o ");
    let mut out = Vec::new();
    let mut tags = spaced.split_whitespace().peekable();
    while let Some(piece) = tags.next() {
        if piece == "\u{0}c" {
            out.push(THINK_CLOSE.to_string());
        } else if piece == "\u{0}o" {
            out.push(THINK_OPEN.to_string());
        } else {
            let w = piece
                .to_lowercase()
                .trim_matches(|c: char| c.is_ascii_punctuation() || c == '\u{0}')
                .to_string();
            if !w.is_empty() {
                out.push(w);
            }
        }
    }
    out
}

/// Word-level vocabulary. Ids 0..4 are `<eos>`, `<think>`, `</think>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = PolicyError;

    fn try_from(tokens: Vec<String>) -> Result<Self, PolicyError> {
        if tokens.len() < SPECIALS.len() || tokens.len() > MAX_VOCAB {
            return Err(PolicyError::BadVocab(format!(
                "size {} outside [{}, {MAX_VOCAB}]",
                tokens.len(),
                SPECIALS.len()
            )));
        }
        if tokens[..SPECIALS.len()] != SPECIALS {
            return Err(PolicyError::BadVocab("special tokens out of place".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(PolicyError::BadVocab(format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Most frequent words first (ties alphabetical), capped at `max_size`
    /// entries including the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self, PolicyError> {
        if max_size < SPECIALS.len() || max_size > MAX_VOCAB {
            return Err(PolicyError::BadVocab(format!("max_size {max_size} outside [{}, {MAX_VOCAB}]", SPECIALS.len())));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                if !SPECIALS.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect::<Vec<_>>();
        Vocab::try_from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Space-joined rendering; `<eos>` is dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != EOS)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub dim: usize,
    pub window: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            dim: 32,
            window: 3,
            init_std: 0.1,
            seed: 0,
        }
    }
}

/// One generated sequence. `tokens` ends with `<eos>` unless the length cap
/// was hit; `logprobs` is aligned with `tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub text: String,
}

/// Flat parameter vector layout:
/// `[P: V×D][E: W×(V+1)×D][O: V×D][b: V][u: D][u0]`, row-major, row `V` of
/// each `E_j` being the START row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskPolicy {
    pub version: u32,
    pub vocab: Vocab,
    pub dim: usize,
    pub window: usize,
    pub params: Vec<f64>,
    /// Number of applied updates.
    pub updates: u64,
}

/// Prompt summary reused across every decoding step.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub ids: Vec<u32>,
    pub mean: Vec<f64>,
    /// Prompt frequency of each vocabulary token, `<unk>` zeroed.
    pub freq: Vec<f64>,
}

impl DeskPolicy {
    /// Random embeddings, zero output layer: the initial policy is uniform.
    pub fn new(vocab: Vocab, cfg: &DeskConfig) -> Result<Self, PolicyError> {
        if cfg.dim == 0 || cfg.window == 0 {
            return Err(PolicyError::BadConfig("dim and window must be >= 1".into()));
        }
        if !(cfg.init_std.is_finite() && cfg.init_std >= 0.0) {
            return Err(PolicyError::BadConfig("init_std must be finite and >= 0".into()));
        }
        let mut p = DeskPolicy {
            version: DESK_FORMAT_VERSION,
            dim: cfg.dim,
            window: cfg.window,
            params: Vec::new(),
            updates: 0,
            vocab,
        };
        let n = p.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let emb_end = p.out_w_offset();
        p.params = (0..n)
            .map(|i| if i < emb_end { normal(&mut rng, cfg.init_std) } else { 0.0 })
            .collect();
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_params(&self) -> usize {
        let (v, d, w) = (self.vocab_size(), self.dim, self.window);
        v * d + w * (v + 1) * d + v * d + v + d + 1
    }

    pub fn prompt_row(&self, tok: u32) -> usize {
        tok as usize * self.dim
    }

    /// Row of window slot `j` (0 = previous token); `tok == V` is START.
    pub fn window_row(&self, j: usize, tok: u32) -> usize {
        let v = self.vocab_size();
        v * self.dim + (j * (v + 1) + tok as usize) * self.dim
    }

    pub fn out_w_offset(&self) -> usize {
        let v = self.vocab_size();
        v * self.dim + self.window * (v + 1) * self.dim
    }

    pub fn out_row(&self, tok: u32) -> usize {
        self.out_w_offset() + tok as usize * self.dim
    }

    pub fn out_b_offset(&self) -> usize {
        self.out_w_offset() + self.vocab_size() * self.dim
    }

    pub fn gate_offset(&self) -> usize {
        self.out_b_offset() + self.vocab_size()
    }

    fn start(&self) -> u32 {
        self.vocab_size() as u32
    }

    pub fn prompt_context(&self, prompt: &str) -> PromptContext {
        let ids = self.vocab.encode(prompt);
        let mut mean = vec![0.0; self.dim];
        let mut freq = vec![0.0; self.vocab_size()];
        if !ids.is_empty() {
            for &id in &ids {
                let r = self.prompt_row(id);
                for (m, p) in mean.iter_mut().zip(&self.params[r..r + self.dim]) {
                    *m += p;
                }
                freq[id as usize] += 1.0;
            }
            let n = ids.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            freq.iter_mut().for_each(|f| *f /= n);
            freq[UNK as usize] = 0.0;
        }
        PromptContext { ids, mean, freq }
    }

    fn window_token(&self, history: &[u32], j: usize) -> u32 {
        if j < history.len() {
            history[history.len() - 1 - j]
        } else {
            self.start()
        }
    }

    fn hidden(&self, ctx: &PromptContext, history: &[u32]) -> Vec<f64> {
        let mut h = ctx.mean.clone();
        for j in 0..self.window {
            let r = self.window_row(j, self.window_token(history, j));
            for (hv, e) in h.iter_mut().zip(&self.params[r..r + self.dim]) {
                *hv += e;
            }
        }
        h
    }

    /// Log-probabilities of the next token after `history`.
    pub fn next_logprobs(&self, ctx: &PromptContext, history: &[u32]) -> Vec<f64> {
        let h = self.hidden(ctx, history);
        let b = self.out_b_offset();
        let gate = self.gate(&h);
        let logits: Vec<f64> = (0..self.vocab_size() as u32)
            .map(|v| {
                let r = self.out_row(v);
                dot(&self.params[r..r + self.dim], &h) + self.params[b + v as usize] + gate * ctx.freq[v as usize]
            })
            .collect();
        log_softmax(&logits)
    }

    fn gate(&self, h: &[f64]) -> f64 {
        let g = self.gate_offset();
        dot(&self.params[g..g + self.dim], h) + self.params[g + self.dim]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            Some(&id) => Err(PolicyError::TokenOutOfRange { id, vocab: self.vocab_size() }),
            None => Ok(()),
        }
    }

    /// Ancestral sampling, `n` sequences from one seeded stream.
    pub fn sample(&self, prompt: &str, n: usize, max_tokens: usize, seed: u64) -> Result<Vec<Completion>, PolicyError> {
        check_budget(n, max_tokens)?;
        let ctx = self.prompt_context(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| self.decode_with(&ctx, max_tokens, |lp| draw(lp, rng.gen::<f64>())))
            .collect())
    }

    /// Argmax decoding, lowest id on ties.
    pub fn greedy(&self, prompt: &str, max_tokens: usize) -> Result<Completion, PolicyError> {
        check_budget(1, max_tokens)?;
        let ctx = self.prompt_context(prompt);
        Ok(self.decode_with(&ctx, max_tokens, argmax))
    }

    fn decode_with(&self, ctx: &PromptContext, max_tokens: usize, mut pick: impl FnMut(&[f64]) -> u32) -> Completion {
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        while tokens.len() < max_tokens {
            let lp = self.next_logprobs(ctx, &tokens);
            let tok = pick(&lp);
            tokens.push(tok);
            logprobs.push(lp[tok as usize]);
            if tok == EOS {
                break;
            }
        }
        let text = self.vocab.decode(&tokens);
        Completion { tokens, logprobs, text }
    }

    /// Teacher-forced per-token log-probabilities.
    pub fn logprob(&self, prompt: &str, completion: &[u32]) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(completion)?;
        let ctx = self.prompt_context(prompt);
        Ok(self.logprob_ctx(&ctx, completion))
    }

    pub fn logprob_ctx(&self, ctx: &PromptContext, completion: &[u32]) -> Vec<f64> {
        (0..completion.len())
            .map(|t| self.next_logprobs(ctx, &completion[..t])[completion[t] as usize])
            .collect()
    }

    /// Adds `Σ_t coeffs[t] · ∇ log π(completion[t])` into `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        prompt: &str,
        completion: &[u32],
        coeffs: &[f64],
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        self.check_tokens(completion)?;
        if coeffs.len() != completion.len() {
            return Err(PolicyError::ShapeMismatch { expected: completion.len(), got: coeffs.len() });
        }
        if grad.len() != self.num_params() {
            return Err(PolicyError::ShapeMismatch { expected: self.num_params(), got: grad.len() });
        }
        let ctx = self.prompt_context(prompt);
        let d = self.dim;
        let b_off = self.out_b_offset();
        let g_off = self.gate_offset();
        let mut d_mean = vec![0.0; d];
        for (t, (&y, &c)) in completion.iter().zip(coeffs).enumerate() {
            if c == 0.0 {
                continue;
            }
            let history = &completion[..t];
            let h = self.hidden(&ctx, history);
            let lp = self.next_logprobs(&ctx, history);
            let mut dh = vec![0.0; d];
            let mut d_gate = 0.0;
            for (v, lpv) in lp.iter().enumerate() {
                let g = c * (f64::from(u8::from(v as u32 == y)) - lpv.exp());
                grad[b_off + v] += g;
                d_gate += g * ctx.freq[v];
                let r = self.out_row(v as u32);
                for k in 0..d {
                    grad[r + k] += g * h[k];
                    dh[k] += g * self.params[r + k];
                }
            }
            for k in 0..d {
                grad[g_off + k] += d_gate * h[k];
                dh[k] += d_gate * self.params[g_off + k];
            }
            grad[g_off + d] += d_gate;
            for j in 0..self.window {
                let r = self.window_row(j, self.window_token(history, j));
                for k in 0..d {
                    grad[r + k] += dh[k];
                }
            }
            for k in 0..d {
                d_mean[k] += dh[k];
            }
        }
        if !ctx.ids.is_empty() {
            let inv = 1.0 / ctx.ids.len() as f64;
            for &id in &ctx.ids {
                let r = self.prompt_row(id);
                for k in 0..d {
                    grad[r + k] += d_mean[k] * inv;
                }
            }
        }
        Ok(())
    }

    /// `params ← params − lr·grad`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<(), PolicyError> {
        if grad.len() != self.params.len() {
            return Err(PolicyError::ShapeMismatch { expected: self.params.len(), got: grad.len() });
        }
        if !lr.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFiniteGrad);
        }
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        self.updates += 1;
        Ok(())
    }

    /// Supervised steps on the bare `<think> </think>` prefix, cycling through
    /// `prompts`. Only the opening of the output is targeted; the answer that
    /// follows is left to reinforcement.
    pub fn format_warm_start(&mut self, prompts: &[String], steps: usize, lr: f64) -> Result<(), PolicyError> {
        if steps == 0 {
            return Ok(());
        }
        if prompts.is_empty() {
            return Err(PolicyError::BadConfig("format warm start needs at least one prompt".into()));
        }
        let target = [OPEN, CLOSE];
        let coeffs = [-1.0 / target.len() as f64; 2];
        for step in 0..steps {
            let mut grad = vec![0.0; self.params.len()];
            self.accumulate_logprob_grad(&prompts[step % prompts.len()], &target, &coeffs, &mut grad)?;
            self.apply_gradient(&grad, lr)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let p: DeskPolicy = serde_json::from_str(text).map_err(|e| PolicyError::BadCheckpoint(e.to_string()))?;
        if p.version != DESK_FORMAT_VERSION {
            return Err(PolicyError::BadCheckpoint(format!("unsupported version {}", p.version)));
        }
        if p.dim == 0 || p.window == 0 || p.params.len() != p.num_params() {
            return Err(PolicyError::BadCheckpoint("parameter shape mismatch".into()));
        }
        if p.params.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::BadCheckpoint("non-finite parameter".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_budget(n: usize, max_tokens: usize) -> Result<(), PolicyError> {
    if n == 0 {
        return Err(PolicyError::BadConfig("n must be >= 1".into()));
    }
    if max_tokens == 0 {
        return Err(PolicyError::BadConfig("max_tokens must be >= 1".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn draw(logprobs: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in logprobs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    last as u32
}

fn argmax(logprobs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, lp) in logprobs.iter().enumerate() {
        if *lp > logprobs[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab_of(n: usize) -> Vocab {
        let words: Vec<String> = (0..n - SPECIALS.len()).map(|i| format!("w{i:03}")).collect();
        Vocab::build(words.iter().map(String::as_str), n).unwrap()
    }

    fn random_policy(v: usize, seed: u64) -> DeskPolicy {
        let mut p = DeskPolicy::new(vocab_of(v), &DeskConfig { dim: 6, window: 2, init_std: 0.5, seed }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for x in p.params.iter_mut() {
            *x = normal(&mut rng, 0.7);
        }
        p
    }

    /// Forward pass written out longhand from the model definition.
    fn naive_logprob(p: &DeskPolicy, prompt: &[u32], completion: &[u32]) -> f64 {
        let (v, d, w) = (p.vocab_size(), p.dim, p.window);
        let at = |off: usize| p.params[off];
        let mut total = 0.0;
        for t in 0..completion.len() {
            let mut h = vec![0.0; d];
            for k in 0..d {
                let mut s = 0.0;
                for &x in prompt {
                    s += at(x as usize * d + k);
                }
                h[k] = if prompt.is_empty() { 0.0 } else { s / prompt.len() as f64 };
                for j in 0..w {
                    let tok = if t >= j + 1 { completion[t - 1 - j] as usize } else { v };
                    h[k] += at(v * d + (j * (v + 1) + tok) * d + k);
                }
            }
            let out = v * d + w * (v + 1) * d;
            let gate_at = out + v * d + v;
            let gate = (0..d).map(|k| at(gate_at + k) * h[k]).sum::<f64>() + at(gate_at + d);
            let logits: Vec<f64> = (0..v)
                .map(|i| {
                    let copies = prompt.iter().filter(|&&x| x as usize == i && x != UNK).count();
                    let f = copies as f64 / prompt.len() as f64;
                    (0..d).map(|k| at(out + i * d + k) * h[k]).sum::<f64>() + at(out + v * d + i) + gate * f
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            total += (logits[completion[t] as usize].exp() / z).ln();
        }
        total
    }

    #[test]
    fn split_words_keeps_tags() {
        assert_eq!(
            split_words("<think>Hmm, ok.</think> Formal  GRAPH!"),
            vec!["<think>", "hmm", "ok", "</think>", "formal", "graph"]
        );
        assert_eq!(split_words(""), Vec::<String>::new());
    }

    #[test]
    fn vocab_build_orders_by_frequency() {
        let v = Vocab::build(["b a b", "c b a"], 10).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(4), Some("b"));
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.id(THINK_OPEN), Some(OPEN));
        assert_eq!(v.encode("b zzz </think>"), vec![4, UNK, CLOSE]);
        assert_eq!(v.decode(&[OPEN, 4, CLOSE, 6, EOS]), "<think> b </think> c");
        let capped = Vocab::build(["b a b", "c b a"], 5).unwrap();
        assert_eq!(capped.len(), 5);
        assert!(Vocab::build(["a"], 300).is_err());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>("[\"a\",\"b\",\"c\",\"d\"]").is_err());
    }

    #[test]
    fn uniform_init_gives_minus_ln_v() {
        let p = DeskPolicy::new(vocab_of(64), &DeskConfig::default()).unwrap();
        let lps = p.logprob("w001 w002", &[5, 9, EOS]).unwrap();
        for lp in lps {
            assert_eq!(lp, -(64f64).ln());
        }
    }

    #[test]
    fn sampling_is_seeded_and_capped() {
        let p = random_policy(20, 3);
        let a = p.sample("w001 w003", 4, 12, 99).unwrap();
        let b = p.sample("w001 w003", 4, 12, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for c in &a {
            assert!(c.tokens.len() <= 12);
            assert_eq!(c.tokens.len(), c.logprobs.len());
            assert_eq!(p.logprob("w001 w003", &c.tokens).unwrap(), c.logprobs);
        }
        for c in p.sample("w001", 5, 1, 1).unwrap() {
            assert_eq!(c.tokens.len(), 1);
        }
        assert!(p.sample("x", 0, 4, 0).is_err());
        assert!(p.sample("x", 1, 0, 0).is_err());
    }

    #[test]
    fn greedy_picks_argmax() {
        let mut p = DeskPolicy::new(vocab_of(10), &DeskConfig::default()).unwrap();
        let b = p.out_b_offset();
        p.params[b + 7] = 2.0;
        p.params[b + EOS as usize] = 1.0;
        let c = p.greedy("w000", 3).unwrap();
        assert_eq!(c.tokens, vec![7, 7, 7]);
        p.params[b + EOS as usize] = 3.0;
        assert_eq!(p.greedy("w000", 3).unwrap().tokens, vec![EOS]);
        assert_eq!(p.greedy("w000", 3).unwrap().text, "");
    }

    #[test]
    fn sampled_logprob_matches_naive_oracle() {
        for seed in 0..5 {
            let p = random_policy(12, seed);
            let prompt = "w000 w004 w004 nope";
            let ids = p.vocab.encode(prompt);
            for c in p.sample(prompt, 3, 10, seed).unwrap() {
                let fast: f64 = c.logprobs.iter().sum();
                let slow = naive_logprob(&p, &ids, &c.tokens);
                assert!((fast.exp() - slow.exp()).abs() < 1e-9);
                assert!((fast - slow).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = random_policy(9, 11);
        let prompt = "w001 w002 w002";
        let completion = [5u32, OPEN, 6, CLOSE, 7, EOS];
        let coeffs = [0.3, -1.2, 0.7, 1.0, -0.4, 0.9];
        let f = |q: &DeskPolicy| -> f64 {
            q.logprob(prompt, &completion).unwrap().iter().zip(&coeffs).map(|(l, c)| l * c).sum()
        };
        let mut grad = vec![0.0; p.num_params()];
        p.accumulate_logprob_grad(prompt, &completion, &coeffs, &mut grad).unwrap();
        let ids = p.vocab.encode(prompt);
        let coords = [
            p.prompt_row(ids[1]) + 2,
            p.prompt_row(ids[0]),
            p.window_row(0, 5) + 1,
            p.window_row(1, 9) + 3,
            p.window_row(0, CLOSE) + 5,
            p.out_row(5) + 4,
            p.out_row(EOS),
            p.out_row(8) + 2,
            p.out_b_offset() + 6,
            p.out_b_offset(),
            p.gate_offset() + 1,
            p.gate_offset() + p.dim,
        ];
        let h = 1e-5;
        for &i in &coords {
            let mut up = p.clone();
            up.params[i] += h;
            let mut dn = p.clone();
            dn.params[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "coord {i}: analytic {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn window_row_perturbation_is_local() {
        let p = random_policy(10, 5);
        let completion = [6u32, 7, 8, 9, 8, 6, EOS];
        let before = p.logprob("w000", &completion).unwrap();
        let mut q = p.clone();
        let r = q.window_row(0, 9);
        q.params[r] += 0.5;
        let after = q.logprob("w000", &completion).unwrap();
        for t in 0..completion.len() {
            let affected = t >= 1 && completion[t - 1] == 9;
            assert_eq!(before[t] != after[t], affected, "step {t}");
        }
    }

    #[test]
    fn apply_gradient_contract() {
        let mut p = random_policy(8, 2);
        let orig = p.params.clone();
        let g = vec![1.0; p.num_params()];
        p.apply_gradient(&vec![0.0; p.num_params()], 0.5).unwrap();
        assert_eq!(p.params, orig);
        p.apply_gradient(&g, 0.0).unwrap();
        assert_eq!(p.params, orig);
        assert!(matches!(p.apply_gradient(&g[1..], 0.1), Err(PolicyError::ShapeMismatch { .. })));
        let mut bad = g.clone();
        bad[3] = f64::NAN;
        assert!(matches!(p.apply_gradient(&bad, 0.1), Err(PolicyError::NonFiniteGrad)));
        p.apply_gradient(&g, 0.25).unwrap();
        assert_eq!(p.params[0], orig[0] - 0.25);
        assert_eq!(p.updates, 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = random_policy(15, 8);
        let back = DeskPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        p.save(&path).unwrap();
        assert_eq!(DeskPolicy::load(&path).unwrap(), p);
        let mut broken = p.clone();
        broken.params.pop();
        assert!(DeskPolicy::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn format_warm_start_raises_think_prefix() {
        let mut p = DeskPolicy::new(vocab_of(20), &DeskConfig::default()).unwrap();
        let prompts = vec!["w001 w002".to_string(), "w003".to_string()];
        let before: f64 = p.logprob(&prompts[0], &[OPEN, CLOSE]).unwrap().iter().sum();
        let untouched = p.clone();
        p.format_warm_start(&prompts, 0, 1.0).unwrap();
        assert_eq!(p, untouched);
        p.format_warm_start(&prompts, 5, 0.5).unwrap();
        let after: f64 = p.logprob(&prompts[0], &[OPEN, CLOSE]).unwrap().iter().sum();
        assert!(after > before);
        assert_eq!(p.updates, 5);
        assert!(p.format_warm_start(&[], 1, 0.5).is_err());
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let p = random_policy(8, 1);
        assert!(matches!(p.logprob("w", &[8]), Err(PolicyError::TokenOutOfRange { id: 8, .. })));
    }

    proptest! {
        #[test]
        fn next_token_distribution_is_normalized(seed in any::<u64>(), hist in proptest::collection::vec(0u32..16, 0..6)) {
            let p = random_policy(16, seed);
            let ctx = p.prompt_context("w001 w002 w003");
            let lp = p.next_logprobs(&ctx, &hist);
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(lp.iter().all(|l| l.is_finite()));
        }
    }
}
