//! Personalization reward model.
//!
//! A (query, response) pair is featurized following the `[CLS] x [SEP] y
//! [SEP]` convention: hashed unigram/bigram counts of the query segment and
//! of the response segment live in separate blocks, followed by a few
//! interaction features. A one-hidden-layer tanh scorer maps the features to
//! an unbounded scalar, trained with the contrastive preference loss
//! `-log σ(s_p - s_n)` on (query, preferred, rejected) triplets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example, Split};
use crate::hashing::{fnv1a64, text_hash};
use crate::random::normal;
use crate::metrics::{rouge_n_tokens, unigram_counts};
use crate::retrieval::RetrievedContext;
use crate::textproc::{parse_think, tokenize};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TRIPLET_LIMIT: usize = 5000;
pub const DEFAULT_MAX_TOKENS: usize = 512;
/// Number of interaction features after the two hashed blocks.
pub const INTERACTION_FEATURES: usize = 3;

#[derive(Debug, Error)]
pub enum PrmError {
    #[error("no triplets to train on")]
    EmptyTriplets,
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("every generation failed ({0} examples)")]
    AllGenerationsFailed(usize),
    #[error("limit must be >= 1")]
    ZeroLimit,
    #[error("unsupported model file version {0}")]
    BadVersion(u32),
    #[error("model file is inconsistent: {0}")]
    BadModel(String),
    #[error("no external score for this (x, y) pair")]
    MissingScore,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub query: String,
    pub preferred: String,
    pub rejected: String,
}

impl PreferenceTriplet {
    /// `None` for degenerate pairs (identical responses) and empty fields.
    pub fn new(query: &str, preferred: &str, rejected: &str) -> Option<Self> {
        if preferred == rejected || query.is_empty() || preferred.is_empty() || rejected.is_empty() {
            return None;
        }
        Some(PreferenceTriplet {
            query: query.to_string(),
            preferred: preferred.to_string(),
            rejected: rejected.to_string(),
        })
    }
}

pub fn read_triplets(path: &Path) -> Result<Vec<PreferenceTriplet>, PrmError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| PrmError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn triplets_to_jsonl(triplets: &[PreferenceTriplet]) -> String {
    let mut out = String::new();
    for t in triplets {
        out.push_str(&serde_json::to_string(t).expect("triplet serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Buckets per segment block.
    pub hash_dim: usize,
    pub ngram_orders: Vec<usize>,
    pub seed: u64,
    /// Token budget for `[CLS] x [SEP] y [SEP]`, special tokens included.
    pub max_tokens: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            hash_dim: 4096,
            ngram_orders: vec![1, 2],
            seed: 0x9e37,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        2 * self.hash_dim + INTERACTION_FEATURES
    }
}

/// Sparse view of the fixed-length feature vector of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub dim: usize,
    /// Sorted by index, no duplicates, no zeros.
    pub entries: Vec<(usize, f64)>,
}

impl PairFeatures {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }
}

/// Truncates the pair so `3 + |x| + |y| <= max_tokens`; the response gives
/// way first.
fn truncate_pair(mut x: Vec<String>, mut y: Vec<String>, max_tokens: usize) -> (Vec<String>, Vec<String>) {
    let budget = max_tokens.saturating_sub(3);
    if x.len() + y.len() > budget {
        let y_keep = budget.saturating_sub(x.len());
        y.truncate(y_keep);
        x.truncate(budget);
    }
    (x, y)
}

pub fn featurize(x: &str, y: &str, cfg: &FeatureConfig) -> PairFeatures {
    let (xt, yt) = truncate_pair(tokenize(x).tokens, tokenize(y).tokens, cfg.max_tokens);
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (segment, toks) in [(0usize, &xt), (1usize, &yt)] {
        let base = segment * cfg.hash_dim;
        // segment tag keeps x and y hashes decorrelated on top of the block offset
        let tag = if segment == 0 { "x" } else { "y" };
        for &n in &cfg.ngram_orders {
            if n == 0 || toks.len() < n {
                continue;
            }
            for gram in toks.windows(n) {
                let key = format!("{tag}{n}:{}", gram.join(" "));
                let bucket = (fnv1a64(cfg.seed, key.as_bytes()) % cfg.hash_dim as u64) as usize;
                *acc.entry(base + bucket).or_insert(0.0) += 1.0;
            }
        }
    }

    let inter = 2 * cfg.hash_dim;
    if !yt.is_empty() {
        let xs = unigram_counts(&xt);
        let shared = yt.iter().filter(|t| xs.contains_key(t.as_str())).count();
        acc.insert(inter, shared as f64 / yt.len() as f64);
        acc.insert(inter + 1, rouge_n_tokens(&xt, &yt, 1).f1);
        acc.insert(inter + 2, yt.len() as f64 / (xt.len() + yt.len()) as f64);
    }
    PairFeatures {
        dim: cfg.dim(),
        entries: acc.into_iter().filter(|&(_, v)| v != 0.0).collect(),
    }
}

/// Weights of the scorer `w2 · tanh(W1ᵀ f + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub version: u32,
    pub features: FeatureConfig,
    pub hidden: usize,
    /// Row-major `F × H`: row `f` holds the weights leaving feature `f`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ScorerParams {
    pub fn zeros(features: FeatureConfig, hidden: usize) -> Self {
        let f = features.dim();
        ScorerParams {
            version: MODEL_FORMAT_VERSION,
            features,
            hidden,
            w1: vec![0.0; f * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Random first layer, zero output layer: every score starts at exactly 0.
    pub fn init(features: FeatureConfig, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(features, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.w1 {
            *w = normal(&mut rng, 0.1);
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Flat coordinate access in the order w1, b1, w2, b2.
    pub fn flat_get(&self, i: usize) -> f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        match i {
            i if i < a => self.w1[i],
            i if i < a + b => self.b1[i - a],
            i if i < a + b + c => self.w2[i - a - b],
            _ => self.b2,
        }
    }

    pub fn flat_set(&mut self, i: usize, v: f64) {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        match i {
            i if i < a => self.w1[i] = v,
            i if i < a + b => self.b1[i - a] = v,
            i if i < a + b + c => self.w2[i - a - b] = v,
            _ => self.b2 = v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|x| x.is_finite()) && self.b2.is_finite()
    }

    fn hidden_pre(&self, f: &PairFeatures) -> Vec<f64> {
        let h = self.hidden;
        let mut pre = self.b1.clone();
        for &(i, x) in &f.entries {
            let row = &self.w1[i * h..(i + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += w * x;
            }
        }
        pre
    }

    pub fn score_features(&self, f: &PairFeatures) -> f64 {
        let act: Vec<f64> = self.hidden_pre(f).into_iter().map(f64::tanh).collect();
        self.w2.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + self.b2
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, PrmError> {
        let p: ScorerParams = serde_json::from_str(text).map_err(|e| PrmError::Parse {
            line: e.line(),
            reason: e.to_string(),
        })?;
        if p.version != MODEL_FORMAT_VERSION {
            return Err(PrmError::BadVersion(p.version));
        }
        let f = p.features.dim();
        if p.w1.len() != f * p.hidden || p.b1.len() != p.hidden || p.w2.len() != p.hidden {
            return Err(PrmError::BadModel("weight shapes do not match the feature config".into()));
        }
        if !p.is_finite() {
            return Err(PrmError::BadModel("non-finite weight".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), PrmError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PrmError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn score(params: &ScorerParams, x: &str, y: &str) -> f64 {
    params.score_features(&featurize(x, y, &params.features))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `-log σ(s_p - s_n)`.
pub fn contrastive_loss(s_p: f64, s_n: f64) -> f64 {
    softplus(-(s_p - s_n))
}

/// `∂L/∂s_p = σ(s_p - s_n) - 1`; `∂L/∂s_n` is its negation.
pub fn contrastive_loss_grad(s_p: f64, s_n: f64) -> f64 {
    sigmoid(s_p - s_n) - 1.0
}

pub fn personal_reward(params: &ScorerParams, x: &str, y: &str) -> f64 {
    sigmoid(score(params, x, y))
}

/// Gradient of a scalar w.r.t. scorer weights. First-layer rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerGrad {
    pub hidden: usize,
    pub w1_rows: BTreeMap<usize, Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ScorerGrad {
    pub fn zeros(hidden: usize) -> Self {
        ScorerGrad {
            hidden,
            w1_rows: BTreeMap::new(),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Adds `coef · ∂score/∂params` at feature vector `f`.
    fn add_score_grad(&mut self, params: &ScorerParams, f: &PairFeatures, coef: f64) {
        let act: Vec<f64> = params.hidden_pre(f).into_iter().map(f64::tanh).collect();
        self.b2 += coef;
        // ∂s/∂pre_j = w2_j (1 - tanh²)
        let mut dpre = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            self.w2[j] += coef * act[j];
            dpre[j] = coef * params.w2[j] * (1.0 - act[j] * act[j]);
            self.b1[j] += dpre[j];
        }
        for &(i, x) in &f.entries {
            let row = self.w1_rows.entry(i).or_insert_with(|| vec![0.0; self.hidden]);
            for j in 0..self.hidden {
                row[j] += dpre[j] * x;
            }
        }
    }

    /// Flat coordinate matching [`ScorerParams::flat_get`].
    pub fn flat_get(&self, params: &ScorerParams, i: usize) -> f64 {
        let h = self.hidden;
        let (a, b, c) = (params.w1.len(), params.b1.len(), params.w2.len());
        match i {
            i if i < a => self.w1_rows.get(&(i / h)).map_or(0.0, |r| r[i % h]),
            i if i < a + b => self.b1[i - a],
            i if i < a + b + c => self.w2[i - a - b],
            _ => self.b2,
        }
    }

    fn norm_sq(&self) -> f64 {
        self.w1_rows.values().flatten().map(|g| g * g).sum::<f64>()
            + self.b1.iter().chain(&self.w2).map(|g| g * g).sum::<f64>()
            + self.b2 * self.b2
    }
}

/// Loss of one triplet and its gradient w.r.t. all scorer weights.
pub fn triplet_loss_and_grad(params: &ScorerParams, t: &PreferenceTriplet) -> (f64, ScorerGrad) {
    let fp = featurize(&t.query, &t.preferred, &params.features);
    let fn_ = featurize(&t.query, &t.rejected, &params.features);
    let (sp, sn) = (params.score_features(&fp), params.score_features(&fn_));
    let dsp = contrastive_loss_grad(sp, sn);
    let mut g = ScorerGrad::zeros(params.hidden);
    g.add_score_grad(params, &fp, dsp);
    g.add_score_grad(params, &fn_, -dsp);
    (contrastive_loss(sp, sn), g)
}

pub fn triplet_loss(params: &ScorerParams, t: &PreferenceTriplet) -> f64 {
    contrastive_loss(score(params, &t.query, &t.preferred), score(params, &t.query, &t.rejected))
}

/// Fraction of triplets with `s_p > s_n`.
pub fn pairwise_accuracy(params: &ScorerParams, triplets: &[PreferenceTriplet]) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let wins = triplets
        .iter()
        .filter(|t| score(params, &t.query, &t.preferred) > score(params, &t.query, &t.rejected))
        .count();
    wins as f64 / triplets.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    pub features: FeatureConfig,
}

impl Default for PrmTrainConfig {
    fn default() -> Self {
        PrmTrainConfig {
            epochs: 3,
            lr: 0.05,
            batch_size: 16,
            hidden: 16,
            seed: 0,
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub pairwise_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrmTrainingLog {
    /// Entry 0 is the untrained model.
    pub epochs: Vec<PrmEpochLog>,
}

impl PrmTrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,pairwise_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.pairwise_accuracy));
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.pairwise_accuracy)
    }
}

fn mean_loss(params: &ScorerParams, triplets: &[PreferenceTriplet]) -> f64 {
    let mut losses: Vec<f64> = triplets.iter().map(|t| triplet_loss(params, t)).collect();
    crate::metrics::stable_mean(&mut losses)
}

/// Mini-batch gradient descent on the mean contrastive loss.
pub fn train_prm(
    triplets: &[PreferenceTriplet],
    cfg: &PrmTrainConfig,
) -> Result<(ScorerParams, PrmTrainingLog), PrmError> {
    if triplets.is_empty() {
        return Err(PrmError::EmptyTriplets);
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(PrmError::BadLearningRate(cfg.lr));
    }
    let mut params = ScorerParams::init(cfg.features.clone(), cfg.hidden, cfg.seed);
    let mut log = PrmTrainingLog::default();
    log.epochs.push(PrmEpochLog {
        epoch: 0,
        mean_loss: mean_loss(&params, triplets),
        pairwise_accuracy: pairwise_accuracy(&params, triplets),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let h = cfg.hidden;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut total = ScorerGrad::zeros(h);
            let mut loss_sum = 0.0;
            for &i in batch {
                let (loss, g) = triplet_loss_and_grad(&params, &triplets[i]);
                loss_sum += loss;
                for (row, vals) in g.w1_rows {
                    let acc = total.w1_rows.entry(row).or_insert_with(|| vec![0.0; h]);
                    for j in 0..h {
                        acc[j] += vals[j];
                    }
                }
                for j in 0..h {
                    total.b1[j] += g.b1[j];
                    total.w2[j] += g.w2[j];
                }
                total.b2 += g.b2;
            }
            if !loss_sum.is_finite() || !total.norm_sq().is_finite() {
                return Err(PrmError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let step = cfg.lr / batch.len() as f64;
            for (row, vals) in &total.w1_rows {
                let w = &mut params.w1[row * h..(row + 1) * h];
                for j in 0..h {
                    w[j] -= step * vals[j];
                }
            }
            for j in 0..h {
                params.b1[j] -= step * total.b1[j];
                params.w2[j] -= step * total.w2[j];
            }
            params.b2 -= step * total.b2;
        }
        let epoch_loss = mean_loss(&params, triplets);
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(PrmError::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size.max(1)),
            });
        }
        log.epochs.push(PrmEpochLog {
            epoch,
            mean_loss: epoch_loss,
            pairwise_accuracy: pairwise_accuracy(&params, triplets),
        });
    }
    Ok((params, log))
}

/// Scores imported from an external encoder, keyed by text hashes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalScores {
    scores: HashMap<(String, String), f64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    x_hash: String,
    y_hash: String,
    score: f64,
}

impl ExternalScores {
    pub fn parse_jsonl(text: &str) -> Result<Self, PrmError> {
        let mut scores = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: ScoreLine = serde_json::from_str(line).map_err(|e| PrmError::Parse {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            scores.insert((l.x_hash, l.y_hash), l.score);
        }
        Ok(ExternalScores { scores })
    }

    pub fn load(path: &Path) -> Result<Self, PrmError> {
        Self::parse_jsonl(&fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, x: &str, y: &str, score: f64) {
        self.scores.insert((text_hash(x), text_hash(y)), score);
    }

    pub fn get(&self, x: &str, y: &str) -> Option<f64> {
        self.scores.get(&(text_hash(x), text_hash(y))).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Source of raw personalization scores.
#[derive(Debug, Clone)]
pub enum PersonalScorer {
    Model(ScorerParams),
    External(ExternalScores),
}

impl PersonalScorer {
    pub fn raw_score(&self, x: &str, y: &str) -> Result<f64, PrmError> {
        match self {
            PersonalScorer::Model(p) => Ok(score(p, x, y)),
            PersonalScorer::External(table) => table.get(x, y).ok_or(PrmError::MissingScore),
        }
    }

    /// `σ(raw score)`, in (0, 1).
    pub fn reward(&self, x: &str, y: &str) -> Result<f64, PrmError> {
        self.raw_score(x, y).map(sigmoid)
    }
}

/// Outcome of triplet construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TripletBuild {
    pub triplets: Vec<PreferenceTriplet>,
    pub degenerate: usize,
    pub failures: Vec<(String, String)>,
}

/// Builds (query, profile-conditioned answer, zero-shot answer) triplets over
/// the train split in dataset order.
///
/// `retrieve` supplies the context for the profile-conditioned generation.
/// Both generators return the raw completion; the parsed final answer is
/// what gets stored. Failed examples are recorded and skipped; the call only
/// fails when nothing could be generated at all.
pub fn build_triplets<R, P, Z>(
    ds: &Dataset,
    mut retrieve: R,
    mut gen_with_profile: P,
    mut gen_zero_shot: Z,
    limit: usize,
) -> Result<TripletBuild, PrmError>
where
    R: FnMut(&Example) -> Result<RetrievedContext, String>,
    P: FnMut(&Example, &RetrievedContext) -> Result<String, String>,
    Z: FnMut(&Example) -> Result<String, String>,
{
    if limit == 0 {
        return Err(PrmError::ZeroLimit);
    }
    let mut out = TripletBuild::default();
    let mut attempted = 0usize;
    for ex in ds.split(Split::Train) {
        if out.triplets.len() >= limit {
            break;
        }
        attempted += 1;
        let generated = retrieve(ex).and_then(|ctx| {
            let pos = gen_with_profile(ex, &ctx)?;
            let neg = gen_zero_shot(ex)?;
            Ok((pos, neg))
        });
        match generated {
            Ok((pos, neg)) => {
                let pos = parse_think(&pos).answer;
                let neg = parse_think(&neg).answer;
                match PreferenceTriplet::new(&ex.query, &pos, &neg) {
                    Some(t) => out.triplets.push(t),
                    None => out.degenerate += 1,
                }
            }
            Err(reason) => out.failures.push((ex.example_id.clone(), reason)),
        }
    }
    if attempted > 0 && out.failures.len() == attempted {
        return Err(PrmError::AllGenerationsFailed(attempted));
    }
    Ok(out)
}
