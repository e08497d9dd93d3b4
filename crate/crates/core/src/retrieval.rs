//! Profile retrieval: random, recency, BM25 and dense cosine.
//!
//! Every strategy returns at most `k` distinct items of the profile it was
//! given. Callers pass the *visible* profile of an example (see
//! [`crate::corpus::Dataset::visible_profile`]). Apart from random sampling,
//! results are ordered by score descending with ties broken by id ascending.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ProfileItem;
use crate::hashing::fnv1a64;
use crate::textproc::tokenize;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty profile")]
    EmptyProfile,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("query vector has dimension {got}, table has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("query vector is zero")]
    ZeroQuery,
    #[error("no embedding for id {0}")]
    MissingEmbedding(String),
    #[error("embedding for {0} is not finite")]
    NonFiniteEmbedding(String),
    #[error("embedding file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Recency,
    Bm25,
    Dense,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Random, Strategy::Recency, Strategy::Bm25, Strategy::Dense];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Recency => "recency",
            Strategy::Bm25 => "bm25",
            Strategy::Dense => "dense",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Strategy::Random),
            "recency" => Ok(Strategy::Recency),
            "bm25" => Ok(Strategy::Bm25),
            "dense" | "bge" => Ok(Strategy::Dense),
            other => Err(format!("unknown retriever '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: ProfileItem,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub items: Vec<ScoredItem>,
    pub k_requested: usize,
    pub strategy: Strategy,
}

impl RetrievedContext {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|s| s.item.text.as_str())
    }
}

fn by_score_then_id(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.item.id.cmp(&b.item.id))
}

fn top_k(mut scored: Vec<ScoredItem>, k: usize, strategy: Strategy) -> RetrievedContext {
    scored.sort_by(by_score_then_id);
    scored.truncate(k);
    RetrievedContext {
        items: scored,
        k_requested: k,
        strategy,
    }
}

fn check_k(k: usize) -> Result<(), RetrievalError> {
    if k == 0 {
        Err(RetrievalError::ZeroK)
    } else {
        Ok(())
    }
}

/// Uniform sample without replacement. Output keeps the sampled order.
pub fn retrieve_random(
    profile: &[ProfileItem],
    k: usize,
    seed: u64,
) -> Result<RetrievedContext, RetrievalError> {
    check_k(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // canonical order first so the sample does not depend on input order
    let mut items: Vec<&ProfileItem> = profile.iter().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let chosen: Vec<ScoredItem> = items
        .choose_multiple(&mut rng, k.min(items.len()))
        .map(|p| ScoredItem {
            item: (*p).clone(),
            score: 0.0,
        })
        .collect();
    Ok(RetrievedContext {
        items: chosen,
        k_requested: k,
        strategy: Strategy::Random,
    })
}

pub fn retrieve_recency(profile: &[ProfileItem], k: usize) -> Result<RetrievedContext, RetrievalError> {
    check_k(k)?;
    let scored = profile
        .iter()
        .map(|p| ScoredItem {
            item: p.clone(),
            score: p.timestamp as f64,
        })
        .collect();
    Ok(top_k(scored, k, Strategy::Recency))
}

/// Okapi BM25 index over one user's profile.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub doc_freq: HashMap<String, usize>,
    pub doc_len: BTreeMap<String, usize>,
    pub avg_len: f64,
    pub postings: HashMap<String, Vec<(String, usize)>>,
    pub k1: f64,
    pub b: f64,
    docs: Vec<ProfileItem>,
}

impl Bm25Index {
    pub fn build(profile: &[ProfileItem], k1: f64, b: f64) -> Result<Self, RetrievalError> {
        if profile.is_empty() {
            return Err(RetrievalError::EmptyProfile);
        }
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut doc_len = BTreeMap::new();
        let mut postings: HashMap<String, Vec<(String, usize)>> = HashMap::new();
        for item in profile {
            let toks = tokenize(&item.text);
            doc_len.insert(item.id.clone(), toks.len());
            let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
            for t in toks.as_slice() {
                *tf.entry(t.as_str()).or_insert(0) += 1;
            }
            for (term, count) in tf {
                *doc_freq.entry(term.to_string()).or_insert(0) += 1;
                postings
                    .entry(term.to_string())
                    .or_default()
                    .push((item.id.clone(), count));
            }
        }
        let avg_len = doc_len.values().sum::<usize>() as f64 / doc_len.len() as f64;
        Ok(Bm25Index {
            doc_freq,
            doc_len,
            avg_len,
            postings,
            k1,
            b,
            docs: profile.to_vec(),
        })
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, non-negative for all df.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Contribution of one term occurrence with frequency `tf` in a document
    /// of length `dl`.
    pub fn term_score(&self, term: &str, tf: usize, dl: usize) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let tf = tf as f64;
        let norm = self.k1 * (1.0 - self.b + self.b * dl as f64 / self.avg_len);
        self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)
    }

    /// Scores every document; each query token occurrence contributes once.
    pub fn scores(&self, query: &str) -> BTreeMap<String, f64> {
        let mut scores: BTreeMap<String, f64> =
            self.doc_len.keys().map(|id| (id.clone(), 0.0)).collect();
        for term in tokenize(query).as_slice() {
            let Some(posting) = self.postings.get(term) else {
                continue;
            };
            for (id, tf) in posting {
                let dl = self.doc_len[id];
                *scores.get_mut(id).expect("posting ids are indexed") += self.term_score(term, *tf, dl);
            }
        }
        scores
    }
}

pub fn build_bm25(profile: &[ProfileItem], k1: f64, b: f64) -> Result<Bm25Index, RetrievalError> {
    Bm25Index::build(profile, k1, b)
}

pub fn retrieve_bm25(index: &Bm25Index, query: &str, k: usize) -> Result<RetrievedContext, RetrievalError> {
    check_k(k)?;
    let scores = index.scores(query);
    let scored = index
        .docs
        .iter()
        .map(|d| ScoredItem {
            item: d.clone(),
            score: scores[&d.id],
        })
        .collect();
    Ok(top_k(scored, k, Strategy::Bm25))
}

/// Fixed-dimension vectors keyed by id (profile item ids and, for queries,
/// example ids).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<(), RetrievalError> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFiniteEmbedding(id));
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    /// Parses a JSONL file of `{"id": ..., "vector": [...]}` lines. The
    /// dimension is taken from the first line.
    pub fn parse_jsonl(text: &str) -> Result<Self, RetrievalError> {
        let mut table: Option<EmbeddingTable> = None;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine = serde_json::from_str(line).map_err(|e| RetrievalError::Parse {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(parsed.vector.len()));
            t.insert(parsed.id, parsed.vector)?;
        }
        Ok(table.unwrap_or_default())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::parse_jsonl(&fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.vectors {
            let line = EmbeddingLine {
                id: id.clone(),
                vector: v.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("embedding serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Top-k profile items by cosine similarity to `query_vec`. Items whose
/// stored vector has zero norm score -1.
pub fn retrieve_dense(
    table: &EmbeddingTable,
    profile: &[ProfileItem],
    query_vec: &[f64],
    k: usize,
) -> Result<RetrievedContext, RetrievalError> {
    check_k(k)?;
    if query_vec.len() != table.dim {
        return Err(RetrievalError::DimMismatch {
            expected: table.dim,
            got: query_vec.len(),
        });
    }
    if query_vec.iter().all(|&x| x == 0.0) {
        return Err(RetrievalError::ZeroQuery);
    }
    let mut scored = Vec::with_capacity(profile.len());
    for item in profile {
        let v = table
            .get(&item.id)
            .ok_or_else(|| RetrievalError::MissingEmbedding(item.id.clone()))?;
        scored.push(ScoredItem {
            item: item.clone(),
            score: cosine(query_vec, v).unwrap_or(-1.0),
        });
    }
    Ok(top_k(scored, k, Strategy::Dense))
}

/// Seeded feature-hashing embedder: signed token and bigram counts folded
/// into `dim` buckets. Stands in for a learned encoder when no external
/// vectors are supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 256, seed: 0x5eed }
    }
}

impl HashEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let toks = tokenize(text);
        let mut add = |key: &str, weight: f64| {
            let h = fnv1a64(self.seed, key.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign * weight;
        };
        for t in toks.as_slice() {
            add(t, 1.0);
        }
        for w in toks.as_slice().windows(2) {
            add(&format!("{} {}", w[0], w[1]), 0.5);
        }
        v
    }

    pub fn table_for<'a>(&self, items: impl IntoIterator<Item = &'a ProfileItem>) -> EmbeddingTable {
        let mut table = EmbeddingTable::new(self.dim);
        for item in items {
            table
                .insert(item.id.clone(), self.embed(&item.text))
                .expect("embedder output has the table dimension");
        }
        table
    }
}

/// Strategy plus its settings, applied to one example at a time.
///
/// Dense retrieval uses `table` when given, looking up item vectors by item
/// id and the query vector by example id; otherwise both sides come from
/// `embedder`. Random retrieval seeds each example from `(seed, example_id)`.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    pub embedder: HashEmbedder,
    pub table: Option<EmbeddingTable>,
}

impl Retriever {
    pub fn new(strategy: Strategy, k: usize, seed: u64) -> Self {
        Retriever {
            strategy,
            k,
            seed,
            embedder: HashEmbedder::default(),
            table: None,
        }
    }

    /// An empty visible profile yields an empty context.
    pub fn retrieve(
        &self,
        example_id: &str,
        profile: &[ProfileItem],
        query: &str,
    ) -> Result<RetrievedContext, RetrievalError> {
        check_k(self.k)?;
        if profile.is_empty() {
            return Ok(RetrievedContext {
                items: Vec::new(),
                k_requested: self.k,
                strategy: self.strategy,
            });
        }
        match self.strategy {
            Strategy::Random => retrieve_random(profile, self.k, fnv1a64(self.seed, example_id.as_bytes())),
            Strategy::Recency => retrieve_recency(profile, self.k),
            Strategy::Bm25 => retrieve_bm25(&build_bm25(profile, DEFAULT_K1, DEFAULT_B)?, query, self.k),
            Strategy::Dense => match &self.table {
                Some(table) => {
                    let q = table
                        .get(example_id)
                        .ok_or_else(|| RetrievalError::MissingEmbedding(example_id.to_string()))?;
                    retrieve_dense(table, profile, q, self.k)
                }
                None => {
                    let table = self.embedder.table_for(profile);
                    retrieve_dense(&table, profile, &self.embedder.embed(query), self.k)
                }
            },
        }
    }
}

/// One line of a retrieval dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDumpLine {
    pub example_id: String,
    pub strategy: Strategy,
    pub items: Vec<DumpItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpItem {
    pub id: String,
    pub score: f64,
}

impl RetrievalDumpLine {
    pub fn new(example_id: &str, ctx: &RetrievedContext) -> Self {
        RetrievalDumpLine {
            example_id: example_id.to_string(),
            strategy: ctx.strategy,
            items: ctx
                .items
                .iter()
                .map(|s| DumpItem {
                    id: s.item.id.clone(),
                    score: s.score,
                })
                .collect(),
        }
    }
}
