//! Named generation sources used by triplet construction and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::policy::{DeskPolicy, PolicyError, RemoteCfg, RemoteClient};
use crate::retrieval::RetrievedContext;
use crate::textproc::tokenize;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("unknown generation source '{0}' (heuristic|query-echo|file:PATH|desk:PATH|remote)")]
    UnknownSource(String),
    #[error("generation file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GenerationSource {
    /// Most frequent retrieved word that is not in the query, then the query.
    Heuristic,
    /// The query itself.
    QueryEcho,
    /// Precomputed outputs, JSONL of `{"example_id", "output"}`.
    File(PathBuf),
    /// Greedy decoding from a desk checkpoint.
    Desk(PathBuf),
    Remote,
}

impl FromStr for GenerationSource {
    type Err = GenerateError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heuristic" => Ok(GenerationSource::Heuristic),
            "query-echo" => Ok(GenerationSource::QueryEcho),
            "remote" => Ok(GenerationSource::Remote),
            _ => {
                if let Some(p) = s.strip_prefix("file:") {
                    Ok(GenerationSource::File(PathBuf::from(p)))
                } else if let Some(p) = s.strip_prefix("desk:") {
                    Ok(GenerationSource::Desk(PathBuf::from(p)))
                } else {
                    Err(GenerateError::UnknownSource(s.to_string()))
                }
            }
        }
    }
}

impl TryFrom<String> for GenerationSource {
    type Error = GenerateError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<GenerationSource> for String {
    fn from(s: GenerationSource) -> String {
        s.to_string()
    }
}

impl fmt::Display for GenerationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenerationSource::Heuristic => f.write_str("heuristic"),
            GenerationSource::QueryEcho => f.write_str("query-echo"),
            GenerationSource::File(p) => write!(f, "file:{}", p.display()),
            GenerationSource::Desk(p) => write!(f, "desk:{}", p.display()),
            GenerationSource::Remote => f.write_str("remote"),
        }
    }
}

/// Picks the most frequent non-query word of the retrieved items, ties in
/// alphabetical order, and prepends it to the query. Without context this is the
/// query alone.
pub fn heuristic_answer(query: &str, ctx: &RetrievedContext) -> String {
    let q = tokenize(query).tokens;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in ctx.texts() {
        for w in tokenize(text).tokens {
            if !q.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let best = counts.into_iter().fold(None::<(String, usize)>, |best, (w, c)| match best {
        Some((_, bc)) if bc >= c => best,
        _ => Some((w, c)),
    });
    match best {
        Some((w, _)) => format!("{w} {query}"),
        None => query.to_string(),
    }
}

#[derive(Deserialize)]
struct OutputLine {
    example_id: String,
    output: String,
}

pub fn read_outputs(path: &Path) -> Result<HashMap<String, String>, GenerateError> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: OutputLine = serde_json::from_str(line).map_err(|e| GenerateError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.insert(l.example_id, l.output);
    }
    Ok(out)
}

/// One generation request.
pub struct Request<'a> {
    pub example: &'a Example,
    pub context: &'a RetrievedContext,
    pub prompt: String,
}

/// A source opened and ready to answer requests.
pub enum Generator {
    Heuristic,
    QueryEcho,
    File(HashMap<String, String>),
    Desk(DeskPolicy),
    Remote(RemoteClient),
}

impl Generator {
    pub fn open(source: &GenerationSource, remote: &RemoteCfg) -> Result<Self, GenerateError> {
        Ok(match source {
            GenerationSource::Heuristic => Generator::Heuristic,
            GenerationSource::QueryEcho => Generator::QueryEcho,
            GenerationSource::File(p) => Generator::File(read_outputs(p)?),
            GenerationSource::Desk(p) => Generator::Desk(DeskPolicy::load(p)?),
            GenerationSource::Remote => Generator::Remote(RemoteClient::new(remote.clone())?),
        })
    }

    /// Raw outputs in request order. `Ok(None)` marks an example a file
    /// source has no output for. Local sources split the work over `jobs`
    /// threads; the remote client bounds its own concurrency.
    pub fn generate_all(
        &self,
        requests: &[Request<'_>],
        max_tokens: usize,
        jobs: usize,
    ) -> Vec<Result<Option<String>, GenerateError>> {
        if let Generator::Remote(client) = self {
            let prompts: Vec<String> = requests.iter().map(|r| r.prompt.clone()).collect();
            return client
                .complete_many(&prompts, max_tokens)
                .into_iter()
                .map(|r| r.map(Some).map_err(GenerateError::from))
                .collect();
        }
        let jobs = jobs.max(1).min(requests.len().max(1));
        let chunk = requests.len().div_ceil(jobs).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = requests
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| self.generate_one(r, max_tokens)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("generation worker panicked"))
                .collect()
        })
    }

    pub fn generate_one(&self, r: &Request<'_>, max_tokens: usize) -> Result<Option<String>, GenerateError> {
        match self {
            Generator::Heuristic => Ok(Some(heuristic_answer(&r.example.query, r.context))),
            Generator::QueryEcho => Ok(Some(r.example.query.clone())),
            Generator::File(map) => Ok(map.get(&r.example.example_id).cloned()),
            Generator::Desk(p) => Ok(Some(p.greedy(&r.prompt, max_tokens)?.text)),
            Generator::Remote(c) => Ok(Some(c.complete(&r.prompt, max_tokens)?)),
        }
    }
}
