//! User profiles, query examples, loaders and splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("example {0} references an unknown user")]
    DanglingUser(String),
    #[error("duplicate example id {0}")]
    DuplicateExample(String),
    #[error("split boundaries must be strictly increasing, got ({0}, {1})")]
    BadBoundaries(i64, i64),
    #[error("invalid synthetic config: {0}")]
    BadSynthConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileItem {
    pub id: String,
    pub text: String,
    pub timestamp: i64,
    /// Any extra keys found on the record, kept verbatim.
    #[serde(flatten)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub profile: Vec<ProfileItem>,
}

impl UserRecord {
    /// Profile sorted by timestamp, ties broken by id.
    pub fn chronological(&self) -> Vec<&ProfileItem> {
        let mut items: Vec<&ProfileItem> = self.profile.iter().collect();
        items.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
        items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub user_id: String,
    pub query: String,
    pub reference: String,
    pub timestamp: i64,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    #[serde(rename = "lamp_json")]
    LampJson,
    #[serde(rename = "jsonl")]
    Jsonl,
}

impl FromStr for DatasetFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lamp_json" => Ok(DatasetFormat::LampJson),
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(format!("unknown dataset format '{other}' (lamp_json|jsonl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub users: BTreeMap<String, UserRecord>,
    pub examples: Vec<Example>,
    pub split_counts: BTreeMap<Split, usize>,
}

#[derive(Serialize, Deserialize)]
struct LampDocument {
    users: Vec<UserRecord>,
    examples: Vec<Example>,
}

/// Sidecar file holding the users of a `jsonl` dataset.
pub const USERS_SIDECAR: &str = "users.jsonl";

impl Dataset {
    /// Validates invariants, sorts examples by (timestamp, id) and recounts
    /// splits.
    pub fn new(users: Vec<UserRecord>, mut examples: Vec<Example>) -> Result<Self, CorpusError> {
        let mut by_id = BTreeMap::new();
        for user in users {
            let mut seen = BTreeSet::new();
            for item in &user.profile {
                if !seen.insert(item.id.as_str()) {
                    return Err(CorpusError::SchemaError(format!(
                        "user {}: duplicate profile item id {}",
                        user.user_id, item.id
                    )));
                }
                if item.text.trim().is_empty() {
                    return Err(CorpusError::SchemaError(format!(
                        "user {}: profile item {} has empty text",
                        user.user_id, item.id
                    )));
                }
                if item.timestamp < 0 {
                    return Err(CorpusError::SchemaError(format!(
                        "user {}: profile item {} has negative timestamp",
                        user.user_id, item.id
                    )));
                }
            }
            if by_id.contains_key(&user.user_id) {
                return Err(CorpusError::SchemaError(format!(
                    "duplicate user id {}",
                    user.user_id
                )));
            }
            by_id.insert(user.user_id.clone(), user);
        }

        let mut seen = BTreeSet::new();
        for ex in &examples {
            if !seen.insert(ex.example_id.as_str()) {
                return Err(CorpusError::DuplicateExample(ex.example_id.clone()));
            }
            if ex.query.trim().is_empty() || ex.reference.trim().is_empty() {
                return Err(CorpusError::SchemaError(format!(
                    "example {}: query and reference must be non-empty",
                    ex.example_id
                )));
            }
            if !by_id.contains_key(&ex.user_id) {
                return Err(CorpusError::DanglingUser(ex.example_id.clone()));
            }
        }

        examples.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.example_id.cmp(&b.example_id))
        });
        let mut ds = Dataset {
            users: by_id,
            examples,
            split_counts: BTreeMap::new(),
        };
        ds.recount();
        Ok(ds)
    }

    fn recount(&mut self) {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for ex in &self.examples {
            *counts.entry(ex.split).or_insert(0) += 1;
        }
        self.split_counts = counts;
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.get(user_id)
    }

    pub fn example(&self, example_id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.example_id == example_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Profile items of the example's user strictly older than the example,
    /// in profile order.
    pub fn visible_profile(&self, ex: &Example) -> Vec<ProfileItem> {
        self.users
            .get(&ex.user_id)
            .map(|u| {
                u.profile
                    .iter()
                    .filter(|p| p.timestamp < ex.timestamp)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn to_lamp_json(&self) -> String {
        let doc = LampDocument {
            users: self.users.values().cloned().collect(),
            examples: self.examples.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("dataset serializes")
    }

    /// Writes `examples` to `path` as JSONL and the users to the sidecar
    /// file in the same directory.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut ex_out = String::new();
        for ex in &self.examples {
            ex_out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            ex_out.push('\n');
        }
        let mut users_out = String::new();
        for u in self.users.values() {
            users_out.push_str(&serde_json::to_string(u).expect("user serializes"));
            users_out.push('\n');
        }
        fs::write(path, ex_out).map_err(io_err(path))?;
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, users_out).map_err(io_err(&sidecar))?;
        Ok(())
    }

    pub fn write(&self, path: &Path, format: DatasetFormat) -> Result<(), CorpusError> {
        match format {
            DatasetFormat::LampJson => fs::write(path, self.to_lamp_json()).map_err(io_err(path)),
            DatasetFormat::Jsonl => self.write_jsonl(path),
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.parent()
        .unwrap_or_else(|| Path::new("."))
        .join(USERS_SIDECAR)
}

/// Two-phase parse: syntax errors carry a line number, shape errors are
/// schema errors.
fn parse_value<T: serde::de::DeserializeOwned>(
    text: &str,
    line_offset: usize,
) -> Result<T, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CorpusError::ParseError {
            line: line_offset + e.line(),
            reason: e.to_string(),
        })?;
    serde_json::from_value(value).map_err(|e| CorpusError::SchemaError(e.to_string()))
}

pub fn parse_lamp_json(text: &str) -> Result<Dataset, CorpusError> {
    let doc: LampDocument = parse_value(text, 0)?;
    Dataset::new(doc.users, doc.examples)
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_value(line, idx)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match format {
        DatasetFormat::LampJson => parse_lamp_json(&text),
        DatasetFormat::Jsonl => {
            let examples: Vec<Example> = parse_jsonl(&text)?;
            let sidecar = sidecar_path(path);
            let users_text = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
            let users: Vec<UserRecord> = parse_jsonl(&users_text)?;
            Dataset::new(users, examples)
        }
    }
}

/// Non-fatal notes produced while splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitWarning {
    EmptySplit(Split),
}

/// Reassigns splits by timestamp: `< b1` train, `[b1, b2)` dev, `>= b2` test.
pub fn temporal_split(
    ds: &Dataset,
    boundaries: (i64, i64),
) -> Result<(Dataset, Vec<SplitWarning>), CorpusError> {
    let (b1, b2) = boundaries;
    if b1 >= b2 {
        return Err(CorpusError::BadBoundaries(b1, b2));
    }
    let mut out = ds.clone();
    for ex in &mut out.examples {
        ex.split = if ex.timestamp < b1 {
            Split::Train
        } else if ex.timestamp < b2 {
            Split::Dev
        } else {
            Split::Test
        };
    }
    out.recount();
    let warnings = out
        .split_counts
        .iter()
        .filter(|(_, &c)| c == 0)
        .map(|(&s, _)| SplitWarning::EmptySplit(s))
        .collect();
    Ok((out, warnings))
}

/// Word lists for the synthetic task. Topics are three-word phrases with
/// words unique across phrases.
pub const SYNTH_TOPICS: [[&str; 3]; 8] = [
    ["graph", "neural", "networks"],
    ["privacy", "federated", "learning"],
    ["sparse", "matrix", "solvers"],
    ["quantum", "error", "correction"],
    ["protein", "structure", "prediction"],
    ["robust", "speech", "recognition"],
    ["causal", "effect", "estimation"],
    ["image", "super", "resolution"],
];

pub const SYNTH_FILLER: [&str; 48] = [
    "study", "results", "method", "approach", "analysis", "system", "model", "data", "paper",
    "framework", "survey", "novel", "efficient", "scalable", "towards", "toward", "via", "using",
    "improved", "fast", "simple", "general", "adaptive", "dynamic", "online", "deep", "large",
    "small", "new", "unified", "hybrid", "optimal", "practical", "theory", "benchmark", "case",
    "evaluation", "design", "tools", "revisited", "insights", "limits", "experiments", "review",
    "notes", "report", "lessons", "perspective",
];

pub const DEFAULT_STYLE_VOCAB: [&str; 4] = ["formal", "playful", "terse", "vivid"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub style_vocab: Vec<String>,
    /// Fraction of profile items that carry another user's style token.
    pub noise: f64,
    pub items_per_user: usize,
    pub examples_per_user: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_users: usize, style_vocab: Vec<String>, noise: f64) -> Self {
        SynthConfig {
            seed,
            n_users,
            style_vocab,
            noise,
            items_per_user: 12,
            examples_per_user: 6,
        }
    }
}

/// Ground truth of a synthetic dataset: user id → hidden style token.
pub type StyleMap = BTreeMap<String, String>;

/// Builds a synthetic personalization dataset where every user writes with
/// one hidden style token.
///
/// Profile items read `<style> <topic phrase> <filler> <filler>` in shuffled
/// order; distractor items carry a different style token. References are
/// `<style> <topic phrase>` and queries are the bare topic phrase. The last
/// two examples of each user go to dev and test.
pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<(Dataset, StyleMap), CorpusError> {
    if cfg.n_users < 1 {
        return Err(CorpusError::BadSynthConfig("n_users must be >= 1".into()));
    }
    if cfg.style_vocab.is_empty() {
        return Err(CorpusError::BadSynthConfig("style_vocab must be non-empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(CorpusError::BadSynthConfig("noise must be in [0, 1]".into()));
    }
    if cfg.items_per_user < 1 || cfg.examples_per_user < 1 {
        return Err(CorpusError::BadSynthConfig(
            "items_per_user and examples_per_user must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.n_users.to_string().len();
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut examples = Vec::new();
    let mut styles = StyleMap::new();

    for u in 0..cfg.n_users {
        let user_id = format!("u{u:0width$}");
        let style_idx = rng.gen_range(0..cfg.style_vocab.len());
        let style = &cfg.style_vocab[style_idx];
        styles.insert(user_id.clone(), style.clone());

        let mut profile = Vec::with_capacity(cfg.items_per_user);
        for i in 0..cfg.items_per_user {
            let distractor = rng.gen_bool(cfg.noise);
            let mut words: Vec<&str> = Vec::with_capacity(6);
            if distractor {
                if cfg.style_vocab.len() > 1 {
                    let mut other = rng.gen_range(0..cfg.style_vocab.len() - 1);
                    if other >= style_idx {
                        other += 1;
                    }
                    words.push(&cfg.style_vocab[other]);
                }
            } else {
                words.push(style);
            }
            let topic = SYNTH_TOPICS.choose(&mut rng).expect("topics non-empty");
            words.extend(topic.iter());
            for _ in 0..2 {
                words.push(SYNTH_FILLER.choose(&mut rng).expect("filler non-empty"));
            }
            words.shuffle(&mut rng);
            let mut meta = BTreeMap::new();
            if distractor {
                meta.insert("distractor".to_string(), "true".to_string());
            }
            profile.push(ProfileItem {
                id: format!("{user_id}-p{i:03}"),
                text: words.join(" "),
                timestamp: 10 * (i as i64 + 1),
                meta,
            });
        }

        let base = 10 * (cfg.items_per_user as i64 + 1);
        for j in 0..cfg.examples_per_user {
            let topic = SYNTH_TOPICS.choose(&mut rng).expect("topics non-empty");
            let phrase = topic.join(" ");
            let split = match cfg.examples_per_user - j {
                1 if cfg.examples_per_user >= 3 => Split::Test,
                2 if cfg.examples_per_user >= 3 => Split::Dev,
                _ => Split::Train,
            };
            examples.push(Example {
                example_id: format!("{user_id}-e{j:03}"),
                user_id: user_id.clone(),
                query: phrase.clone(),
                reference: format!("{style} {phrase}"),
                timestamp: base + 10 * j as i64,
                split,
            });
        }
        users.push(UserRecord { user_id, profile });
    }
    Ok((Dataset::new(users, examples)?, styles))
}

pub fn synth_dataset(
    seed: u64,
    n_users: usize,
    style_vocab: &[&str],
    noise: f64,
) -> Result<Dataset, CorpusError> {
    let cfg = SynthConfig::new(
        seed,
        n_users,
        style_vocab.iter().map(|s| s.to_string()).collect(),
        noise,
    );
    synth_dataset_with(&cfg).map(|(ds, _)| ds)
}

/// Recovers the hidden style of every synthetic user from its references.
/// Works because every reference starts with the style token.
pub fn synth_styles(ds: &Dataset) -> StyleMap {
    let mut out = StyleMap::new();
    for ex in &ds.examples {
        if let Some(first) = ex.reference.split_whitespace().next() {
            out.entry(ex.user_id.clone()).or_insert_with(|| first.to_string());
        }
    }
    out
}
