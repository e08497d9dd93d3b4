//! Run configuration: one TOML file, overridable by flags, persisted next to
//! every command's outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetFormat, Split, SynthConfig, DEFAULT_STYLE_VOCAB};
use crate::generate::GenerationSource;
use crate::grpo::{GrpoConfig, GrpoMode, TrainLoopConfig, DEFAULT_SAMPLE_LIMIT};
use crate::hashing::{derive_seed, text_hash};
use crate::policy::{DeskConfig, RemoteCfg};
use crate::prm::{FeatureConfig, PrmTrainConfig, DEFAULT_TRIPLET_LIMIT};
use crate::retrieval::{Strategy, DEFAULT_K};
use crate::reward::{PersonalTarget, RewardWeights, DEFAULT_ALPHA, DEFAULT_BETA};

use super::CliError;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    /// Generate the synthetic dataset instead of reading `dataset.path`.
    pub synthetic: Option<SynthSection>,
    pub retriever: RetrieverSection,
    pub policy: PolicySection,
    pub remote: RemoteCfg,
    pub reward: RewardSection,
    pub grpo: GrpoSection,
    pub prm: PrmSection,
    pub pairs: PairsSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            synthetic: None,
            retriever: RetrieverSection::default(),
            policy: PolicySection::default(),
            remote: RemoteCfg::default(),
            reward: RewardSection::default(),
            grpo: GrpoSection::default(),
            prm: PrmSection::default(),
            pairs: PairsSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Timestamp boundaries `[b1, b2]` for a temporal re-split on ingest.
    pub split_boundaries: Option<[i64; 2]>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            format: DatasetFormat::Jsonl,
            split_boundaries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub users: usize,
    pub noise: f64,
    pub styles: Vec<String>,
    pub items_per_user: usize,
    pub examples_per_user: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::new(0, 50, DEFAULT_STYLE_VOCAB.iter().map(|s| s.to_string()).collect(), 0.1);
        SynthSection {
            users: c.n_users,
            noise: c.noise,
            styles: c.style_vocab,
            items_per_user: c.items_per_user,
            examples_per_user: c.examples_per_user,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub strategy: Strategy,
    pub k: usize,
    /// JSONL vectors for dense retrieval; the built-in hashed embedder is
    /// used when absent.
    pub embeddings: Option<PathBuf>,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        RetrieverSection {
            strategy: Strategy::Bm25,
            k: DEFAULT_K,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Desk,
    Remote,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Backend::Desk),
            "remote" => Ok(Backend::Remote),
            other => Err(format!("unknown backend '{other}' (desk|remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub backend: Backend,
    /// Desk checkpoint to start from instead of a fresh policy.
    pub checkpoint: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub dim: usize,
    pub window: usize,
    pub init_std: f64,
    /// Generation budget for evaluation and pair building.
    pub max_tokens: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        let d = DeskConfig::default();
        PolicySection {
            backend: Backend::Desk,
            checkpoint: None,
            template: None,
            dim: d.dim,
            window: d.window,
            init_std: d.init_std,
            max_tokens: 768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub alpha: f64,
    pub beta: f64,
    /// `false` trains without the personalization reward.
    pub personal: bool,
    pub personal_target: PersonalTarget,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            personal: true,
            personal_target: PersonalTarget::Answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub group_size: usize,
    pub max_completion: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub lr: f64,
    pub std_floor: f64,
    pub mode: GrpoMode,
    pub epochs: usize,
    pub steps: usize,
    pub sample_limit: usize,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        let g = GrpoConfig::default();
        let t = TrainLoopConfig::default();
        GrpoSection {
            group_size: g.group_size,
            max_completion: g.max_completion,
            clip_eps: g.clip_eps,
            kl_coef: g.kl_coef,
            lr: g.lr,
            std_floor: g.std_floor,
            mode: g.mode,
            epochs: g.epochs,
            steps: t.steps,
            sample_limit: DEFAULT_SAMPLE_LIMIT,
            warmup_steps: t.warmup_steps,
            warmup_lr: t.warmup_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmSection {
    /// Triplet file for `train-prm`.
    pub triplets: Option<PathBuf>,
    /// Trained scorer used as the personalization reward.
    pub path: Option<PathBuf>,
    /// Precomputed scores keyed by text hashes; overrides `path`.
    pub external_scores: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub hash_dim: usize,
}

impl Default for PrmSection {
    fn default() -> Self {
        let t = PrmTrainConfig::default();
        PrmSection {
            triplets: None,
            path: None,
            external_scores: None,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            hidden: t.hidden,
            hash_dim: t.features.hash_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsSection {
    pub with_profile: GenerationSource,
    pub zero_shot: GenerationSource,
    pub limit: usize,
}

impl Default for PairsSection {
    fn default() -> Self {
        PairsSection {
            with_profile: GenerationSource::Heuristic,
            zero_shot: GenerationSource::QueryEcho,
            limit: DEFAULT_TRIPLET_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub methods: Vec<MethodSpec>,
    /// Inclusive `[from, to]` range of k values.
    pub sweep_k: Option<KRange>,
    /// Retriever grid; empty means the configured retriever only.
    pub retrievers: Vec<Strategy>,
    /// Precomputed rows appended to the report.
    pub fixtures: Vec<PathBuf>,
    pub jobs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            methods: Vec::new(),
            sweep_k: None,
            retrievers: Vec::new(),
            fixtures: Vec::new(),
            jobs: 1,
        }
    }
}

/// `LABEL=SOURCE[@RETRIEVER]`. `@none` generates without retrieved context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSpec {
    pub label: String,
    pub source: GenerationSource,
    pub retrieval: Option<Retrieval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retrieval {
    None,
    Using(Strategy),
}

impl FromStr for MethodSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (label, rest) = s
            .split_once('=')
            .ok_or_else(|| format!("method '{s}' must look like LABEL=SOURCE[@RETRIEVER]"))?;
        if label.trim().is_empty() {
            return Err(format!("method '{s}' has an empty label"));
        }
        let (source, retrieval) = match rest.rsplit_once('@') {
            Some((src, "none")) => (src, Some(Retrieval::None)),
            Some((src, r)) => (src, Some(Retrieval::Using(r.parse()?))),
            None => (rest, None),
        };
        Ok(MethodSpec {
            label: label.trim().to_string(),
            source: source.parse().map_err(|e: crate::generate::GenerateError| e.to_string())?,
            retrieval,
        })
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.to_string()
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.label, self.source)?;
        match self.retrieval {
            Some(Retrieval::None) => f.write_str("@none"),
            Some(Retrieval::Using(s)) => write!(f, "@{s}"),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KRange {
    pub from: usize,
    pub to: usize,
}

impl KRange {
    pub fn values(self) -> impl Iterator<Item = usize> {
        self.from..=self.to
    }
}

impl FromStr for KRange {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("k range '{s}' must look like A..B with 1 <= A <= B");
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let from: usize = a.trim().parse().map_err(|_| bad())?;
        let to: usize = b.trim().parse().map_err(|_| bad())?;
        if from == 0 || from > to {
            return Err(bad());
        }
        Ok(KRange { from, to })
    }
}

impl TryFrom<String> for KRange {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<KRange> for String {
    fn from(r: KRange) -> String {
        format!("{}..{}", r.from, r.to)
    }
}

/// Parses `all` or a comma-separated list of retriever names.
pub fn parse_retrievers(s: &str) -> Result<Vec<Strategy>, String> {
    if s == "all" {
        return Ok(Strategy::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        text_hash(&self.to_toml())
    }

    /// Writes the resolved configuration, headed by its hash, into the
    /// output directory.
    pub fn persist(&self) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.output_dir).map_err(CliError::runtime)?;
        let path = self.output_dir.join(CONFIG_FILE);
        let body = format!("# config hash {}\n{}", self.hash(), self.to_toml());
        fs::write(&path, body).map_err(CliError::runtime)?;
        Ok(path)
    }

    /// Checks value ranges and that every referenced input file exists. A
    /// synthetic run generates its dataset, so its path is not checked.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} does not fit in a signed 64-bit integer", self.seed));
        }
        if let Some([b1, b2]) = self.dataset.split_boundaries {
            if b1 >= b2 {
                return bad(format!("split boundaries must increase, got {b1},{b2}"));
            }
        }
        if let Some(s) = &self.synthetic {
            if s.users == 0 || s.styles.is_empty() || !(0.0..=1.0).contains(&s.noise) {
                return bad("synthetic needs users >= 1, at least one style and noise in [0, 1]".into());
            }
        }
        if self.retriever.k == 0 {
            return bad("retriever.k must be >= 1".into());
        }
        if self.policy.max_tokens == 0 || self.policy.dim == 0 {
            return bad("policy.max_tokens and policy.dim must be >= 1".into());
        }
        if !(self.policy.init_std.is_finite() && self.policy.init_std >= 0.0) {
            return bad("policy.init_std must be finite and >= 0".into());
        }
        self.reward_weights().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.grpo_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.grpo.steps == 0 {
            return bad("grpo.steps must be >= 1".into());
        }
        if self.pairs.limit == 0 {
            return bad("pairs.limit must be >= 1".into());
        }
        if self.eval.jobs == 0 {
            return bad("eval.jobs must be >= 1".into());
        }
        self.remote.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let mut inputs: Vec<&Path> = Vec::new();
        if self.synthetic.is_none() {
            inputs.extend(self.dataset.path.as_deref());
        }
        inputs.extend(self.retriever.embeddings.as_deref());
        inputs.extend(self.policy.checkpoint.as_deref());
        inputs.extend(self.policy.template.as_deref());
        inputs.extend(self.prm.triplets.as_deref());
        inputs.extend(self.prm.path.as_deref());
        inputs.extend(self.prm.external_scores.as_deref());
        inputs.extend(self.eval.fixtures.iter().map(PathBuf::as_path));
        for m in &self.eval.methods {
            if let GenerationSource::File(p) | GenerationSource::Desk(p) = &m.source {
                inputs.push(p);
            }
        }
        for src in [&self.pairs.with_profile, &self.pairs.zero_shot] {
            if let GenerationSource::File(p) | GenerationSource::Desk(p) = src {
                inputs.push(p);
            }
        }
        for p in inputs {
            if !p.exists() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            alpha: self.reward.alpha,
            beta: self.reward.beta,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        let g = &self.grpo;
        GrpoConfig {
            group_size: g.group_size,
            max_completion: g.max_completion,
            clip_eps: g.clip_eps,
            kl_coef: g.kl_coef,
            lr: g.lr,
            std_floor: g.std_floor,
            mode: g.mode,
            epochs: g.epochs,
        }
    }

    pub fn train_loop_config(&self) -> TrainLoopConfig {
        TrainLoopConfig {
            grpo: self.grpo_config(),
            steps: self.grpo.steps,
            seed: self.seed,
            sample_limit: self.grpo.sample_limit,
            weights: self.reward_weights(),
            personal_target: self.reward.personal_target,
            warmup_steps: self.grpo.warmup_steps,
            warmup_lr: self.grpo.warmup_lr,
        }
    }

    pub fn desk_config(&self) -> DeskConfig {
        DeskConfig {
            dim: self.policy.dim,
            window: self.policy.window,
            init_std: self.policy.init_std,
            seed: derive_seed(self.seed, "desk-init"),
        }
    }

    pub fn prm_train_config(&self) -> PrmTrainConfig {
        PrmTrainConfig {
            epochs: self.prm.epochs,
            lr: self.prm.lr,
            batch_size: self.prm.batch_size,
            hidden: self.prm.hidden,
            seed: derive_seed(self.seed, "prm-init"),
            features: FeatureConfig {
                hash_dim: self.prm.hash_dim,
                ..FeatureConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.retriever.k, 5);
        assert_eq!(cfg.reward.alpha, 0.1);
        assert_eq!(cfg.reward.beta, 0.1);
        assert_eq!(cfg.pairs.limit, 5000);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[grpo]\nlr = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.grpo.lr, 0.5);
        assert_eq!(cfg.grpo.group_size, 4);
        assert!(RunConfig::from_toml_str("[grpo]\nlearning_rate = 0.5\n").is_err());
        assert!(RunConfig::from_toml_str("[retriever]\nstrategy = \"tfidf\"\n").is_err());
    }

    #[test]
    fn validation_rejects_missing_inputs_and_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.dataset.path = Some(PathBuf::from("/nonexistent/data.jsonl"));
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.retriever.k = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.seed = u64::MAX;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_specs_parse_and_print() {
        for s in ["BM25=heuristic", "Zero-shot=query-echo@none", "PrLM=desk:run/policy.json@bm25", "X=file:a=b.jsonl"] {
            assert_eq!(s.parse::<MethodSpec>().unwrap().to_string(), s);
        }
        let m: MethodSpec = "Dense=remote@bge".parse().unwrap();
        assert_eq!(m.retrieval, Some(Retrieval::Using(Strategy::Dense)));
        assert!("noequals".parse::<MethodSpec>().is_err());
        assert!("=heuristic".parse::<MethodSpec>().is_err());
        assert!("A=heuristic@tfidf".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn k_ranges_are_inclusive() {
        let r: KRange = "1..10".parse().unwrap();
        assert_eq!(r.values().collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        assert!("0..3".parse::<KRange>().is_err());
        assert!("5..2".parse::<KRange>().is_err());
        assert!("x".parse::<KRange>().is_err());
        assert_eq!(parse_retrievers("all").unwrap().len(), 4);
        assert_eq!(parse_retrievers("bm25,recency").unwrap(), vec![Strategy::Bm25, Strategy::Recency]);
    }

    #[test]
    fn persisted_config_carries_its_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.output_dir = dir.path().to_path_buf();
        let path = cfg.persist().unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(text.starts_with(&format!("# config hash {}\n", cfg.hash())));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
