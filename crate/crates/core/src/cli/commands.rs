//! Subcommand bodies. Each takes a validated [`RunConfig`], writes its
//! outputs under `output_dir` and returns what it wrote.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::{load_dataset, synth_dataset_with, temporal_split, Dataset, Example, Split, StyleMap, SynthConfig};
use crate::generate::{Generator, Request};
use crate::grpo::{train_loop, TrainEnv, TrainingLog};
use crate::hashing::derive_seed;
use crate::metrics::corpus_report;
use crate::policy::{build_prompt, DeskPolicy, PolicyError, PolicyHandle, PromptTemplate, Vocab, MAX_VOCAB};
use crate::prm::{build_triplets, read_triplets, train_prm as fit_prm, triplets_to_jsonl, ExternalScores, PersonalScorer, ScorerParams};
use crate::retrieval::{EmbeddingTable, RetrievedContext, Retriever, Strategy};
use crate::textproc::parse_think;

use super::config::{Backend, Retrieval, RunConfig};
use super::report::{self, ReportRow};
use super::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";
/// Written next to a synthetic dataset: user id → hidden style token.
pub const STYLES_SIDECAR: &str = "styles.json";
pub const SPLIT_REPORT_FILE: &str = "split_report.json";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const PAIRS_REPORT_FILE: &str = "pairs_report.json";
pub const PRM_FILE: &str = "prm.json";
pub const PRM_LOG_FILE: &str = "prm_log.csv";
pub const POLICY_FILE: &str = "policy.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const REPORT_ALIGNED: &str = "report_aligned.txt";

fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn load(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg
        .dataset
        .path
        .as_deref()
        .ok_or_else(|| CliError::Config("no dataset given (--dataset or dataset.path)".into()))?;
    load_dataset(path, cfg.dataset.format).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_styles(cfg: &RunConfig) -> Result<Option<StyleMap>, CliError> {
    let Some(dir) = cfg.dataset.path.as_deref().and_then(Path::parent) else {
        return Ok(None);
    };
    let path = dir.join(STYLES_SIDECAR);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(CliError::runtime)?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn retriever(cfg: &RunConfig, strategy: Strategy, k: usize) -> Result<Retriever, CliError> {
    let mut r = Retriever::new(strategy, k, derive_seed(cfg.seed, "retrieval"));
    if strategy == Strategy::Dense {
        if let Some(p) = &cfg.retriever.embeddings {
            r.table = Some(EmbeddingTable::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?);
        }
    }
    Ok(r)
}

fn template(cfg: &RunConfig) -> Result<PromptTemplate, CliError> {
    match &cfg.policy.template {
        Some(p) => PromptTemplate::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
        None => Ok(PromptTemplate::default()),
    }
}

fn empty_context(k: usize) -> RetrievedContext {
    RetrievedContext {
        items: Vec::new(),
        k_requested: k,
        strategy: Strategy::Bm25,
    }
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.persist()?;
    Ok(cfg.output_dir.clone())
}

/// Word vocabulary for a fresh desk policy: every profile text plus the
/// queries and references of the train split.
pub fn desk_vocab(ds: &Dataset) -> Result<Vocab, PolicyError> {
    let mut texts: Vec<&str> = Vec::new();
    for u in ds.users.values() {
        texts.extend(u.profile.iter().map(|p| p.text.as_str()));
    }
    for ex in ds.split(Split::Train) {
        texts.push(&ex.query);
        texts.push(&ex.reference);
    }
    Vocab::build(texts, MAX_VOCAB)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub users: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

pub fn ingest(cfg: &RunConfig) -> Result<SplitReport, CliError> {
    let (mut ds, styles) = match &cfg.synthetic {
        Some(s) => {
            let sc = SynthConfig {
                seed: derive_seed(cfg.seed, "synthetic"),
                n_users: s.users,
                style_vocab: s.styles.clone(),
                noise: s.noise,
                items_per_user: s.items_per_user,
                examples_per_user: s.examples_per_user,
            };
            let (ds, styles) = synth_dataset_with(&sc).map_err(CliError::config)?;
            (ds, Some(styles))
        }
        None => (load(cfg)?, None),
    };
    if let Some([b1, b2]) = cfg.dataset.split_boundaries {
        let (split, warnings) = temporal_split(&ds, (b1, b2)).map_err(CliError::config)?;
        for w in warnings {
            eprintln!("warning: {w:?}");
        }
        ds = split;
    }
    let dir = output_dir(cfg)?;
    let path = dir.join(DATASET_FILE);
    ds.write_jsonl(&path).map_err(CliError::runtime)?;
    if let Some(styles) = styles {
        write(&dir, STYLES_SIDECAR, serde_json::to_string_pretty(&styles).expect("styles serialize"))?;
    }
    let count = |s| ds.split_counts.get(&s).copied().unwrap_or(0);
    let report = SplitReport {
        users: ds.users.len(),
        train: count(Split::Train),
        dev: count(Split::Dev),
        test: count(Split::Test),
    };
    write(&dir, SPLIT_REPORT_FILE, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    println!(
        "wrote {}: {} users, train {}, dev {}, test {}",
        path.display(),
        report.users,
        report.train,
        report.dev,
        report.test
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairsReport {
    pub triplets: usize,
    pub degenerate: usize,
    pub failures: usize,
}

pub fn build_pairs(cfg: &RunConfig) -> Result<PairsReport, CliError> {
    let ds = load(cfg)?;
    let retriever = retriever(cfg, cfg.retriever.strategy, cfg.retriever.k)?;
    let template = template(cfg)?;
    let open = |src| Generator::open(src, &cfg.remote).map_err(CliError::config);
    let (gen_p, gen_z) = (open(&cfg.pairs.with_profile)?, open(&cfg.pairs.zero_shot)?);
    let max_tokens = cfg.policy.max_tokens;
    let no_context = empty_context(cfg.retriever.k);
    let generate = |g: &Generator, ex: &Example, ctx: &RetrievedContext| -> Result<String, String> {
        let prompt = build_prompt(&ex.query, ctx, &template).map_err(|e| e.to_string())?;
        let req = Request { example: ex, context: ctx, prompt };
        match g.generate_one(&req, max_tokens) {
            Ok(Some(text)) => Ok(text),
            Ok(None) => Err("no output for this example".into()),
            Err(e) => Err(e.to_string()),
        }
    };
    let build = build_triplets(
        &ds,
        |ex| retriever.retrieve(&ex.example_id, &ds.visible_profile(ex), &ex.query).map_err(|e| e.to_string()),
        |ex, ctx| generate(&gen_p, ex, ctx),
        |ex| generate(&gen_z, ex, &no_context),
        cfg.pairs.limit,
    )
    .map_err(CliError::runtime)?;
    for (id, reason) in build.failures.iter().take(5) {
        eprintln!("warning: generation failed for {id}: {reason}");
    }
    let dir = output_dir(cfg)?;
    write(&dir, TRIPLETS_FILE, triplets_to_jsonl(&build.triplets))?;
    let report = PairsReport {
        triplets: build.triplets.len(),
        degenerate: build.degenerate,
        failures: build.failures.len(),
    };
    write(&dir, PAIRS_REPORT_FILE, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    println!(
        "{} triplets, {} degenerate pairs, {} failed generations",
        report.triplets, report.degenerate, report.failures
    );
    if report.triplets == 0 {
        return Err(CliError::Runtime("no triplets produced".into()));
    }
    Ok(report)
}

pub fn train_prm(cfg: &RunConfig) -> Result<f64, CliError> {
    let path = cfg
        .prm
        .triplets
        .as_deref()
        .ok_or_else(|| CliError::Config("no triplet file given (--triplets or prm.triplets)".into()))?;
    let triplets = read_triplets(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if triplets.is_empty() {
        return Err(CliError::Config(format!("{} holds no triplets", path.display())));
    }
    let (params, log) = fit_prm(&triplets, &cfg.prm_train_config()).map_err(CliError::runtime)?;
    let dir = output_dir(cfg)?;
    params.save(&dir.join(PRM_FILE)).map_err(CliError::runtime)?;
    write(&dir, PRM_LOG_FILE, log.to_csv())?;
    let acc = log.final_accuracy();
    println!("pairwise accuracy {acc:.4} on {} triplets", triplets.len());
    Ok(acc)
}

fn scorer(cfg: &RunConfig) -> Result<Option<PersonalScorer>, CliError> {
    if !cfg.reward.personal {
        return Ok(None);
    }
    if let Some(p) = &cfg.prm.external_scores {
        let table = ExternalScores::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        return Ok(Some(PersonalScorer::External(table)));
    }
    if let Some(p) = &cfg.prm.path {
        let params = ScorerParams::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        return Ok(Some(PersonalScorer::Model(params)));
    }
    eprintln!("warning: no scorer configured; training without the personalization reward");
    Ok(None)
}

pub fn train_policy(cfg: &RunConfig) -> Result<TrainingLog, CliError> {
    if cfg.policy.backend == Backend::Remote {
        return Err(CliError::Config(
            "the remote backend is generation-only; training needs the desk backend".into(),
        ));
    }
    let ds = load(cfg)?;
    let retriever = retriever(cfg, cfg.retriever.strategy, cfg.retriever.k)?;
    let template = template(cfg)?;
    let scorer = scorer(cfg)?;
    let styles = load_styles(cfg)?;
    let desk = match &cfg.policy.checkpoint {
        Some(p) => DeskPolicy::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => DeskPolicy::new(desk_vocab(&ds).map_err(CliError::config)?, &cfg.desk_config()).map_err(CliError::config)?,
    };
    let mut policy = PolicyHandle::Desk(desk);
    let env = TrainEnv {
        ds: &ds,
        retriever: &retriever,
        template: &template,
        scorer: scorer.as_ref(),
        styles: styles.as_ref(),
    };
    let dir = output_dir(cfg)?;
    let checkpoint = dir.join(POLICY_FILE);
    let log = train_loop(&env, &mut policy, &cfg.train_loop_config(), Some(&checkpoint)).map_err(|e| {
        CliError::Runtime(format!("training aborted ({e}); checkpoint written to {}", checkpoint.display()))
    })?;
    policy.desk().map_err(CliError::runtime)?.save(&checkpoint).map_err(CliError::runtime)?;
    write(&dir, TRAINING_LOG_FILE, log.to_csv())?;
    let tail = |f: fn(&crate::grpo::TrainingStep) -> Option<f64>| log.tail_mean(100, f);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "{} steps; last 100: mean reward {}, think rate {}, personalization accuracy {}",
        log.rows.len(),
        fmt(tail(|r| Some(r.mean_reward))),
        fmt(tail(|r| Some(r.r_think_rate))),
        fmt(tail(|r| r.personalization_acc)),
    );
    Ok(log)
}

fn decorate(label: &str, strategy: Option<Retrieval>, k: Option<usize>) -> String {
    let mut parts = Vec::new();
    match strategy {
        Some(Retrieval::None) => parts.push("none".to_string()),
        Some(Retrieval::Using(s)) => parts.push(s.to_string()),
        None => {}
    }
    if let Some(k) = k {
        parts.push(format!("k={k}"));
    }
    if parts.is_empty() {
        label.to_string()
    } else {
        format!("{label} ({})", parts.join(", "))
    }
}

pub fn evaluate(cfg: &RunConfig) -> Result<Vec<ReportRow>, CliError> {
    let ev = &cfg.eval;
    if ev.methods.is_empty() && ev.fixtures.is_empty() {
        return Err(CliError::Config("nothing to evaluate: give --method or --fixture".into()));
    }
    let mut rows = Vec::new();
    if !ev.methods.is_empty() {
        let ds = load(cfg)?;
        let template = template(cfg)?;
        let examples: Vec<&Example> = ds.split(ev.split).collect();
        if examples.is_empty() {
            return Err(CliError::Config(format!("the {} split is empty", ev.split.as_str())));
        }
        let generators = ev
            .methods
            .iter()
            .map(|m| Generator::open(&m.source, &cfg.remote).map_err(CliError::config))
            .collect::<Result<Vec<_>, _>>()?;
        let grid = !ev.retrievers.is_empty();
        let strategies = if grid { ev.retrievers.clone() } else { vec![cfg.retriever.strategy] };
        let ks: Vec<usize> = match ev.sweep_k {
            Some(r) => r.values().collect(),
            None => vec![cfg.retriever.k],
        };
        let mut seen = BTreeSet::new();
        for &strategy in &strategies {
            for &k in &ks {
                for (mi, m) in ev.methods.iter().enumerate() {
                    let retrieval = m.retrieval.unwrap_or(Retrieval::Using(strategy));
                    let key = match retrieval {
                        Retrieval::None => (mi, None, k),
                        Retrieval::Using(s) => (mi, Some(s), k),
                    };
                    if !seen.insert(key) {
                        continue;
                    }
                    let label = decorate(
                        &m.label,
                        (grid || m.retrieval.is_some()).then_some(retrieval),
                        ev.sweep_k.map(|_| k),
                    );
                    let r = match retrieval {
                        Retrieval::None => None,
                        Retrieval::Using(s) => Some(retriever(cfg, s, k)?),
                    };
                    let contexts = examples
                        .iter()
                        .map(|ex| match &r {
                            None => Ok(empty_context(k)),
                            Some(r) => r
                                .retrieve(&ex.example_id, &ds.visible_profile(ex), &ex.query)
                                .map_err(CliError::runtime),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    let requests = examples
                        .iter()
                        .zip(&contexts)
                        .map(|(ex, ctx)| {
                            let prompt = build_prompt(&ex.query, ctx, &template).map_err(CliError::config)?;
                            Ok(Request { example: ex, context: ctx, prompt })
                        })
                        .collect::<Result<Vec<_>, CliError>>()?;
                    let outputs = generators[mi].generate_all(&requests, cfg.policy.max_tokens, ev.jobs);
                    let mut pairs = Vec::with_capacity(examples.len());
                    let mut missing = 0usize;
                    let mut first_error = None;
                    for (ex, out) in examples.iter().zip(outputs) {
                        match out {
                            Ok(Some(text)) => pairs.push((parse_think(&text).answer, ex.reference.clone())),
                            Ok(None) => missing += 1,
                            Err(e) => {
                                missing += 1;
                                first_error.get_or_insert(e.to_string());
                            }
                        }
                    }
                    if missing > 0 {
                        let why = first_error.map(|e| format!(" (first error: {e})")).unwrap_or_default();
                        eprintln!("warning: skipping '{label}': {missing} of {} generations missing{why}", examples.len());
                        continue;
                    }
                    let r = corpus_report(&pairs).map_err(CliError::runtime)?;
                    rows.push(ReportRow::new(label, &r));
                }
            }
        }
    }
    for f in &ev.fixtures {
        rows.extend(report::read_csv(f).map_err(CliError::Config)?);
    }
    if rows.is_empty() {
        return Err(CliError::Runtime("no report rows produced".into()));
    }
    let dir = output_dir(cfg)?;
    write(&dir, REPORT_CSV, report::to_csv(&rows))?;
    write(&dir, REPORT_JSON, report::to_json(&rows))?;
    write(&dir, REPORT_TABLE, report::to_ampersand_table(&rows))?;
    let aligned = report::to_aligned_table(&rows);
    write(&dir, REPORT_ALIGNED, &aligned)?;
    print!("{aligned}");
    Ok(rows)
}
