//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; the process fails if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use prlm_core::cli::report::read_csv;
use prlm_core::corpus::ProfileItem;
use prlm_core::grpo::{group_advantages, policy_gradient_step, GroupSample, GrpoConfig, GrpoMode};
use prlm_core::metrics::{bleu, rouge_l, rouge_n};
use prlm_core::policy::{DeskConfig, DeskPolicy, PolicyHandle, Vocab};
use prlm_core::prm::{
    contrastive_loss, score, train_prm, triplet_loss, triplet_loss_and_grad, FeatureConfig, PreferenceTriplet,
    PrmTrainConfig, ScorerParams,
};
use prlm_core::retrieval::{retrieve_bm25, Bm25Index};
use prlm_core::reward::{correctness_reward, RewardBreakdown, RewardWeights};
use prlm_core::textproc::parse_think;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn synthetic_config() -> PathBuf {
    manifest_dir().join("../../configs/synthetic.toml")
}

fn prlm(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["prlm"];
    argv.extend_from_slice(args);
    match prlm_core::cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`prlm {}` exited with {code}", args.join(" "))),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// ---------------------------------------------------------------- metrics

fn count_occurrences(seq: &[&str], gram: &[&str]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

/// Clipped n-gram matches and candidate n-gram total by exhaustive scanning.
fn oracle_matches(cand: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut distinct: Vec<&[&str]> = Vec::new();
    for i in 0..=cand.len() - n {
        let g = &cand[i..i + n];
        if !distinct.contains(&g) {
            distinct.push(g);
        }
    }
    let matches = distinct
        .iter()
        .map(|g| count_occurrences(cand, g).min(count_occurrences(reference, g)))
        .sum();
    (matches, cand.len() - n + 1)
}

fn oracle_f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (cand_total + ref_total) as f64
}

fn oracle_rouge_n(cand: &[&str], reference: &[&str], n: usize) -> f64 {
    let (m, c) = oracle_matches(cand, reference, n);
    let r = reference.len().saturating_sub(n - 1);
    oracle_f1(m, c, r)
}

fn lcs_rec(a: &[&str], b: &[&str], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = if a[0] == b[0] {
        1 + lcs_rec(&a[1..], &b[1..], memo)
    } else {
        lcs_rec(&a[1..], b, memo).max(lcs_rec(a, &b[1..], memo))
    };
    memo.insert(key, v);
    v
}

fn oracle_rouge_l(cand: &[&str], reference: &[&str]) -> f64 {
    let lcs = lcs_rec(cand, reference, &mut HashMap::new());
    oracle_f1(lcs, cand.len(), reference.len())
}

fn oracle_bleu(cand: &[&str], reference: &[&str]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4 {
        let (m, t) = oracle_matches(cand, reference, n);
        let p = match (m, t) {
            (_, 0) => return 0.0,
            (0, t) => 1.0 / (t as f64 + 1.0),
            (m, t) => m as f64 / t as f64,
        };
        product *= p;
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    100.0 * bp * product.powf(0.25)
}

fn criterion_metrics() -> Outcome {
    let start = Instant::now();
    let words = ["a", "b", "c", "d", "e", "f"];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let pairs = 500;
    for i in 0..pairs {
        let vocab = &words[..rng.gen_range(1..=words.len())];
        let draw = |rng: &mut ChaCha8Rng| -> Vec<&str> {
            let len = rng.gen_range(1..=12);
            (0..len).map(|_| *vocab.choose(rng).unwrap()).collect()
        };
        let cand = draw(&mut rng);
        let reference = draw(&mut rng);
        let (cs, rs) = (cand.join(" "), reference.join(" "));
        let got = [
            rouge_n(&cs, &rs, 1).unwrap().f1,
            rouge_n(&cs, &rs, 2).unwrap().f1,
            rouge_l(&cs, &rs).f1,
            bleu(&cs, &rs).value,
        ];
        let want = [
            oracle_rouge_n(&cand, &reference, 1),
            oracle_rouge_n(&cand, &reference, 2),
            oracle_rouge_l(&cand, &reference),
            oracle_bleu(&cand, &reference),
        ];
        for (name, (g, w)) in ["rouge1", "rouge2", "rougeL", "bleu"].iter().zip(got.iter().zip(want)) {
            let err = (g - w).abs();
            worst = worst.max(err);
            check(err <= 1e-9, || format!("pair {i} {name}: {g} vs oracle {w} for '{cs}' / '{rs}'"))?;
        }
    }
    let r1 = rouge_n("the cat sat", "the cat ran", 1).unwrap().f1;
    check(r1 == 2.0 / 3.0, || format!("fixture rouge-1 f1 {r1} != 2/3"))?;
    let rc = correctness_reward("the cat sat", "the cat ran").unwrap();
    check(rc == 11.0 / 6.0, || format!("fixture r_correct {rc} != 11/6"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{pairs} random pairs, max abs error {worst:.1e}, fixtures exact, {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- scorer

fn random_text(rng: &mut ChaCha8Rng, pool: &[&str], len: usize) -> String {
    (0..len).map(|_| *pool.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

const FILLER: [&str; 24] = [
    "river", "stone", "cloud", "paper", "window", "garden", "engine", "market", "signal", "orbit", "canvas", "ladder",
    "copper", "meadow", "harbor", "lantern", "pocket", "velvet", "timber", "glacier", "anchor", "saddle", "thunder",
    "pillow",
];
const MARKERS: [&str; 4] = ["formal", "playful", "terse", "vivid"];

/// The preferred response carries a style marker; the rejected one never does.
fn separable_triplet(rng: &mut ChaCha8Rng) -> PreferenceTriplet {
    let query = random_text(rng, &FILLER, 3);
    let len = rng.gen_range(2..=4);
    let body = random_text(rng, &FILLER, len);
    let marker = MARKERS.choose(rng).unwrap();
    let preferred = format!("{marker} {body}");
    let len = rng.gen_range(3..=5);
    let rejected = random_text(rng, &FILLER, len);
    PreferenceTriplet::new(&query, &preferred, &rejected).expect("non-empty triplet")
}

fn criterion_scorer() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let features = FeatureConfig::default();

    let zero = ScorerParams::zeros(features.clone(), 16);
    let t = separable_triplet(&mut rng);
    let l0 = triplet_loss(&zero, &t);
    check((l0 - std::f64::consts::LN_2).abs() <= 1e-12, || format!("zero-init loss {l0}"))?;
    check(contrastive_loss(0.0, 0.0) == std::f64::consts::LN_2, || "loss(0, 0) != ln 2".into())?;

    let mut params = ScorerParams::init(features, 16, 17);
    for j in 0..params.hidden {
        params.w2[j] = rng.gen_range(-1.0..1.0);
        params.b1[j] = rng.gen_range(-0.5..0.5);
    }
    params.b2 = 0.3;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let t = separable_triplet(&mut rng);
        let (_, grad) = triplet_loss_and_grad(&params, &t);
        // coordinates drawn from the active first-layer rows and the dense tail
        let mut active: Vec<usize> = grad
            .w1_rows
            .keys()
            .flat_map(|&row| (0..params.hidden).map(move |j| row * params.hidden + j))
            .collect();
        active.extend(params.w1.len()..params.num_params());
        for &i in active.choose_multiple(&mut rng, 10) {
            let analytic = grad.flat_get(&params, i);
            let orig = params.flat_get(i);
            params.flat_set(i, orig + h);
            let up = triplet_loss(&params, &t);
            params.flat_set(i, orig - h);
            let down = triplet_loss(&params, &t);
            params.flat_set(i, orig);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            check(rel < 1e-5, || format!("coordinate {i}: analytic {analytic} vs numeric {numeric}"))?;
        }
    }

    let train: Vec<PreferenceTriplet> = (0..300).map(|_| separable_triplet(&mut rng)).collect();
    let held_out: Vec<PreferenceTriplet> = (0..200).map(|_| separable_triplet(&mut rng)).collect();
    let cfg = PrmTrainConfig {
        epochs: 5,
        lr: 0.5,
        seed: 5,
        ..PrmTrainConfig::default()
    };
    let (trained, _) = train_prm(&train, &cfg).map_err(|e| e.to_string())?;
    let wins = held_out
        .iter()
        .filter(|t| score(&trained, &t.query, &t.preferred) > score(&trained, &t.query, &t.rejected))
        .count();
    let acc = wins as f64 / held_out.len() as f64;
    check(acc >= 0.95, || format!("held-out accuracy {acc}"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "loss at zero init ln 2, max gradient relative error {worst:.1e}, held-out accuracy {acc:.3}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- bm25

fn criterion_bm25() -> Outcome {
    let terms = ["t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9"];
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let corpora = 100;
    for c in 0..corpora {
        let vocab = &terms[..rng.gen_range(1..=terms.len())];
        let n_docs = rng.gen_range(1..=8);
        let docs: Vec<Vec<&str>> = (0..n_docs)
            .map(|_| (0..rng.gen_range(1..=10)).map(|_| *vocab.choose(&mut rng).unwrap()).collect())
            .collect();
        let profile: Vec<ProfileItem> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| ProfileItem {
                id: format!("d{i}"),
                text: d.join(" "),
                timestamp: i as i64,
                meta: Default::default(),
            })
            .collect();
        let (k1, b) = (rng.gen_range(0.5..2.0), rng.gen_range(0.0..=1.0));
        let index = Bm25Index::build(&profile, k1, b).map_err(|e| e.to_string())?;
        let query: Vec<&str> = (0..rng.gen_range(1..=4)).map(|_| *terms.choose(&mut rng).unwrap()).collect();

        let n = n_docs as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let idf = |t: &str| {
            let df = docs.iter().filter(|d| d.contains(&t)).count() as f64;
            ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
        };
        let mut oracle: Vec<(f64, String)> = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            let mut total = 0.0;
            for t in &query {
                let tf = d.iter().filter(|w| *w == t).count();
                let direct = if tf == 0 {
                    0.0
                } else {
                    let tf = tf as f64;
                    idf(t) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avg))
                };
                let got = index.term_score(t, tf, d.len());
                check((got - direct).abs() <= 1e-12, || format!("corpus {c}: term score {got} vs {direct}"))?;
                total += direct;
            }
            oracle.push((total, format!("d{i}")));
        }
        for t in vocab {
            let (got, want) = (index.idf(t), idf(t));
            check((got - want).abs() <= 1e-12, || format!("corpus {c}: idf({t}) {got} vs {want}"))?;
        }
        oracle.sort_by(|a, b| {
            if (a.0 - b.0).abs() <= 1e-12 {
                a.1.cmp(&b.1)
            } else {
                b.0.total_cmp(&a.0)
            }
        });
        for k in 1..=n_docs {
            let got: Vec<String> = retrieve_bm25(&index, &query.join(" "), k)
                .map_err(|e| e.to_string())?
                .items
                .into_iter()
                .map(|s| s.item.id)
                .collect();
            let want: Vec<String> = oracle.iter().take(k).map(|(_, id)| id.clone()).collect();
            check(got == want, || format!("corpus {c} k={k}: {got:?} vs brute force {want:?}"))?;
        }
    }
    Ok(format!("{corpora} random corpora, every k, rankings identical, idf and term scores within 1e-12"))
}

// ---------------------------------------------------------------- grpo

fn pop_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn zero_variance_update_is_identity(rng: &mut ChaCha8Rng, g: usize, mode: GrpoMode) -> Result<(), String> {
    let vocab = Vocab::build(["alpha beta gamma delta", "epsilon zeta"], 64).map_err(|e| e.to_string())?;
    let desk = DeskPolicy::new(vocab, &DeskConfig { seed: rng.gen(), ..DeskConfig::default() }).map_err(|e| e.to_string())?;
    let before: Vec<u64> = desk.params.iter().map(|p| p.to_bits()).collect();
    let mut policy = PolicyHandle::Desk(desk);
    let prompt = "alpha beta";
    let samples = policy.sample(prompt, g, 6, rng.gen()).map_err(|e| e.to_string())?;
    let w = RewardWeights::new(0.1, 0.1).map_err(|e| e.to_string())?;
    let reward = RewardBreakdown::compose(rng.gen_range(0.0..3.0), 1, None, &w);
    let totals = vec![reward.total; g];
    let group = GroupSample {
        input_key: "zero-variance".into(),
        prompt: prompt.into(),
        outputs: samples.iter().map(|s| parse_think(&s.text)).collect(),
        tokens: samples.iter().map(|s| s.tokens.clone().unwrap()).collect(),
        token_logprobs: samples.iter().map(|s| s.logprobs.clone().unwrap()).collect(),
        ref_logprobs: None,
        rewards: vec![reward; g],
        advantages: group_advantages(&totals, 1e-8).map_err(|e| e.to_string())?,
    };
    let cfg = GrpoConfig {
        group_size: g,
        lr: 0.5,
        mode,
        ..GrpoConfig::default()
    };
    policy_gradient_step(&group, &mut policy, &cfg).map_err(|e| e.to_string())?;
    let after: Vec<u64> = policy.desk().unwrap().params.iter().map(|p| p.to_bits()).collect();
    check(before == after, || format!("zero-variance group of size {g} moved the parameters"))
}

fn criterion_grpo() -> Outcome {
    let floor = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let groups = 1000;
    let mut std_checked = 0;
    for i in 0..groups {
        let g = rng.gen_range(2..=8);
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..3.2)).collect();
        let adv = group_advantages(&rewards, floor).map_err(|e| e.to_string())?;
        let (mean_a, std_a) = pop_stats(&adv);
        check(mean_a.abs() <= 1e-12, || format!("group {i}: advantage mean {mean_a}"))?;
        let (_, std_r) = pop_stats(&rewards);
        // std/(std + floor) stays within 1e-6 of one once std ≥ floor·1e6
        if std_r >= floor * 1e6 {
            std_checked += 1;
            check((std_a - 1.0).abs() <= 1e-6, || format!("group {i}: advantage std {std_a}"))?;
        }
        let shift = rng.gen_range(-50.0..50.0);
        let scale = rng.gen_range(0.1..10.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        for (name, other, spread) in [("shift", &shifted, std_r), ("scale", &scaled, std_r * scale)] {
            let a2 = group_advantages(other, floor).map_err(|e| e.to_string())?;
            if std_r < floor || spread < floor {
                continue;
            }
            for (x, y) in adv.iter().zip(&a2) {
                // the floor perturbs each advantage by at most |A|·floor/std
                let bound = x.abs() * floor / std_r.min(spread) + 1e-9;
                check((x - y).abs() <= bound, || format!("group {i}: {name} changed {x} to {y}"))?;
            }
        }
    }
    let mut zero = 0;
    for g in 2..=8 {
        for mode in [GrpoMode::OnPolicySingleStep, GrpoMode::ClippedMultiEpoch] {
            zero_variance_update_is_identity(&mut rng, g, mode)?;
            zero += 1;
        }
    }
    Ok(format!(
        "{groups} groups: mean zero, unit std on {std_checked} spread groups, shift and scale invariant; {zero} zero-variance updates left parameters bit-identical"
    ))
}

// ---------------------------------------------------------------- end to end

struct Pipeline {
    root: PathBuf,
    config: PathBuf,
}

impl Pipeline {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn dataset(&self) -> PathBuf {
        self.dir("data").join("dataset.jsonl")
    }

    fn commands(&self) -> Vec<Vec<String>> {
        let cfg = s(&self.config).to_string();
        let ds = s(&self.dataset()).to_string();
        let out = |n: &str| s(&self.dir(n)).to_string();
        let line = |parts: &[&str]| parts.iter().map(|p| p.to_string()).collect::<Vec<_>>();
        let triplets = s(&self.dir("pairs").join("triplets.jsonl")).to_string();
        let prm = s(&self.dir("prm").join("prm.json")).to_string();
        vec![
            line(&["ingest", "--config", &cfg, "--out", &out("data")]),
            line(&["build-pairs", "--config", &cfg, "--dataset", &ds, "--out", &out("pairs")]),
            line(&["train-prm", "--config", &cfg, "--triplets", &triplets, "--out", &out("prm")]),
            line(&["train-policy", "--config", &cfg, "--dataset", &ds, "--prm", &prm, "--out", &out("full")]),
            line(&["train-policy", "--config", &cfg, "--dataset", &ds, "--no-personal-reward", "--out", &out("ablation")]),
            line(&["evaluate", "--config", &cfg, "--dataset", &ds, "--out", &out("eval")]),
            line(&[
                "evaluate",
                "--config",
                &cfg,
                "--dataset",
                &ds,
                "--method",
                "Heuristic=heuristic",
                "--sweep-k",
                "1..10",
                "--out",
                &out("sweep"),
            ]),
        ]
    }

    fn run_all(&self) -> Result<(), String> {
        for cmd in self.commands() {
            let args: Vec<&str> = cmd.iter().map(String::as_str).collect();
            prlm(&args)?;
        }
        Ok(())
    }
}

/// Per-step columns of a training log.
fn log_columns(path: &Path) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let (mut think, mut acc) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        think.push(rec[2].parse::<f64>().map_err(|e| e.to_string())?);
        acc.push(rec[4].parse::<f64>().map_err(|e| e.to_string())?);
    }
    Ok((think, acc))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_end_to_end(p: &Pipeline, elapsed: Duration) -> Outcome {
    let styles = 4.0;
    let (think, acc) = log_columns(&p.dir("full").join("training_log.csv"))?;
    let (_, abl_acc) = log_columns(&p.dir("ablation").join("training_log.csv"))?;
    check(think.len() == 2000, || format!("{} logged steps", think.len()))?;
    let baseline = mean(&acc[..50]);
    let end_think = mean(&think[think.len() - 100..]);
    let end_acc = mean(&acc[acc.len() - 100..]);
    let end_abl = mean(&abl_acc[abl_acc.len() - 100..]);
    let summary = format!(
        "think rate {end_think:.3}, personalization {baseline:.3} -> {end_acc:.3}, ablation {end_abl:.3}, {:.1}s",
        elapsed.as_secs_f64()
    );
    check(elapsed < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    check(end_think >= 0.95, || format!("(a) fails: {summary}"))?;
    check(baseline <= 1.0 / styles + 0.1 && end_acc >= 0.8, || format!("(b) fails: {summary}"))?;
    check(end_abl < end_acc, || format!("(c) fails: {summary}"))?;
    Ok(summary)
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

fn criterion_determinism(p: &Pipeline) -> Outcome {
    let first = snapshot(&p.root);
    p.run_all()?;
    let second = snapshot(&p.root);
    check(first.keys().eq(second.keys()), || "the rerun produced a different file set".into())?;
    for (path, bytes) in &first {
        check(second[path] == *bytes, || format!("{} differs between runs", path.display()))?;
    }
    Ok(format!("every command rerun, {} files byte-identical", first.len()))
}

const TABLE_LINES: [&str; 10] = [
    "Method & Rouge-1 & Rouge-2 & Rouge-L & BLEU",
    "Zero-Shot & 25.19 & 11.79 & 20.47 & 27.34",
    "Random & 26.10 & 10.99 & 21.35 & 30.39",
    "Recency & 28.69 & 12.65 & 23.67 & 32.65",
    "BM25 & 31.07 & 13.72 & 25.20 & 35.20",
    "BGE & 30.21 & 13.45 & 24.91 & 34.03",
    "ROPG & 31.19 & 13.56 & 25.25 & 34.66",
    "CFRAG & 31.41 & 14.56 & 26.05 & 34.59",
    "PrLM & 36.74 & 17.25 & 30.93 & 40.56",
    "w/o r_personal & 35.07 & 16.40 & 29.40 & 38.82",
];

fn criterion_report(root: &Path) -> Outcome {
    let fixture = manifest_dir().join("tests/fixtures/lamp5_table.csv");
    let out = root.join("table");
    prlm(&["evaluate", "--fixture", s(&fixture), "--out", s(&out)])?;
    let table = fs::read_to_string(out.join("report.txt")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = table.lines().collect();
    check(lines == TABLE_LINES, || format!("rendered table differs:\n{table}"))?;
    let rows = read_csv(&out.join("report.csv"))?;
    check(rows == read_csv(&fixture)?, || "csv report does not round-trip the fixture".into())?;
    Ok(format!("{} rows rendered exactly", rows.len()))
}

fn criterion_sweep(p: &Pipeline) -> Outcome {
    let rows = read_csv(&p.dir("sweep").join("report.csv"))?;
    check(rows.len() == 10, || format!("{} rows", rows.len()))?;
    for (i, row) in rows.iter().enumerate() {
        let want = format!("Heuristic (k={})", i + 1);
        check(row.method == want, || format!("row {i} is '{}', expected '{want}'", row.method))?;
    }
    let r1: Vec<String> = rows.iter().map(|r| format!("{:.1}", r.rouge1)).collect();
    Ok(format!("10 rows, k = 1..10 in order, Rouge-1 {}", r1.join(" ")))
}

// ---------------------------------------------------------------- driver

fn report(results: &[(u32, &str, Outcome)]) -> bool {
    let mut ok = true;
    for (n, name, r) in results {
        match r {
            Ok(detail) => println!("criterion {n} ({name}): PASS  {detail}"),
            Err(why) => {
                ok = false;
                println!("criterion {n} ({name}): FAIL  {why}");
            }
        }
    }
    ok
}

fn main() {
    // libtest flags such as --list or --format are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let pipeline = Pipeline {
        root: tmp.path().join("synthetic"),
        config: synthetic_config(),
    };
    let mut results = vec![
        (1, "metric oracle", criterion_metrics()),
        (2, "contrastive reward model", criterion_scorer()),
        (3, "bm25", criterion_bm25()),
        (4, "grpo invariants", criterion_grpo()),
    ];
    let start = Instant::now();
    let ran = pipeline.run_all();
    let elapsed = start.elapsed();
    match ran {
        Ok(()) => {
            results.push((5, "end-to-end synthetic training", criterion_end_to_end(&pipeline, elapsed)));
            results.push((6, "determinism", criterion_determinism(&pipeline)));
            results.push((7, "report fidelity", criterion_report(tmp.path())));
            results.push((8, "profile-count sweep", criterion_sweep(&pipeline)));
        }
        Err(e) => {
            for (n, name) in [(5, "end-to-end synthetic training"), (6, "determinism"), (8, "profile-count sweep")] {
                results.push((n, name, Err(format!("pipeline failed: {e}"))));
            }
            results.push((7, "report fidelity", criterion_report(tmp.path())));
            results.sort_by_key(|r| r.0);
        }
    }
    if !report(&results) {
        std::process::exit(1);
    }
}
