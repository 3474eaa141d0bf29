//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Thresholds and time budgets are the
//! constants below.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::Rng as _;
use serde_json::Value;
use tempfile::TempDir;

use racx::corpus::{generate_synthetic_corpus, segment_sentences, Dataset, SyntheticCorpus, SyntheticSpec};
use racx::explain::{collect_logits, distill, Explainer, FeatureExtractor, KdConfig, Method};
use racx::gradcheck::{check_network, check_primitive, reference_model, PRIMITIVES};
use racx::harness::{inter_group_consistency, ratio, Group, QuestionSheet, Rating, RatingRecord};
use racx::model::{ModelConfig, RacModel, CHECKPOINT_FILE};
use racx::rng::seeded;
use racx::train::{evaluate, macro_f1, micro_f1, micro_jaccard, precision_at_k, train, TrainConfig};

const BIN: &str = env!("CARGO_BIN_EXE_racx");

const GRAD_TOL: f64 = 1e-4;
const GRAD_CASES: u64 = 100;
const GRAD_MIN_COORDINATES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(60);

const PERM_NOTES: usize = 50;
const PERM_TOL: f64 = 1e-9;
const PERM_BUDGET: Duration = Duration::from_secs(30);

const LEARN_CODES: usize = 8;
const LEARN_NOTES: usize = 32;
const LEARN_SEED: u64 = 7;
const LEARN_MAX_EPOCHS: usize = 500;
const LEARN_MIN_F1: f64 = 0.95;
const LEARN_MIN_JACCARD: f64 = 0.90;
const LEARN_BUDGET: Duration = Duration::from_secs(600);

const GROUND_MIN_PROB: f64 = 0.9;
const GROUND_MIN_FRACTION: f64 = 0.8;

const FID_NOTES: usize = 416;
const FID_SEED: u64 = 7;
const FID_TRAIN: std::ops::Range<usize> = 0..128;
const FID_HELD_OUT: std::ops::Range<usize> = 288..416;
const FID_MIN_POSITIVES: usize = 20;
const FID_MIN_PEARSON: f64 = 0.9;
const FID_MAX_SIZE_RATIO: f64 = 0.10;

const METRIC_FIXTURES: usize = 200;
const METRIC_MAX_NOTES: usize = 5;
const METRIC_MAX_CODES: usize = 6;

const RATIO_TOL: f64 = 1e-12;

struct Check {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: impl Into<String>) -> Result<Check> {
    Ok(Check { passed, detail: detail.into() })
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut record = |name: &str, run: &mut dyn FnMut() -> Result<Check>| {
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(c) => (c.passed, c.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let status = if passed { "PASS" } else { "FAIL" };
        println!("{status} {name} [{:.1}s] {detail}", start.elapsed().as_secs_f64());
        if !passed {
            failed += 1;
        }
    };

    record("gradient-suite", &mut gradient_suite);
    // The overfit model is shared by the next three criteria.
    let mut learned: Option<Learned> = None;
    record("learnability", &mut || {
        let l = learn()?;
        let c = learnability(&l);
        learned = Some(l);
        c
    });
    let needs_model = || anyhow::anyhow!("no trained model");
    record("permutation-invariance", &mut || permutation_invariance(&learned.as_ref().ok_or_else(needs_model)?.model));
    record("explanation-grounding", &mut || grounding(learned.as_ref().ok_or_else(needs_model)?));
    record("distillation-fidelity", &mut distillation_fidelity);
    record("metric-oracles", &mut metric_oracles);
    record("consistency-oracle", &mut consistency_oracle);
    let pipeline = TempDir::new().expect("temp dir");
    record("pipeline-determinism", &mut || pipeline_determinism(pipeline.path()));
    record("http-service", &mut || http_service(pipeline.path()));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn gradient_suite() -> Result<Check> {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut coordinates = 0;
    let mut thin = Vec::new();
    for name in PRIMITIVES {
        let r = check_primitive(name, GRAD_CASES)?;
        if r.coordinates < GRAD_MIN_COORDINATES {
            thin.push(r.name.clone());
        }
        coordinates += r.coordinates;
        if r.max_error >= worst.1 {
            worst = (r.name, r.max_error);
        }
    }
    let net = check_network(&reference_model()?, GRAD_MIN_COORDINATES, 11)?;
    if net.max_error >= worst.1 {
        worst = (net.name.clone(), net.max_error);
    }
    let elapsed = start.elapsed();
    check(
        worst.1 < GRAD_TOL && thin.is_empty() && net.coordinates >= GRAD_MIN_COORDINATES && elapsed < GRAD_BUDGET,
        format!(
            "{} primitives + network, {} coordinates, max rel err {:.2e} ({}), {:.1}s{}",
            PRIMITIVES.len(),
            coordinates + net.coordinates,
            worst.1,
            worst.0,
            elapsed.as_secs_f64(),
            if thin.is_empty() { String::new() } else { format!(", too few coordinates: {thin:?}") }
        ),
    )
}

struct Learned {
    corpus: SyntheticCorpus,
    model: RacModel,
    epochs: usize,
    elapsed: Duration,
}

fn learn() -> Result<Learned> {
    let spec =
        SyntheticSpec { n_codes: LEARN_CODES, n_notes: LEARN_NOTES, seed: LEARN_SEED, ..SyntheticSpec::default() };
    let corpus = generate_synthetic_corpus(&spec)?;
    let config = TrainConfig { epochs: LEARN_MAX_EPOCHS, seed: LEARN_SEED, ..TrainConfig::default() };
    let start = Instant::now();
    let outcome = train(&corpus.dataset, &corpus.codes, &ModelConfig::default(), &config, 1)?;
    Ok(Learned { corpus, model: outcome.model, epochs: outcome.log.len(), elapsed: start.elapsed() })
}

fn learnability(l: &Learned) -> Result<Check> {
    let report = evaluate(&l.model, &l.corpus.dataset, 0.5)?;
    check(
        report.micro_f1 >= LEARN_MIN_F1
            && report.micro_jaccard >= LEARN_MIN_JACCARD
            && l.epochs <= LEARN_MAX_EPOCHS
            && l.elapsed < LEARN_BUDGET,
        format!(
            "{} codes, {} notes, {} epochs, train micro-F1 {:.4}, micro-Jaccard {:.4}, {:.1}s",
            LEARN_CODES,
            LEARN_NOTES,
            l.epochs,
            report.micro_f1,
            report.micro_jaccard,
            l.elapsed.as_secs_f64()
        ),
    )
}

fn permutation_invariance(model: &RacModel) -> Result<Check> {
    let start = Instant::now();
    // Fresh notes from the same generator family; notes beyond the training
    // prefix are unseen by the model.
    let spec = SyntheticSpec {
        n_codes: LEARN_CODES,
        n_notes: LEARN_NOTES + PERM_NOTES,
        seed: LEARN_SEED,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec)?;
    let mut rng = seeded(2024);
    let mut worst = 0.0f64;
    let mut reordered = 0;
    for note in &corpus.dataset.notes()[LEARN_NOTES..] {
        let sentences: Vec<&str> = segment_sentences(&note.text).into_iter().map(|r| &note.text[r]).collect();
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        while order.len() > 1 && order.iter().enumerate().all(|(i, &s)| i == s) {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        if order.iter().enumerate().any(|(i, &s)| i != s) {
            reordered += 1;
        }
        let original = sentences.join(". ");
        let permuted = order.iter().map(|&i| sentences[i]).collect::<Vec<_>>().join(". ");
        let a = model.predict(&original)?.probabilities;
        let b = model.predict(&permuted)?.probabilities;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < PERM_TOL && reordered == PERM_NOTES && elapsed < PERM_BUDGET,
        format!("{reordered}/{PERM_NOTES} notes reordered, max |Δp| {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn grounding(l: &Learned) -> Result<Check> {
    let explainer = Explainer::new(&l.model);
    let mut spans: BTreeMap<(&str, &str), Vec<std::ops::Range<usize>>> = BTreeMap::new();
    for t in &l.corpus.triggers {
        spans.entry((t.note_id.as_str(), t.code.as_str())).or_default().push(t.start..t.end);
    }
    let (mut confident, mut grounded) = (0, 0);
    for note in l.corpus.dataset.notes() {
        let prediction = l.model.predict(&note.text)?;
        for code in &note.gold_codes {
            let idx = l.model.codes.position(code).context("gold code outside vocabulary")?;
            if prediction.probabilities[idx] < GROUND_MIN_PROB {
                continue;
            }
            confident += 1;
            let set = explainer.explain_prediction(&prediction, &note.id, &note.text, idx, Method::Attn)?;
            let top = set.top().context("no attention snippet")?;
            let planted = spans.get(&(note.id.as_str(), code.as_str())).map(Vec::as_slice).unwrap_or(&[]);
            if planted.iter().any(|r| top.overlaps(r)) {
                grounded += 1;
            }
        }
    }
    let fraction = if confident == 0 { 0.0 } else { grounded as f64 / confident as f64 };
    check(
        confident > 0 && fraction >= GROUND_MIN_FRACTION,
        format!("{grounded}/{confident} confident gold pairs grounded ({:.1}%)", 100.0 * fraction),
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn distillation_fidelity() -> Result<Check> {
    let spec = SyntheticSpec { n_notes: FID_NOTES, seed: FID_SEED, ..SyntheticSpec::default() };
    let corpus = generate_synthetic_corpus(&spec)?;
    let range = |r: std::ops::Range<usize>| corpus.dataset.subset(&r.collect::<Vec<_>>());
    let (train_set, held_out): (Dataset, Dataset) = (range(FID_TRAIN), range(FID_HELD_OUT));
    let config = TrainConfig { seed: FID_SEED, ..TrainConfig::default() };
    let teacher = train(&train_set, &corpus.codes, &ModelConfig::default(), &config, 1)?.model;

    let dir = TempDir::new()?;
    let (before, after) = (dir.path().join("before"), dir.path().join("after"));
    teacher.save_dir(&before)?;
    let extractor = FeatureExtractor::build(&train_set, 20_000)?;
    let students = distill(&teacher, &train_set, &extractor, &KdConfig::default())?;
    teacher.save_dir(&after)?;
    let checkpoint = std::fs::read(before.join(CHECKPOINT_FILE))?;
    let identical = checkpoint == std::fs::read(after.join(CHECKPOINT_FILE))?;
    let students_path = dir.path().join("students.jsonl");
    students.save(&students_path)?;
    let size_ratio = std::fs::metadata(&students_path)?.len() as f64 / checkpoint.len() as f64;

    let (t_logits, s_logits) = collect_logits(&teacher, &students, &extractor, &held_out)?;
    let mut per_code = Vec::new();
    for (l, entry) in teacher.codes.entries().iter().enumerate() {
        let positives = train_set.notes().iter().filter(|n| n.gold_codes.contains(&entry.code)).count();
        if positives < FID_MIN_POSITIVES {
            continue;
        }
        let t: Vec<f64> = t_logits.iter().map(|row| row[l]).collect();
        let s: Vec<f64> = s_logits.iter().map(|row| row[l]).collect();
        per_code.push((entry.code.clone(), positives, pearson(&t, &s)));
    }
    let min_r = per_code.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let listing: Vec<String> = per_code.iter().map(|(c, n, r)| format!("{c}:{r:.3}(n={n})")).collect();
    check(
        !per_code.is_empty() && min_r >= FID_MIN_PEARSON && identical && size_ratio <= FID_MAX_SIZE_RATIO,
        format!(
            "min r {min_r:.3} over {} codes [{}], checkpoint unchanged {identical}, students/checkpoint {size_ratio:.4}",
            per_code.len(),
            listing.join(" ")
        ),
    )
}

/// Counts by walking every (note, code) cell.
fn oracle_cells(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>], codes: usize) -> Vec<(usize, usize, usize)> {
    let mut out = vec![(0, 0, 0); codes];
    for (p, g) in pred.iter().zip(gold) {
        for (c, cell) in out.iter_mut().enumerate() {
            match (p.contains(&c), g.contains(&c)) {
                (true, true) => cell.0 += 1,
                (true, false) => cell.1 += 1,
                (false, true) => cell.2 += 1,
                (false, false) => {}
            }
        }
    }
    out
}

fn f1_of(tp: usize, fp: usize, fn_: usize) -> f64 {
    if 2 * tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn metric_oracles() -> Result<Check> {
    let mut rng = seeded(0x5EED);
    let mut mismatches: Vec<String> = Vec::new();
    let levels = [0.1, 0.3, 0.5, 0.7, 0.9];
    for fixture in 0..METRIC_FIXTURES {
        let notes = rng.random_range(1..=METRIC_MAX_NOTES);
        let codes = rng.random_range(1..=METRIC_MAX_CODES);
        let random_set =
            |rng: &mut racx::rng::Rng| -> BTreeSet<usize> { (0..codes).filter(|_| rng.random_bool(0.4)).collect() };
        let pred: Vec<BTreeSet<usize>> = (0..notes).map(|_| random_set(&mut rng)).collect();
        let gold: Vec<BTreeSet<usize>> = (0..notes).map(|_| random_set(&mut rng)).collect();
        let probs: Vec<Vec<f64>> =
            (0..notes).map(|_| (0..codes).map(|_| levels[rng.random_range(0..levels.len())]).collect()).collect();

        let cells = oracle_cells(&pred, &gold, codes);
        let (tp, fp, fn_) = cells.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
        let micro = f1_of(tp, fp, fn_);
        let active: Vec<f64> = cells.iter().filter(|c| c.0 + c.1 + c.2 > 0).map(|c| f1_of(c.0, c.1, c.2)).collect();
        let macro_ = if active.is_empty() { 1.0 } else { active.iter().sum::<f64>() / active.len() as f64 };
        let (mut inter, mut union) = (0, 0);
        for (p, g) in pred.iter().zip(&gold) {
            for c in 0..codes {
                inter += usize::from(p.contains(&c) && g.contains(&c));
                union += usize::from(p.contains(&c) || g.contains(&c));
            }
        }
        let jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };

        let pairs: Vec<_> = pred.iter().cloned().zip(gold.iter().cloned()).collect();
        let mut compare = |what: &str, got: f64, want: f64| {
            if got != want {
                mismatches.push(format!("fixture {fixture} {what}: {got} vs {want}"));
            }
        };
        compare("micro-F1", micro_f1(&pred, &gold)?, micro);
        compare("macro-F1", macro_f1(&pred, &gold)?, macro_);
        compare("micro-Jaccard", micro_jaccard(&pairs)?, jaccard);
        for k in 1..=codes {
            // A code is in the top k when fewer than k codes outrank it;
            // equal probabilities rank by code index.
            let mut total = 0.0;
            for (row, g) in probs.iter().zip(&gold) {
                let hits = (0..codes)
                    .filter(|&c| {
                        let above = (0..codes).filter(|&o| row[o] > row[c] || (row[o] == row[c] && o < c)).count();
                        above < k && g.contains(&c)
                    })
                    .count();
                total += hits as f64 / k as f64;
            }
            compare(&format!("P@{k}"), precision_at_k(&probs, &gold, k)?, total / notes as f64);
        }
    }
    check(
        mismatches.is_empty(),
        format!(
            "{METRIC_FIXTURES} fixtures (≤{METRIC_MAX_NOTES} notes, ≤{METRIC_MAX_CODES} codes), {} mismatches{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(", first: {m}")).unwrap_or_default()
        ),
    )
}

fn rating(sheet: &str, item: &str, annotator: &str, group: Group, rating: Rating) -> RatingRecord {
    RatingRecord {
        sheet_id: sheet.into(),
        item_id: item.into(),
        annotator_id: annotator.into(),
        group,
        rating,
        timestamp: 0,
    }
}

fn consistency_oracle() -> Result<Check> {
    use Rating::{HighlyInformative as H, Informative as I, Irrelevant as X};
    let none = BTreeMap::new();
    let mut failures = Vec::new();
    let expect = |failures: &mut Vec<String>, what: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{what}: {got} vs {want}"));
        }
    };

    // One annotator per group; S_A = {1..5}, S_B = {1, 2, 6, 7, 8}.
    let mut records = Vec::new();
    for i in 1..=8 {
        let a = if i <= 5 { I } else { X };
        let b = if [1, 2, 6, 7, 8].contains(&i) { H } else { X };
        records.push(rating("s", &format!("q{i}"), "a1", Group::A, a));
        records.push(rating("s", &format!("q{i}"), "b1", Group::B, b));
    }
    let r = inter_group_consistency(&records, Group::A, Group::B, &none)?;
    expect(&mut failures, "2/8 case", r.jaccard, 0.25);
    if !r.below_reported_threshold {
        failures.push("0.25 not flagged below the reported threshold".into());
    }

    // Ties resolve to irrelevant: A has q1 {H, X}, q2 {H, I}, q3 {I, I},
    // q4 {H, I, X}; B rates q1..q3 informative and q4 irrelevant.
    // S_A = {q3}, S_B = {q1, q2, q3}, so 1/3.
    let a_votes: [(&str, &[Rating]); 4] = [("q1", &[H, X]), ("q2", &[H, I]), ("q3", &[I, I]), ("q4", &[H, I, X])];
    let mut records = Vec::new();
    for (item, votes) in a_votes {
        for (n, v) in votes.iter().enumerate() {
            records.push(rating("s", item, &format!("a{n}"), Group::A, *v));
        }
    }
    for (item, v) in [("q1", I), ("q2", H), ("q3", I), ("q4", X)] {
        records.push(rating("s", item, "b1", Group::B, v));
    }
    let r = inter_group_consistency(&records, Group::A, Group::B, &none)?;
    expect(&mut failures, "tie case", r.jaccard, 1.0 / 3.0);

    // A strict majority survives a tie-breaking annotator: q1 {I, I, X}.
    let records = vec![
        rating("s", "q1", "a1", Group::A, I),
        rating("s", "q1", "a2", Group::A, I),
        rating("s", "q1", "a3", Group::A, X),
        rating("s", "q1", "b1", Group::B, H),
    ];
    expect(
        &mut failures,
        "strict majority",
        inter_group_consistency(&records, Group::A, Group::B, &none)?.jaccard,
        1.0,
    );

    // Both groups find nothing informative.
    let records = vec![rating("s", "q1", "a1", Group::A, X), rating("s", "q1", "b1", Group::B, X)];
    expect(&mut failures, "both empty", inter_group_consistency(&records, Group::A, Group::B, &none)?.jaccard, 1.0);

    // Disjoint coverage is not computable.
    let disjoint = vec![rating("s", "q1", "a1", Group::A, I), rating("s", "q2", "b1", Group::B, I)];
    if inter_group_consistency(&disjoint, Group::A, Group::B, &none).is_ok() {
        failures.push("disjoint coverage accepted".into());
    }

    let r39 = ratio(0.39, 0.10).context("ratio undefined")?;
    let ratio_ok = (r39 - 3.9).abs() < RATIO_TOL && ratio(0.39, 0.0).is_none();
    if !ratio_ok {
        failures.push(format!("ratio 0.39/0.10 = {r39}"));
    }
    check(
        failures.is_empty(),
        format!(
            "2/8 -> 0.25, ties -> irrelevant, ratio 0.39/0.10 = {r39:.12}{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {failures:?}") }
        ),
    )
}

const PIPELINE_TRAIN_CONFIG: &str = r#"{
  "model": {"embed_dim": 16, "attention_heads": 2, "ffn_dim": 32, "encoder_layers": 1, "conv_width": 3},
  "train": {"batch_size": 4, "learning_rate": 0.01, "epochs": 80}
}"#;

fn racx(args: &[&str]) -> Result<String> {
    let out = Command::new(BIN).args(args).output()?;
    ensure!(out.status.success(), "racx {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    Ok(String::from_utf8(out.stdout)?)
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// gen-corpus, train, distill and sheet build into `root/run`.
fn run_pipeline(root: &Path, run: &str) -> Result<()> {
    let dir = root.join(run);
    std::fs::create_dir_all(&dir)?;
    let (data, model, students) = (dir.join("data"), dir.join("model"), dir.join("students"));
    let config = root.join("train.json");
    std::fs::write(&config, PIPELINE_TRAIN_CONFIG)?;
    racx(&["gen-corpus", "--seed", "7", "--out", path(&data)])?;
    racx(&["train", "--data", path(&data), "--config", path(&config), "--seed", "7", "--out", path(&model)])?;
    racx(&["distill", "--model", path(&model), "--data", path(&data), "--seed", "7", "--out", path(&students)])?;
    std::fs::create_dir_all(dir.join("sheets"))?;
    racx(&[
        "sheet",
        "build",
        "--model",
        path(&model),
        "--students",
        path(&students),
        "--data",
        path(&data),
        "--sheet-id",
        "s1",
        "--n-items",
        "6",
        "--seed",
        "7",
        "--out",
        path(&dir.join("sheets/s1.json")),
    ])?;
    Ok(())
}

fn files_under(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir)?.to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn pipeline_determinism(root: &Path) -> Result<Check> {
    run_pipeline(root, "run1")?;
    run_pipeline(root, "run2")?;
    let (a, b) = (files_under(&root.join("run1"))?, files_under(&root.join("run2"))?);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    check(
        a.len() >= 12 && a.keys().eq(b.keys()) && differing.is_empty(),
        format!(
            "{} artifacts compared, {} differ{}",
            a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
        ),
    )
}

fn http_service(root: &Path) -> Result<Check> {
    let dir = root.join("run1");
    let ratings = root.join("ratings.jsonl");
    let mut child = Command::new(BIN)
        .args([
            "serve",
            "--port",
            "0",
            "--checkpoint",
            path(&dir.join("model")),
            "--students",
            path(&dir.join("students")),
            "--sheets-dir",
            path(&dir.join("sheets")),
            "--ratings",
            path(&ratings),
        ])
        .env_remove("RACX_CONFIG")
        .env_remove("RACX_PORT")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()?;
    let result = (|| -> Result<Check> {
        let mut first = String::new();
        BufReader::new(child.stdout.take().context("no stdout")?).read_line(&mut first)?;
        let addr =
            serde_json::from_str::<Value>(&first)?["listening"].as_str().context("no listening address")?.to_string();
        let url = |p: &str| format!("http://{addr}{p}");
        let post = |p: &str, body: &Value| -> Result<(u16, Value)> {
            let mut resp = ureq::post(url(p))
                .config()
                .http_status_as_error(false)
                .build()
                .header("content-type", "application/json")
                .send(body.to_string())?;
            let status = resp.status().as_u16();
            Ok((status, serde_json::from_str(&resp.body_mut().read_to_string()?)?))
        };
        let get = |p: &str| -> Result<(u16, Value)> {
            let mut resp = ureq::get(url(p)).config().http_status_as_error(false).build().call()?;
            let status = resp.status().as_u16();
            Ok((status, serde_json::from_str(&resp.body_mut().read_to_string()?)?))
        };

        let sheet = QuestionSheet::load(dir.join("sheets/s1.json"))?;
        let text = sheet.items[0].note_text.clone();
        let (s1, p1) = post("/api/predict", &serde_json::json!({"text": text}))?;
        let (_, p2) = post("/api/predict", &serde_json::json!({"text": text}))?;
        let (empty, _) = post("/api/predict", &serde_json::json!({"text": ""}))?;
        let (se, explained) =
            post("/api/explain", &serde_json::json!({"text": text, "code": sheet.items[0].code, "method": "kd"}))?;
        let spans_ok = explained["snippets"].as_array().is_some_and(|s| {
            s.iter().all(|x| {
                let (a, b) =
                    (x["start"].as_u64().unwrap_or(u64::MAX) as usize, x["end"].as_u64().unwrap_or(0) as usize);
                a < b && b <= text.len() && text.get(a..b) == x["text"].as_str()
            })
        });
        let (sg, blinded) = get("/api/sheets/s1")?;
        let blind_ok = !blinded.to_string().contains("\"method\"");

        // Group A marks the first half informative, group B the first item only.
        let half = sheet.items.len() / 2;
        let mut records = Vec::new();
        for (i, item) in sheet.items.iter().enumerate() {
            for (group, annotator, informative) in [(Group::A, "a1", i < half), (Group::B, "b1", i == 0)] {
                let r = if informative { Rating::Informative } else { Rating::Irrelevant };
                let (status, _) = post(
                    "/api/sheets/s1/ratings",
                    &serde_json::json!({"annotator_id": annotator, "group": group, "item_id": item.item_id, "rating": r}),
                )?;
                ensure!(status == 200, "rating submit returned {status}");
                records.push(rating("s1", &item.item_id, annotator, group, r));
            }
        }
        let (dup, _) = post(
            "/api/sheets/s1/ratings",
            &serde_json::json!({"annotator_id": "a1", "group": "A", "item_id": sheet.items[0].item_id, "rating": "informative"}),
        )?;
        let (bad, _) = post(
            "/api/sheets/s1/ratings",
            &serde_json::json!({"annotator_id": "a1", "group": "A", "item_id": sheet.items[0].item_id, "rating": "maybe"}),
        )?;
        let (sc, report) = get("/api/sheets/s1/consistency")?;
        let oracle = inter_group_consistency(&records, Group::A, Group::B, &sheet.methods())?;
        let served = report["jaccard"].as_f64().unwrap_or(f64::NAN);
        let durable = std::fs::read_to_string(&ratings)?.lines().count() == records.len();

        check(
            s1 == 200
                && p1 == p2
                && empty == 400
                && se == 200
                && spans_ok
                && sg == 200
                && blind_ok
                && dup == 409
                && bad == 422
                && sc == 200
                && served == oracle.jaccard
                && durable,
            format!(
                "predict {s1} (deterministic {}), empty text {empty}, explain {se} (spans valid {spans_ok}), \
                 sheet {sg} (blinded {blind_ok}), duplicate {dup}, invalid rating {bad}, consistency {sc} \
                 jaccard {served} vs oracle {}, store lines durable {durable}",
                p1 == p2,
                oracle.jaccard
            ),
        )
    })();
    let _ = child.kill();
    let _ = child.wait();
    result
}
