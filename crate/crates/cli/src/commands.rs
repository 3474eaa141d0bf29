use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use racx::corpus::{
    generate_synthetic_corpus, load_corpus_dir, read_jsonl, write_jsonl, CodeVocabulary, Dataset, SyntheticSpec,
    CODES_FILE, NOTES_FILE,
};
use racx::explain::{
    collect_logits, distill, fidelity_from_logits, Explainer, ExplanationSet, FeatureExtractor, KdConfig, StudentSet,
    FEATURES_FILE, STUDENTS_FILE,
};
use racx::harness::{
    build_question_sheet, human_baseline_compare, inter_group_consistency, load_coder_annotations, Group,
    QuestionSheet, Rating, RatingRecord, RatingStore, SheetConfig,
};
use racx::model::{ModelConfig, RacModel, CHECKPOINT_FILE};
use racx::train::{check_threshold, evaluate, predict_codes, train, TrainConfig};
use racx_service::{ApiConfig, AppState, PredictedCode};

use crate::args::*;

/// A flag combination that cannot be satisfied.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

pub const CORPUS_SPEC_FILE: &str = "corpus.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Fidelity(a) => fidelity(a),
        Command::Sheet(SheetCommand::Build(a)) => sheet_build(a),
        Command::Sheet(SheetCommand::Ingest(a)) => sheet_ingest(a),
        Command::Sheet(SheetCommand::Consistency(a)) => sheet_consistency(a),
        Command::Baseline(a) => baseline(a),
        Command::Serve(a) => serve(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    serde_json::from_slice(&bytes).with_context(|| format!("reading {}", path.display()))
}

fn io_error(path: &Path, source: std::io::Error) -> racx::Error {
    racx::Error::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))?;
    Ok(())
}

/// Pretty JSON to `out`, or one line to stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => print_line(value),
    }
}

fn print_line<T: Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    Ok(())
}

fn notes_and_codes_paths(args: &DataArgs) -> (PathBuf, PathBuf) {
    let (notes, dir) = if args.data.is_dir() {
        (args.data.join(NOTES_FILE), args.data.clone())
    } else {
        let dir = args.data.parent().map(Path::to_path_buf).unwrap_or_default();
        (args.data.clone(), dir)
    };
    let codes = args.codes.clone().unwrap_or_else(|| dir.join(CODES_FILE));
    (notes, codes)
}

fn apply_range(dataset: Dataset, range: Option<NoteRange>) -> Result<Dataset> {
    let Some(r) = range else { return Ok(dataset) };
    if r.end > dataset.len() {
        return Err(usage(format!("range {}:{} exceeds the {} notes available", r.start, r.end, dataset.len())));
    }
    let indices: Vec<usize> = (r.start..r.end).collect();
    Ok(dataset.subset(&indices))
}

/// Notes and their own code vocabulary.
fn load_data(args: &DataArgs) -> Result<(Dataset, CodeVocabulary)> {
    let (dataset, codes) = if args.data.is_dir() && args.codes.is_none() {
        load_corpus_dir(&args.data)?
    } else {
        let (notes, codes) = notes_and_codes_paths(args);
        let codes = CodeVocabulary::load(codes)?;
        (Dataset::load(notes, &codes)?, codes)
    };
    Ok((apply_range(dataset, args.range)?, codes))
}

/// Notes checked against a model's code vocabulary.
fn load_data_for(args: &DataArgs, model: &RacModel) -> Result<Dataset> {
    let (notes, _) = notes_and_codes_paths(args);
    apply_range(Dataset::load(notes, &model.codes)?, args.range)
}

fn load_model(dir: &Path) -> Result<RacModel> {
    RacModel::load_dir(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn load_students(dir: &Path) -> Result<(StudentSet, FeatureExtractor)> {
    let extractor = FeatureExtractor::load(dir.join(FEATURES_FILE))?;
    let students = StudentSet::load(dir.join(STUDENTS_FILE))?;
    students.check_extractor(&extractor)?;
    Ok((students, extractor))
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(path) => read_json(path)?,
        None => SyntheticSpec::default(),
    };
    if let Some(n) = a.codes {
        spec.n_codes = n;
    }
    if let Some(n) = a.notes {
        spec.n_notes = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic_corpus(&spec)?;
    corpus.save_dir(&a.out)?;
    write_json(&a.out.join(CORPUS_SPEC_FILE), &spec)?;
    print_line(&serde_json::json!({
        "notes": corpus.dataset.len(),
        "codes": corpus.codes.len(),
        "triggers": corpus.triggers.len(),
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    min_freq: usize,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self { model: ModelConfig::default(), train: TrainConfig::default(), min_freq: 1 }
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config: TrainFile = match &a.config {
        Some(path) => read_json(path)?,
        None => TrainFile::default(),
    };
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
        config.model.seed = s;
    }
    if let Some(t) = a.threshold {
        config.train.threshold = t;
    }
    let (dataset, codes) = load_data(&a.data)?;
    let outcome = train(&dataset, &codes, &config.model, &config.train, config.min_freq)?;
    create_dir(&a.out)?;
    outcome.model.save_dir(&a.out)?;
    write_jsonl(&a.out.join(TRAIN_LOG_FILE), &outcome.log)?;
    config.model = outcome.model.config.clone();
    write_json(&a.out.join(TRAIN_CONFIG_FILE), &config)?;
    let report = evaluate(&outcome.model, &dataset, config.train.threshold)?;
    print_line(&serde_json::json!({
        "epochs_run": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "train": report,
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let dataset = load_data_for(&a.data, &model)?;
    let report = evaluate(&model, &dataset, a.threshold)?;
    if let Some(path) = &a.per_code_csv {
        std::fs::write(path, report.per_code_csv()).map_err(|e| io_error(path, e))?;
    }
    emit(&report, a.out.as_deref())
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note_id: Option<String>,
    text: String,
    #[serde(default)]
    codes: Vec<PredictedCode>,
    #[serde(default)]
    threshold: Option<f64>,
}

/// JSON lines from a file, or from stdin for `-`.
fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if path != Path::new("-") {
        return Ok(read_jsonl(path)?);
    }
    let mut out = Vec::new();
    for (i, line) in std::io::stdin().lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| racx::Error::Parse {
            path: PathBuf::from("<stdin>"),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn predict_line(model: &RacModel, note_id: Option<String>, text: String, threshold: f64) -> Result<PredictionLine> {
    let prediction = model.predict(&text)?;
    let mut codes: Vec<usize> = predict_codes(&prediction.probabilities, threshold).into_iter().collect();
    let p = &prediction.probabilities;
    codes.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    Ok(PredictionLine {
        note_id,
        codes: codes
            .into_iter()
            .map(|l| {
                let entry = model.codes.get(l);
                PredictedCode { code: entry.code.clone(), title: entry.title.clone(), prob: p[l] }
            })
            .collect(),
        text,
        threshold: Some(threshold),
    })
}

fn predict(a: PredictArgs) -> Result<()> {
    check_threshold(a.threshold)?;
    let model = load_model(&a.model)?;
    let inputs: Vec<(Option<String>, String)> = if let Some(text) = a.text {
        vec![(None, text)]
    } else if let Some(data) = a.data {
        let args = DataArgs { data, codes: None, range: None };
        load_data_for(&args, &model)?.notes().iter().map(|n| (Some(n.id.clone()), n.text.clone())).collect()
    } else if let Some(input) = a.input {
        read_lines::<PredictionLine>(&input)?.into_iter().map(|l| (l.note_id, l.text)).collect()
    } else {
        return Err(usage("predict needs one of --text, --data or --input"));
    };
    let lines: Vec<PredictionLine> =
        inputs.into_par_iter().map(|(id, text)| predict_line(&model, id, text, a.threshold)).collect::<Result<_>>()?;
    for line in &lines {
        print_line(line)?;
    }
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let students = a.students.as_deref().map(load_students).transpose()?;
    let mut explainer = Explainer::new(&model);
    if let Some((s, fx)) = &students {
        explainer = explainer.with_students(s, fx);
    }
    if !explainer.supports(a.method) {
        return Err(usage(format!("--method {} needs --students", a.method)));
    }
    explainer.top_n = a.top_n;
    explainer.window = a.window;
    let requests: Vec<(String, String, String)> = match (a.text, a.input) {
        (Some(text), None) => {
            let code = a.code.expect("clap requires --code with --text");
            vec![("text".into(), text, code)]
        }
        (None, Some(input)) => read_lines::<PredictionLine>(&input)?
            .into_iter()
            .enumerate()
            .flat_map(|(i, line)| {
                let id = line.note_id.unwrap_or_else(|| format!("line-{}", i + 1));
                let text = line.text;
                line.codes.into_iter().map(move |c| (id.clone(), text.clone(), c.code))
            })
            .collect(),
        _ => return Err(usage("explain needs --text with --code, or --input")),
    };
    for (_, _, code) in &requests {
        if !model.codes.contains(code) {
            return Err(racx::Error::Validation(format!("unknown code {code}")).into());
        }
    }
    let sets: Vec<ExplanationSet> = requests
        .par_iter()
        .map(|(id, text, code)| explainer.explain(id, text, code, a.method).map_err(Into::into))
        .collect::<Result<_>>()?;
    for set in &sets {
        print_line(set)?;
    }
    Ok(())
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        builder = builder.num_threads(j);
    }
    builder.build().context("starting worker threads")
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(std::fs::metadata(path).map_err(|e| io_error(path, e))?.len())
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let mut config: KdConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => KdConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(k) = a.max_nonzero {
        config.max_nonzero = k;
    }
    let model = load_model(&a.model)?;
    let dataset = load_data_for(&a.data, &model)?;
    let pool = thread_pool(a.jobs)?;
    let (students, extractor) = pool.install(|| -> Result<_> {
        let extractor = FeatureExtractor::build(&dataset, a.max_features)?;
        let students = distill(&model, &dataset, &extractor, &config)?;
        Ok((students, extractor))
    })?;
    create_dir(&a.out)?;
    let students_path = a.out.join(STUDENTS_FILE);
    students.save(&students_path)?;
    extractor.save(a.out.join(FEATURES_FILE))?;
    let students_bytes = file_len(&students_path)?;
    let checkpoint_bytes = file_len(&a.model.join(CHECKPOINT_FILE))?;
    let diverged: Vec<&str> = students.students.iter().filter(|s| s.diverged).map(|s| s.code.as_str()).collect();
    print_line(&serde_json::json!({
        "codes": students.students.len(),
        "features": extractor.len(),
        "students_bytes": students_bytes,
        "checkpoint_bytes": checkpoint_bytes,
        "size_ratio": students_bytes as f64 / checkpoint_bytes as f64,
        "diverged": diverged,
    }))
}

#[derive(Serialize)]
struct LogitDump<'a> {
    codes: &'a [String],
    note_ids: Vec<&'a str>,
    teacher: &'a [Vec<f64>],
    student: &'a [Vec<f64>],
}

fn fidelity(a: FidelityArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (students, extractor) = load_students(&a.students)?;
    let dataset = load_data_for(&a.data, &model)?;
    let (teacher, student) = collect_logits(&model, &students, &extractor, &dataset)?;
    let codes: Vec<String> = model.codes.entries().iter().map(|e| e.code.clone()).collect();
    if let Some(path) = &a.dump_logits {
        let dump = LogitDump {
            codes: &codes,
            note_ids: dataset.notes().iter().map(|n| n.id.as_str()).collect(),
            teacher: &teacher,
            student: &student,
        };
        write_json(path, &dump)?;
    }
    let report = fidelity_from_logits(&codes, &teacher, &student, a.threshold)?;
    emit(&report, a.out.as_deref())
}

fn sheet_build(a: SheetBuildArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let students = a.students.as_deref().map(load_students).transpose()?;
    let dataset = load_data_for(&a.data, &model)?;
    let mut explainer = Explainer::new(&model);
    if let Some((s, fx)) = &students {
        explainer = explainer.with_students(s, fx);
    }
    let config = SheetConfig {
        sheet_id: a.sheet_id,
        n_items: a.n_items,
        methods: a.methods,
        seed: a.seed,
        threshold: a.threshold,
        window: a.window,
    };
    let sheet = build_question_sheet(&dataset, &explainer, &config)?;
    sheet.save(&a.out)?;
    print_line(&serde_json::json!({
        "sheet_id": sheet.sheet_id,
        "items": sheet.items.len(),
        "config_digest": sheet.config_digest,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestLine {
    annotator_id: String,
    group: Group,
    item_id: String,
    rating: Rating,
    #[serde(default)]
    timestamp: Option<u64>,
    #[serde(default)]
    overwrite: bool,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn sheet_ingest(a: SheetIngestArgs) -> Result<()> {
    let sheet = QuestionSheet::load(&a.sheet)?;
    let lines: Vec<IngestLine> = read_jsonl(&a.input)?;
    if let Some(l) = lines.iter().find(|l| sheet.item(&l.item_id).is_none()) {
        return Err(racx::Error::Validation(format!("sheet {} has no item {}", sheet.sheet_id, l.item_id)).into());
    }
    let mut store = RatingStore::open(&a.ratings)?;
    let mut replaced = 0;
    for line in lines.iter() {
        let record = RatingRecord {
            sheet_id: sheet.sheet_id.clone(),
            item_id: line.item_id.clone(),
            annotator_id: line.annotator_id.clone(),
            group: line.group,
            rating: line.rating,
            timestamp: line.timestamp.unwrap_or_else(now_ms),
        };
        if store.submit(record, a.overwrite || line.overwrite)?.is_some() {
            replaced += 1;
        }
    }
    print_line(&serde_json::json!({
        "sheet_id": sheet.sheet_id,
        "ingested": lines.len(),
        "replaced": replaced,
    }))
}

fn sheet_consistency(a: SheetConsistencyArgs) -> Result<()> {
    let sheet = QuestionSheet::load(&a.sheet)?;
    let store = RatingStore::open(&a.ratings)?;
    let report = inter_group_consistency(&store.current_for(&sheet.sheet_id), a.group_a, a.group_b, &sheet.methods())?;
    emit(&report, a.out.as_deref())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemLine {
    note_id: String,
    codes: BTreeSet<String>,
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let (dataset, codes) = load_data(&a.reference)?;
    let coders = load_coder_annotations(&a.coders, &codes)?;
    let reference: BTreeMap<String, BTreeSet<String>> =
        dataset.notes().iter().map(|n| (n.id.clone(), n.gold_codes.clone())).collect();
    let system: BTreeMap<String, BTreeSet<String>> = match (&a.model, &a.system) {
        (Some(dir), None) => {
            check_threshold(a.threshold)?;
            let model = load_model(dir)?;
            dataset
                .notes()
                .par_iter()
                .map(|n| {
                    let p = model.predict(&n.text)?.probabilities;
                    let set =
                        predict_codes(&p, a.threshold).into_iter().map(|l| model.codes.get(l).code.clone()).collect();
                    Ok((n.id.clone(), set))
                })
                .collect::<Result<_>>()?
        }
        (None, Some(path)) => {
            let lines: Vec<SystemLine> = read_jsonl(path)?;
            lines.into_iter().map(|l| (l.note_id, l.codes)).collect()
        }
        _ => return Err(usage("baseline needs exactly one of --model or --system")),
    };
    let report = human_baseline_compare(&coders, &reference, &system)?;
    emit(&report, a.out.as_deref())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => {
            let mut c = ApiConfig::load(path)?;
            if let Ok(port) = std::env::var(racx_service::PORT_ENV) {
                c.port = port
                    .parse()
                    .map_err(|_| usage(format!("{}={port:?} is not a valid port", racx_service::PORT_ENV)))?;
            }
            c
        }
        None => ApiConfig::from_env()?,
    };
    if let Some(b) = a.bind {
        config.bind = b;
    }
    if let Some(p) = a.port {
        config.port = p;
    }
    if a.checkpoint.is_some() {
        config.checkpoint = a.checkpoint;
    }
    if a.students.is_some() {
        config.students = a.students;
    }
    if a.sheets_dir.is_some() {
        config.sheets_dir = a.sheets_dir;
    }
    if let Some(r) = a.ratings {
        config.ratings = r;
    }
    if let Some(t) = a.threshold {
        config.threshold = t;
    }
    if a.static_dir.is_some() {
        config.static_dir = a.static_dir;
    }
    let state = Arc::new(AppState::load(&config)?);
    let runtime =
        tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting the async runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.address())
            .await
            .with_context(|| format!("binding {}", config.address()))?;
        let local = listener.local_addr()?;
        eprintln!("listening on http://{local}");
        print_line(&serde_json::json!({ "listening": local.to_string() }))?;
        racx_service::serve(listener, state).await.context("serving")
    })
}
