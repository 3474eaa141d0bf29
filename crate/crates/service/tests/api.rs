use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

use racx::corpus::{generate_synthetic_corpus, CountRange, SyntheticCorpus, SyntheticSpec};
use racx::explain::{distill, Explainer, FeatureExtractor, KdConfig, FEATURES_FILE};
use racx::harness::{build_question_sheet, inter_group_consistency, Group, QuestionSheet, RatingStore, SheetConfig};
use racx::model::{ModelConfig, RacModel};
use racx::train::{evaluate, predict_codes, train, TrainConfig};
use racx_service::{router, ApiConfig, AppState, MAX_TEXT_BYTES};

struct Fixture {
    _dir: TempDir,
    corpus: SyntheticCorpus,
    model_dir: PathBuf,
    students_dir: PathBuf,
    sheets_dir: PathBuf,
    sheet: QuestionSheet,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            n_codes: 4,
            n_notes: 16,
            background_vocab_size: 40,
            background_sentences: CountRange::new(1, 3),
            words_per_sentence: CountRange::new(3, 6),
            seed: 11,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let model_config = ModelConfig {
            embed_dim: 16,
            attention_heads: 2,
            ffn_dim: 32,
            encoder_layers: 1,
            conv_width: 3,
            seed: 3,
            ..ModelConfig::default()
        };
        let train_config = TrainConfig { epochs: 150, batch_size: 4, learning_rate: 1e-2, ..TrainConfig::default() };
        let model = train(&corpus.dataset, &corpus.codes, &model_config, &train_config, 1).unwrap().model;
        let model_dir = dir.path().join("model");
        model.save_dir(&model_dir).unwrap();

        let extractor = FeatureExtractor::build(&corpus.dataset, 500).unwrap();
        let students = distill(&model, &corpus.dataset, &extractor, &KdConfig::default()).unwrap();
        let students_dir = dir.path().join("students");
        std::fs::create_dir(&students_dir).unwrap();
        students.save(students_dir.join(racx::explain::STUDENTS_FILE)).unwrap();
        extractor.save(students_dir.join(FEATURES_FILE)).unwrap();

        let explainer = Explainer::new(&model).with_students(&students, &extractor);
        let sheet = build_question_sheet(&corpus.dataset, &explainer, &SheetConfig::new("s1", 6)).unwrap();
        let sheets_dir = dir.path().join("sheets");
        std::fs::create_dir(&sheets_dir).unwrap();
        sheet.save(sheets_dir.join("s1.json")).unwrap();

        Fixture { _dir: dir, corpus, model_dir, students_dir, sheets_dir, sheet }
    })
}

fn full_config(ratings: &Path) -> ApiConfig {
    let f = fixture();
    ApiConfig {
        checkpoint: Some(f.model_dir.clone()),
        students: Some(f.students_dir.clone()),
        sheets_dir: Some(f.sheets_dir.clone()),
        ratings: ratings.to_path_buf(),
        ..ApiConfig::default()
    }
}

fn app(config: &ApiConfig) -> Router {
    router(Arc::new(AppState::load(config).unwrap()))
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty);
    send_raw(app, method, uri, body).await
}

async fn send_raw(app: &Router, method: &str, uri: &str, body: Body) -> (StatusCode, Value) {
    let request =
        Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body).unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = to_bytes(response.into_body(), usize::MAX).await.unwrap();
    let value =
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or_else(|| panic!("no error envelope in {body}"))
}

fn rating(annotator: &str, group: &str, item: &str, rating: &str) -> Value {
    json!({ "annotator_id": annotator, "group": group, "item_id": item, "rating": rating })
}

#[tokio::test]
async fn predict_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&full_config(&tmp.path().join("r.jsonl")));

    let (status, body) = send(&app, "POST", "/api/predict", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "empty_body");

    let (status, body) = send(&app, "POST", "/api/predict", Some(json!({ "text": "  " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "empty_text");

    let (status, body) = send(&app, "POST", "/api/predict", Some(json!({ "txt": "a" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "invalid_json");

    let big = "a ".repeat(MAX_TEXT_BYTES / 2 + 1);
    let (status, body) = send(&app, "POST", "/api/predict", Some(json!({ "text": big }))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "too_large");

    let huge = Body::from(format!("{{\"text\": \"{}\"}}", "a".repeat(3 * MAX_TEXT_BYTES)));
    let (status, body) = send_raw(&app, "POST", "/api/predict", huge).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "too_large");
}

#[tokio::test]
async fn predict_is_deterministic_sorted_and_matches_the_model() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&full_config(&tmp.path().join("r.jsonl")));
    let model = RacModel::load_dir(&f.model_dir).unwrap();
    for note in f.corpus.dataset.notes() {
        let req = json!({ "text": note.text });
        let (status, first) = send(&app, "POST", "/api/predict", Some(req.clone())).await;
        let (_, second) = send(&app, "POST", "/api/predict", Some(req)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(first.to_string(), second.to_string());
        let codes = first["codes"].as_array().unwrap();
        let probs: Vec<f64> = codes.iter().map(|c| c["prob"].as_f64().unwrap()).collect();
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
        let expected = model.predict(&note.text).unwrap();
        let mut want: Vec<&str> =
            predict_codes(&expected.probabilities, 0.5).into_iter().map(|l| model.codes.get(l).code.as_str()).collect();
        let mut got: Vec<&str> = codes.iter().map(|c| c["code"].as_str().unwrap()).collect();
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }
}

#[tokio::test]
async fn overfit_model_recovers_gold_codes() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&full_config(&tmp.path().join("r.jsonl")));
    let model = RacModel::load_dir(&f.model_dir).unwrap();
    let report = evaluate(&model, &f.corpus.dataset, 0.5).unwrap();
    assert!(report.micro_f1 >= 0.95, "fixture model only reached {}", report.micro_f1);
    let mut hits = 0;
    let mut total = 0;
    for note in f.corpus.dataset.notes() {
        let (_, body) = send(&app, "POST", "/api/predict", Some(json!({ "text": note.text }))).await;
        let got: Vec<String> =
            body["codes"].as_array().unwrap().iter().map(|c| c["code"].as_str().unwrap().to_string()).collect();
        total += note.gold_codes.len();
        hits += note.gold_codes.iter().filter(|c| got.contains(c)).count();
    }
    assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total} gold codes predicted");
}

#[tokio::test]
async fn without_a_model_prediction_is_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ApiConfig { ratings: tmp.path().join("r.jsonl"), ..ApiConfig::default() };
    let app = app(&config);
    let (status, body) = send(&app, "POST", "/api/predict", Some(json!({ "text": "fever" }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_code(&body), "model_not_loaded");
    let req = json!({ "text": "fever", "code": "D001", "method": "attn" });
    let (status, _) = send(&app, "POST", "/api/explain", Some(req)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, body) = send(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["model_loaded"], json!(false));
}

#[tokio::test]
async fn explain_contract() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ratings = tmp.path().join("r.jsonl");
    let code = f.corpus.codes.get(0).code.clone();

    let no_students = ApiConfig { students: None, ..full_config(&ratings) };
    let app_a = app(&no_students);
    let req = json!({ "text": "some text here", "code": code, "method": "kd" });
    let (status, body) = send(&app_a, "POST", "/api/explain", Some(req)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "students_not_loaded");

    let app_b = app(&full_config(&ratings));
    let req = json!({ "text": "some text", "code": "NOPE", "method": "attn" });
    let (status, body) = send(&app_b, "POST", "/api/explain", Some(req)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "unknown_code");

    let req = json!({ "text": "some text", "code": code, "method": "lime" });
    let (status, body) = send(&app_b, "POST", "/api/explain", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "unknown_method");

    let req = json!({ "text": "fever", "code": code, "method": "attn" });
    let (status, body) = send(&app_b, "POST", "/api/explain", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let snippets = body["snippets"].as_array().unwrap();
    assert_eq!(snippets.len(), 1);
    assert_eq!((snippets[0]["start"].as_u64(), snippets[0]["end"].as_u64()), (Some(0), Some(5)));
    assert_eq!(snippets[0]["text"], json!("fever"));
    assert_eq!(body["method"], json!("attn"));
}

#[tokio::test]
async fn explanations_point_at_planted_triggers() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&full_config(&tmp.path().join("r.jsonl")));
    let mut overlaps = 0;
    for span in &f.corpus.triggers {
        let note = f.corpus.dataset.get(&span.note_id).unwrap();
        let req = json!({ "text": note.text, "code": span.code, "method": "attn", "top_n": 1 });
        let (status, body) = send(&app, "POST", "/api/explain", Some(req)).await;
        assert_eq!(status, StatusCode::OK);
        let top = &body["snippets"][0];
        let (start, end) = (top["start"].as_u64().unwrap() as usize, top["end"].as_u64().unwrap() as usize);
        assert_eq!(&note.text[start..end], top["text"].as_str().unwrap());
        if start < span.end && span.start < end {
            overlaps += 1;
        }
    }
    let n = f.corpus.triggers.len();
    assert!(overlaps as f64 >= 0.8 * n as f64, "{overlaps}/{n} snippets overlap their trigger");
}

#[tokio::test]
async fn sheet_is_served_blinded() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&full_config(&tmp.path().join("r.jsonl")));
    let (status, body) = send(&app, "GET", "/api/sheets/s1", None).await;
    assert_eq!(status, StatusCode::OK);
    let text = body.to_string();
    for needle in ["\"attn\"", "\"kd\"", "method", "probability", "score"] {
        assert!(!text.contains(needle), "{needle} leaked");
    }
    let items = body["items"].as_array().unwrap();
    assert_eq!(items.len(), f.sheet.items.len());
    for (served, item) in items.iter().zip(&f.sheet.items) {
        assert_eq!(served["item_id"].as_str().unwrap(), item.item_id);
        assert_eq!(served["start"].as_u64().unwrap() as usize, item.snippet.start);
        assert_eq!(served["end"].as_u64().unwrap() as usize, item.snippet.end);
    }
    let (status, body) = send(&app, "GET", "/api/sheets/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "unknown_sheet");
}

#[tokio::test]
async fn rating_submission_contract() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&full_config(&tmp.path().join("r.jsonl")));
    let item = f.sheet.items[0].item_id.as_str();
    let url = "/api/sheets/s1/ratings";

    let (status, body) = send(&app, "POST", url, Some(rating("ann1", "A", item, "maybe"))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_rating");

    let (status, body) = send(&app, "POST", url, Some(rating("ann1", "C", item, "informative"))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_group");

    let (status, body) = send(&app, "POST", url, Some(rating("ann1", "A", "q999", "informative"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "unknown_item");

    let (status, _) =
        send(&app, "POST", "/api/sheets/zz/ratings", Some(rating("ann1", "A", item, "informative"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = send(&app, "POST", url, Some(rating("ann1", "A", item, "informative"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["replaced"], Value::Null);

    let (status, body) = send(&app, "POST", url, Some(rating("ann1", "A", item, "irrelevant"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "conflict");

    let mut again = rating("ann1", "A", item, "irrelevant");
    again["overwrite"] = json!(true);
    let (status, body) = send(&app, "POST", url, Some(again)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["replaced"]["rating"], json!("informative"));
    assert_eq!(body["record"]["rating"], json!("irrelevant"));

    let (status, _) = send(&app, "POST", url, Some(rating("ann1", "B", item, "irrelevant"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn accepted_ratings_survive_a_restart() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("r.jsonl");
    let item = f.sheet.items[1].item_id.as_str();
    {
        let app = app(&full_config(&path));
        let (status, _) =
            send(&app, "POST", "/api/sheets/s1/ratings", Some(rating("ann9", "B", item, "highly_informative"))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let store = RatingStore::open(&path).unwrap();
    let record = store.find("s1", item, "ann9").unwrap();
    assert_eq!(record.rating.as_str(), "highly_informative");
    assert_eq!(record.group, Group::B);

    let app = app(&full_config(&path));
    let (status, _) = send(&app, "POST", "/api/sheets/s1/ratings", Some(rating("ann9", "B", item, "irrelevant"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn consistency_reads_its_own_writes_and_matches_the_oracle() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("r.jsonl");
    let app = app(&full_config(&path));
    let url = "/api/sheets/s1/consistency";

    let (status, body) = send(&app, "GET", url, None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "not_computable");

    let ids: Vec<&str> = f.sheet.items.iter().map(|i| i.item_id.as_str()).collect();
    // Verdicts, ties resolving to irrelevant:
    // A: 0 informative, 1 highly_informative, 2 tie, 3 irrelevant, 4 tie, 5 irrelevant.
    // B: 0 irrelevant, 1 informative, 2 informative, 3 informative, 4 tie, 5 irrelevant.
    // Informative sets {0, 1} and {1, 2, 3}: Jaccard 1 / 4.
    let plan: [(&str, &str, [&str; 6]); 4] = [
        ("a1", "A", ["informative", "highly_informative", "informative", "irrelevant", "irrelevant", "irrelevant"]),
        ("a2", "A", ["informative", "highly_informative", "irrelevant", "irrelevant", "informative", "irrelevant"]),
        ("b1", "B", ["irrelevant", "informative", "informative", "informative", "irrelevant", "irrelevant"]),
        ("b2", "B", ["irrelevant", "informative", "informative", "informative", "informative", "irrelevant"]),
    ];
    for (annotator, group, row) in &plan[..1] {
        for (id, r) in ids.iter().zip(row) {
            let (status, _) = send(&app, "POST", "/api/sheets/s1/ratings", Some(rating(annotator, group, id, r))).await;
            assert_eq!(status, StatusCode::OK);
        }
    }
    let (status, _) = send(&app, "GET", url, None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "group B has no ratings yet");

    for (annotator, group, row) in &plan[1..] {
        for (id, r) in ids.iter().zip(row) {
            let (status, _) = send(&app, "POST", "/api/sheets/s1/ratings", Some(rating(annotator, group, id, r))).await;
            assert_eq!(status, StatusCode::OK);
        }
    }
    let (status, body) = send(&app, "GET", url, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["jaccard"].as_f64().unwrap(), 0.25);
    assert_eq!(body["items_compared"].as_u64().unwrap(), 6);
    assert_eq!(body["below_reported_threshold"], json!(true));

    let store = RatingStore::open(&path).unwrap();
    let oracle = inter_group_consistency(&store.current_for("s1"), Group::A, Group::B, &f.sheet.methods()).unwrap();
    assert_eq!(body, serde_json::to_value(&oracle).unwrap());

    // One more vote for item 2 in group A breaks the tie.
    let (status, _) =
        send(&app, "POST", "/api/sheets/s1/ratings", Some(rating("a3", "A", ids[2], "informative"))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, body) = send(&app, "GET", url, None).await;
    // A: {0, 1, 2}, B: {1, 2, 3}. Jaccard 2 / 4.
    assert_eq!(body["jaccard"].as_f64().unwrap(), 0.5);
}

#[tokio::test]
async fn static_assets_are_served_from_the_root() {
    let tmp = tempfile::tempdir().unwrap();
    let assets = tmp.path().join("ui");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html>ui</html>").unwrap();
    let config = ApiConfig { static_dir: Some(assets), ..full_config(&tmp.path().join("r.jsonl")) };
    let app = app(&config);
    let (status, body) = send(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!("<html>ui</html>"));
    let (status, _) = send(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn config_file_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("api.json");
    std::fs::write(&path, r#"{"port": 9001, "threshold": 0.4, "ratings": "x.jsonl"}"#).unwrap();
    let config = ApiConfig::load(&path).unwrap();
    assert_eq!((config.port, config.threshold), (9001, 0.4));
    assert!(config.validate().is_ok());

    std::fs::write(&path, r#"{"prot": 9001}"#).unwrap();
    assert!(ApiConfig::load(&path).is_err());

    let missing = ApiConfig { checkpoint: Some(tmp.path().join("absent")), ..ApiConfig::default() };
    assert!(missing.validate().is_err());
    let bad_threshold = ApiConfig { threshold: 1.0, ..ApiConfig::default() };
    assert!(bad_threshold.validate().is_err());
    let orphan_students = ApiConfig { students: Some(tmp.path().to_path_buf()), ..ApiConfig::default() };
    assert!(orphan_students.validate().is_err());
}
