//! HTTP facade over a trained model, its distilled students, question
//! sheets and the rating store.
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | GET | `/api/health` | | loaded artifacts |
//! | POST | `/api/predict` | `{text}` | `{codes: [{code, title, prob}], threshold}`, most probable first |
//! | POST | `/api/explain` | `{text, code, method, top_n?, window?}` | explanation set |
//! | GET | `/api/sheets/{id}` | | blinded sheet |
//! | POST | `/api/sheets/{id}/ratings` | `{annotator_id, group, item_id, rating, overwrite?}` | `{record, replaced}` |
//! | GET | `/api/sheets/{id}/consistency` | | consistency report |
//!
//! Errors use the envelope `{"error": {"code": string, "message": string}}`.
//! A 200 from the rating endpoint means the record has been synced to disk.

mod config;
mod error;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use racx::explain::{
    Explainer, ExplanationSet, FeatureExtractor, Method, StudentSet, DEFAULT_TOP_N, DEFAULT_WINDOW, FEATURES_FILE,
    STUDENTS_FILE,
};
use racx::harness::{
    inter_group_consistency, BlindedSheet, ConsistencyReport, Group, QuestionSheet, Rating, RatingRecord, RatingStore,
};
use racx::model::RacModel;
use racx::train::predict_codes;
use racx::{Error, Result};

pub use config::{ApiConfig, CONFIG_ENV, PORT_ENV};
pub use error::ApiError;

/// Largest accepted note text in bytes.
pub const MAX_TEXT_BYTES: usize = 1 << 20;
const MAX_BODY_BYTES: usize = MAX_TEXT_BYTES + (64 << 10);

/// Loaded artifacts. The model, students and sheets never change after
/// loading; only the rating store is written.
pub struct AppState {
    model: Option<RacModel>,
    students: Option<(StudentSet, FeatureExtractor)>,
    sheets: BTreeMap<String, QuestionSheet>,
    store: Mutex<RatingStore>,
    threshold: f64,
    static_dir: Option<std::path::PathBuf>,
}

impl AppState {
    pub fn load(config: &ApiConfig) -> Result<Self> {
        config.validate()?;
        let model = config.checkpoint.as_ref().map(RacModel::load_dir).transpose()?;
        let students = match &config.students {
            Some(dir) => {
                let extractor = FeatureExtractor::load(dir.join(FEATURES_FILE))?;
                let students = StudentSet::load(dir.join(STUDENTS_FILE))?;
                students.check_extractor(&extractor)?;
                Some((students, extractor))
            }
            None => None,
        };
        let sheets = match &config.sheets_dir {
            Some(dir) => load_sheets(dir)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            model,
            students,
            sheets,
            store: Mutex::new(RatingStore::open(&config.ratings)?),
            threshold: config.threshold,
            static_dir: config.static_dir.clone(),
        })
    }

    pub fn sheet(&self, id: &str) -> Option<&QuestionSheet> {
        self.sheets.get(id)
    }

    fn explainer(&self) -> std::result::Result<Explainer<'_>, ApiError> {
        let model = self.model.as_ref().ok_or_else(model_missing)?;
        let explainer = Explainer::new(model);
        Ok(match &self.students {
            Some((s, fx)) => explainer.with_students(s, fx),
            None => explainer,
        })
    }
}

fn load_sheets(dir: &Path) -> Result<BTreeMap<String, QuestionSheet>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut sheets = BTreeMap::new();
    for path in paths {
        let sheet = QuestionSheet::load(&path)?;
        if sheets.contains_key(&sheet.sheet_id) {
            return Err(Error::Config(format!("sheet id {} appears twice in {}", sheet.sheet_id, dir.display())));
        }
        sheets.insert(sheet.sheet_id.clone(), sheet);
    }
    Ok(sheets)
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/predict", post(predict))
        .route("/api/explain", post(explain))
        .route("/api/sheets/{id}", get(get_sheet))
        .route("/api/sheets/{id}/ratings", post(post_rating))
        .route("/api/sheets/{id}/consistency", get(consistency))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES));
    let api = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn model_missing() -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model is loaded")
}

fn parse_body<T: DeserializeOwned>(
    body: std::result::Result<Bytes, BytesRejection>,
) -> std::result::Result<T, ApiError> {
    let body = body.map_err(|r| {
        let status = r.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "too_large" } else { "invalid_body" };
        ApiError::new(status, code, r.body_text())
    })?;
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::bad_request("empty_body", "request body is empty"));
    }
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))
}

fn check_text(text: &str) -> std::result::Result<(), ApiError> {
    if text.trim().is_empty() {
        return Err(ApiError::bad_request("empty_text", "text must not be empty"));
    }
    if text.len() > MAX_TEXT_BYTES {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_large",
            format!("text is {} bytes, limit is {MAX_TEXT_BYTES}", text.len()),
        ));
    }
    Ok(())
}

async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> std::result::Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> std::result::Result<T, ApiError> + Send + 'static,
{
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || f(&state)).await.map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Serialize)]
struct Health {
    model_loaded: bool,
    students_loaded: bool,
    sheets: Vec<String>,
    threshold: f64,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        model_loaded: state.model.is_some(),
        students_loaded: state.students.is_some(),
        sheets: state.sheets.keys().cloned().collect(),
        threshold: state.threshold,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    text: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedCode {
    pub code: String,
    pub title: String,
    pub prob: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub codes: Vec<PredictedCode>,
    pub threshold: f64,
}

async fn predict(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Bytes, BytesRejection>,
) -> ApiResult<PredictResponse> {
    let req: PredictRequest = parse_body(body)?;
    check_text(&req.text)?;
    blocking(&state, move |state| {
        let model = state.model.as_ref().ok_or_else(model_missing)?;
        let prediction = model.predict(&req.text)?;
        let mut codes: Vec<(usize, f64)> = predict_codes(&prediction.probabilities, state.threshold)
            .into_iter()
            .map(|l| (l, prediction.probabilities[l]))
            .collect();
        codes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Json(PredictResponse {
            codes: codes
                .into_iter()
                .map(|(l, prob)| {
                    let entry = model.codes.get(l);
                    PredictedCode { code: entry.code.clone(), title: entry.title.clone(), prob }
                })
                .collect(),
            threshold: state.threshold,
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainRequest {
    text: String,
    code: String,
    method: String,
    #[serde(default)]
    note_id: Option<String>,
    #[serde(default)]
    top_n: Option<usize>,
    #[serde(default)]
    window: Option<usize>,
}

async fn explain(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Bytes, BytesRejection>,
) -> ApiResult<ExplanationSet> {
    let req: ExplainRequest = parse_body(body)?;
    let method: Method =
        req.method.parse().map_err(|e: Error| ApiError::bad_request("unknown_method", e.to_string()))?;
    check_text(&req.text)?;
    blocking(&state, move |state| {
        let explainer = state.explainer()?;
        if !explainer.model.codes.contains(&req.code) {
            return Err(ApiError::not_found("unknown_code", format!("unknown code {}", req.code)));
        }
        if !explainer.supports(method) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "students_not_loaded",
                "kd explanations need distilled students",
            ));
        }
        let explainer = Explainer {
            top_n: req.top_n.unwrap_or(DEFAULT_TOP_N),
            window: req.window.unwrap_or(DEFAULT_WINDOW),
            ..explainer
        };
        let note_id = req.note_id.as_deref().unwrap_or("request");
        Ok(Json(explainer.explain(note_id, &req.text, &req.code, method)?))
    })
    .await
}

fn find_sheet<'a>(state: &'a AppState, id: &str) -> std::result::Result<&'a QuestionSheet, ApiError> {
    state.sheet(id).ok_or_else(|| ApiError::not_found("unknown_sheet", format!("no sheet {id}")))
}

async fn get_sheet(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<BlindedSheet> {
    Ok(Json(find_sheet(&state, &id)?.blinded()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingRequest {
    annotator_id: String,
    group: String,
    item_id: String,
    rating: String,
    #[serde(default)]
    overwrite: bool,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingResponse {
    pub record: RatingRecord,
    pub replaced: Option<RatingRecord>,
}

async fn post_rating(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Bytes, BytesRejection>,
) -> ApiResult<RatingResponse> {
    let req: RatingRequest = parse_body(body)?;
    let sheet = find_sheet(&state, &id)?;
    if sheet.item(&req.item_id).is_none() {
        return Err(ApiError::not_found("unknown_item", format!("sheet {id} has no item {}", req.item_id)));
    }
    let invalid = |code, e: Error| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string());
    let rating: Rating = req.rating.parse().map_err(|e| invalid("invalid_rating", e))?;
    let group: Group = req.group.parse().map_err(|e| invalid("invalid_group", e))?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    let record =
        RatingRecord { sheet_id: id, item_id: req.item_id, annotator_id: req.annotator_id, group, rating, timestamp };
    let overwrite = req.overwrite;
    blocking(&state, move |state| {
        let mut store = state.store.lock().map_err(|_| ApiError::internal("rating store lock poisoned"))?;
        let replaced = store.submit(record.clone(), overwrite)?;
        Ok(Json(RatingResponse { record, replaced }))
    })
    .await
}

async fn consistency(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<ConsistencyReport> {
    find_sheet(&state, &id)?;
    blocking(&state, move |state| {
        let sheet = find_sheet(state, &id)?;
        let snapshot =
            state.store.lock().map_err(|_| ApiError::internal("rating store lock poisoned"))?.current_for(&id);
        Ok(Json(inter_group_consistency(&snapshot, Group::A, Group::B, &sheet.methods())?))
    })
    .await
}
