//! JSON-over-HTTP front end for generation and polishing.
//!
//! Endpoints: `POST /generate`, `POST /polish`, `GET /health`. Each request
//! runs against one shared, immutable model snapshot, so responses depend
//! only on the request body (apart from `request_id`).

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rigidverse::corpus::{PunctSet, Vocab};
use rigidverse::decoding::{DecodeConfig, Generator, Strategy};
use rigidverse::format::{global_index, parse_format, SlotPos};
use rigidverse::model::Model;
use rigidverse::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub struct AppState {
    pub model: Model,
    pub vocab: Vocab,
    pub punct: PunctSet,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: Model, vocab: Vocab, punct: PunctSet) -> Self {
        Self {
            model,
            vocab,
            punct,
            next_id: AtomicU64::new(1),
        }
    }

    fn request_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhymeSlot {
    pub line: usize,
    pub index: usize,
    pub group: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GenerateRequest {
    pub format_dsl: String,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub hard_constrain: Option<bool>,
    /// `beam_width` switches to beam search.
    pub beam_width: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PolishRequest {
    pub tokens: Vec<Vec<String>>,
    /// `(line, index)` pairs to keep.
    #[serde(default)]
    pub locks: Vec<(usize, usize)>,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub rhyme_slots: Vec<RhymeSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub tokens: Vec<Vec<String>>,
    pub rhyme_slots: Vec<RhymeSlot>,
    pub request_id: u64,
}

/// An error body with its status code.
#[derive(Debug)]
pub struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::FormatParse { line, column, .. } => {
                ApiError(StatusCode::BAD_REQUEST, json!({"error": msg, "line": line, "column": column}))
            }
            Error::UnknownFixedTokens { tokens } => {
                ApiError(StatusCode::UNPROCESSABLE_ENTITY, json!({"error": msg, "tokens": tokens}))
            }
            Error::InvalidLock(_) | Error::Config(_) | Error::LineTooLong { .. } | Error::TooManyLines { .. } => {
                ApiError(StatusCode::BAD_REQUEST, json!({"error": msg}))
            }
            Error::SequenceTooLong { .. } => ApiError(StatusCode::UNPROCESSABLE_ENTITY, json!({"error": msg})),
            _ => ApiError(StatusCode::INTERNAL_SERVER_ERROR, json!({"error": msg})),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, json!({"error": r.body_text()}))
    }
}

fn decode_config(
    k: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
    hard: Option<bool>,
    beam: Option<usize>,
) -> DecodeConfig {
    let d = DecodeConfig::default();
    DecodeConfig {
        strategy: if beam.is_some() { Strategy::Beam } else { Strategy::TopK },
        k: k.unwrap_or(d.k),
        temperature: temperature.unwrap_or(d.temperature),
        beam_width: beam.unwrap_or(d.beam_width),
        seed: seed.unwrap_or(d.seed),
        hard_constrain: hard.unwrap_or(d.hard_constrain),
        ..d
    }
}

fn slots_of(groups: &BTreeMap<String, Vec<SlotPos>>) -> Vec<RhymeSlot> {
    let mut out: Vec<RhymeSlot> = groups
        .iter()
        .flat_map(|(g, ps)| {
            ps.iter().map(move |&(line, index)| RhymeSlot {
                line,
                index,
                group: g.clone(),
            })
        })
        .collect();
    out.sort_by_key(|s| (s.line, s.index));
    out
}

pub fn generate(state: &AppState, req: &GenerateRequest) -> Result<GenerateResponse, ApiError> {
    let spec = parse_format(&req.format_dsl)?;
    let cfg = decode_config(req.k, req.temperature, req.seed, req.hard_constrain, req.beam_width);
    cfg.validate()?;
    let gen = Generator::new(&state.model, &state.vocab, state.punct.clone());
    let tokens = gen.generate(&spec, &cfg)?;
    Ok(GenerateResponse {
        tokens,
        rhyme_slots: slots_of(&spec.rhyme_groups()),
        request_id: state.request_id(),
    })
}

pub fn polish(state: &AppState, req: &PolishRequest) -> Result<GenerateResponse, ApiError> {
    let lens: Vec<usize> = req.tokens.iter().map(Vec::len).collect();
    let mut lock = BTreeSet::new();
    for &(line, index) in &req.locks {
        if lens.get(line).is_none_or(|&n| index >= n) {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                json!({"error": format!("lock ({line}, {index}) is outside the tokens"), "line": line, "index": index}),
            ));
        }
        lock.insert(global_index(&lens, (line, index)));
    }
    let rhyme: BTreeMap<SlotPos, String> =
        req.rhyme_slots.iter().map(|s| ((s.line, s.index), s.group.clone())).collect();
    let cfg = decode_config(req.k, req.temperature, req.seed, Some(true), None);
    cfg.validate()?;
    let gen = Generator::new(&state.model, &state.vocab, state.punct.clone());
    let tokens = gen.polish(&req.tokens, &lock, &rhyme, &cfg)?;
    let mut groups: BTreeMap<String, Vec<SlotPos>> = BTreeMap::new();
    for (pos, g) in rhyme {
        groups.entry(g).or_default().push(pos);
    }
    Ok(GenerateResponse {
        tokens,
        rhyme_slots: slots_of(&groups),
        request_id: state.request_id(),
    })
}

async fn generate_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let Json(req) = body?;
    blocking(state, move |s| generate(s, &req)).await
}

async fn polish_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Json<PolishRequest>, JsonRejection>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let Json(req) = body?;
    blocking(state, move |s| polish(s, &req)).await
}

/// Runs CPU-bound decoding off the async workers.
async fn blocking<F>(state: Arc<AppState>, f: F) -> Result<Json<GenerateResponse>, ApiError>
where
    F: FnOnce(&AppState) -> Result<GenerateResponse, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, json!({"error": e.to_string()})))?
        .map(Json)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "vocab_size": state.vocab.len(),
        "parameters": state.model.num_parameters(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/generate", post(generate_handler))
        .route("/polish", post(polish_handler))
        .route("/health", get(health))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
