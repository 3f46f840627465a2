//! HTTP service: completions, streamed chat sessions over server-sent events,
//! and the registry listing.
//!
//! Streams carry `data: {"index", "token"}` events followed by exactly one
//! terminal event named `done` (or `error` if generation failed midway).

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tinylora::data::{render_chat_prompt, Turn};
use tinylora::infer::{self, ChatSession, FinishReason, GenParams, CHAT_STOP};
use tinylora::model::ModelRef;
use tokio::sync::mpsc;

use crate::registry::{BaseModel, ModelRegistry, RegisteredAdapter};

pub const BIND_ENV: &str = "TINYLORA_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_IDLE: Duration = Duration::from_secs(30 * 60);
const STREAM_BUFFER: usize = 16;

/// Bind address from [`BIND_ENV`], falling back to [`DEFAULT_BIND`].
pub fn bind_address() -> String {
    std::env::var(BIND_ENV).ok().filter(|s| !s.is_empty()).unwrap_or_else(|| DEFAULT_BIND.to_string())
}

struct SessionSlot {
    session: ChatSession,
    busy: bool,
    model_id: String,
    last_used: Instant,
}

pub struct AppState {
    registry: RwLock<Arc<ModelRegistry>>,
    registry_path: Option<PathBuf>,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    idle_timeout: Duration,
}

impl AppState {
    pub fn new(registry: ModelRegistry, registry_path: Option<PathBuf>) -> Self {
        Self {
            registry: RwLock::new(Arc::new(registry)),
            registry_path,
            sessions: Mutex::new(HashMap::new()),
            idle_timeout: DEFAULT_IDLE,
        }
    }

    pub fn with_idle_timeout(mut self, idle: Duration) -> Self {
        self.idle_timeout = idle;
        self
    }

    pub fn registry(&self) -> Arc<ModelRegistry> {
        self.registry.read().unwrap().clone()
    }

    /// Drops idle sessions that are not generating; returns how many.
    pub fn evict_idle(&self) -> usize {
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        let idle = self.idle_timeout;
        sessions.retain(|_, s| s.busy || s.last_used.elapsed() < idle);
        before - sessions.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }
}

#[derive(Debug, Serialize)]
pub struct FieldProblem {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Vec<FieldProblem>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }

    fn bad_request(fields: Vec<FieldProblem>) -> Self {
        let message = fields
            .iter()
            .map(|f| format!("{}: {}", f.field, f.message))
            .collect::<Vec<_>>()
            .join("; ");
        Self {
            fields,
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self::bad_request(vec![FieldProblem {
            field: field.to_string(),
            message: message.into(),
        }])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": { "code": self.code, "message": self.message, "fields": self.fields }
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub adapter_id: Option<String>,
    #[serde(default)]
    pub stream: bool,
    #[serde(skip)]
    pub params: GenParams,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub prompt: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub adapter_id: Option<String>,
    #[serde(skip)]
    pub params: GenParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerateResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenEvent {
    pub index: usize,
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DoneEvent {
    pub finish_reason: FinishReason,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub model_id: String,
    pub adapter_id: Option<String>,
    pub turns: Vec<Turn>,
    pub prompt: String,
    pub busy: bool,
}

const PARAM_FIELDS: [&str; 8] = [
    "max_new_tokens",
    "temperature",
    "top_k",
    "top_p",
    "repetition_penalty",
    "seed",
    "stop",
    "stop_sequences",
];

fn typed<T: for<'de> Deserialize<'de>>(value: serde_json::Value) -> ApiResult<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().to_string();
        let field = if path != "." {
            path
        } else {
            // unknown and missing keys are reported against the object itself
            ["unknown field `", "missing field `"]
                .iter()
                .find_map(|p| message.strip_prefix(p))
                .and_then(|rest| rest.split('`').next())
                .unwrap_or("body")
                .to_string()
        };
        ApiError::field(&field, message)
    })
}

/// Splits a JSON object into the request-specific keys (`T`) and the
/// generation parameters, reporting unknown keys and type errors per field.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<(T, GenParams)> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| ApiError::field("body", format!("malformed JSON: {e}")))?;
    let serde_json::Value::Object(obj) = value else {
        return Err(ApiError::field("body", "expected a JSON object"));
    };
    let (params, rest): (serde_json::Map<_, _>, serde_json::Map<_, _>) =
        obj.into_iter().partition(|(k, _)| PARAM_FIELDS.contains(&k.as_str()));
    let req = typed(serde_json::Value::Object(rest))?;
    let params = typed(serde_json::Value::Object(params))?;
    Ok((req, params))
}

fn check_params(params: &GenParams) -> ApiResult<()> {
    let problems = params.problems();
    if problems.is_empty() {
        return Ok(());
    }
    Err(ApiError::bad_request(
        problems
            .into_iter()
            .map(|(field, message)| FieldProblem {
                field: field.to_string(),
                message,
            })
            .collect(),
    ))
}

type Resolved = (Arc<BaseModel>, Option<Arc<RegisteredAdapter>>);

fn resolve(reg: &ModelRegistry, model_id: Option<&str>, adapter_id: Option<&str>) -> ApiResult<Resolved> {
    let adapter = match adapter_id {
        Some(id) => Some(reg.adapter(id).ok_or_else(|| ApiError::not_found("adapter", id))?),
        None => None,
    };
    let model = match (model_id, &adapter) {
        (Some(id), _) => reg.model(id).ok_or_else(|| ApiError::not_found("model", id))?,
        (None, Some(a)) => reg.model(&a.base).ok_or_else(|| ApiError::not_found("model", &a.base))?,
        (None, None) => reg.default_model().ok_or_else(|| {
            ApiError::field("model_id", "required when the registry does not hold exactly one model")
        })?,
    };
    if let Some(a) = &adapter {
        if a.base != model.id {
            return Err(ApiError::field(
                "adapter_id",
                format!("adapter {} belongs to model {}, not {}", a.id, a.base, model.id),
            ));
        }
    }
    Ok((model, adapter))
}

fn runtime_error(e: tinylora::Error) -> ApiError {
    match e {
        tinylora::Error::ContextLength { .. } => ApiError::field("prompt", e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generation_failed", other.to_string()),
    }
}

enum StreamMsg {
    Token(TokenEvent),
    Done(DoneEvent),
    Failed(String),
}

fn sse_stream(rx: mpsc::Receiver<StreamMsg>) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold((rx, false), |(mut rx, finished)| async move {
        if finished {
            return None;
        }
        let msg = rx
            .recv()
            .await
            .unwrap_or_else(|| StreamMsg::Failed("generation ended without a result".to_string()));
        let (event, last) = match msg {
            StreamMsg::Token(t) => (Event::default().json_data(t).expect("serializable"), false),
            StreamMsg::Done(d) => (Event::default().event("done").json_data(d).expect("serializable"), true),
            StreamMsg::Failed(m) => (
                Event::default().event("error").json_data(json!({ "error": m })).expect("serializable"),
                true,
            ),
        };
        Some((Ok(event), (rx, last)))
    })
}

/// Sends UTF-8-safe chunks into `tx` with consecutive indices. A dropped
/// receiver is ignored so the generation still finishes and updates state.
fn token_sender(tx: &mpsc::Sender<StreamMsg>) -> impl FnMut(&str) + '_ {
    let mut index = 0;
    move |chunk: &str| {
        if chunk.is_empty() {
            return;
        }
        let _ = tx.blocking_send(StreamMsg::Token(TokenEvent {
            index,
            token: chunk.to_string(),
        }));
        index += 1;
    }
}

async fn list_models(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(state.registry().listing())
}

async fn reload(State(state): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    let Some(path) = state.registry_path.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_registry_file", "service was started without a registry file"));
    };
    let reg = tokio::task::spawn_blocking(move || ModelRegistry::load(path))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "reload_failed", e.to_string()))?;
    let listing = reg.listing();
    *state.registry.write().unwrap() = Arc::new(reg);
    Ok(Json(listing))
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let (mut req, params): (GenerateRequest, _) = parse_body(&body)?;
    req.params = params;
    check_params(&req.params)?;
    let (model, adapter) = resolve(&state.registry(), req.model_id.as_deref(), req.adapter_id.as_deref())?;
    let started = Instant::now();
    if !req.stream {
        let out = tokio::task::spawn_blocking(move || {
            let m = ModelRef::new(&model.cfg, &model.weights).with_adapter(adapter.as_ref().map(|a| &a.adapter));
            infer::generate(m, &model.tokenizer, &req.prompt, &req.params)
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generation_failed", e.to_string()))?
        .map_err(runtime_error)?;
        return Ok(Json(GenerateResponse {
            text: out.text,
            finish_reason: out.finish_reason,
            prompt_tokens: out.prompt_tokens,
            completion_tokens: out.completion_tokens,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
        .into_response());
    }
    let (tx, rx) = mpsc::channel(STREAM_BUFFER);
    tokio::task::spawn_blocking(move || {
        let m = ModelRef::new(&model.cfg, &model.weights).with_adapter(adapter.as_ref().map(|a| &a.adapter));
        let result = infer::generate_stream(m, &model.tokenizer, &req.prompt, &req.params, token_sender(&tx));
        let _ = tx.blocking_send(match result {
            Ok(g) => StreamMsg::Done(DoneEvent {
                finish_reason: g.finish_reason,
                prompt_tokens: g.prompt_tokens,
                completion_tokens: g.completion_tokens,
                elapsed_ms: started.elapsed().as_millis() as u64,
                session_id: None,
            }),
            Err(e) => StreamMsg::Failed(e.to_string()),
        });
    });
    Ok(Sse::new(sse_stream(rx)).keep_alive(KeepAlive::default()).into_response())
}

fn new_session_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let (mut req, params): (ChatRequest, _) = parse_body(&body)?;
    req.params = params;
    check_params(&req.params)?;
    if req.session_id.as_deref() == Some("") {
        return Err(ApiError::field("session_id", "must be non-empty when given"));
    }
    let registry = state.registry();
    let session_id = req.session_id.clone().unwrap_or_else(new_session_id);

    // Claim the session (creating it on first use) before any work starts.
    let (mut session, model, adapter) = {
        let mut sessions = state.sessions.lock().unwrap();
        let existing_model = sessions.get(&session_id).map(|s| (s.busy, s.model_id.clone()));
        let model_id = match (&existing_model, req.model_id.as_deref()) {
            (Some((true, _)), _) => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "session_busy",
                    format!("session {session_id} already has a generation in flight"),
                ))
            }
            (Some((_, current)), Some(asked)) if asked != current => {
                return Err(ApiError::field(
                    "model_id",
                    format!("session {session_id} is bound to model {current}"),
                ))
            }
            (Some((_, current)), _) => Some(current.clone()),
            (None, asked) => asked.map(str::to_string),
        };
        let (model, adapter) = resolve(&registry, model_id.as_deref(), req.adapter_id.as_deref())?;
        let history = sessions.get(&session_id).map(|s| s.session.prompt_for(&req.prompt));
        let prompt = match history {
            Some(p) => p,
            None => chat_prompt(&[], &req.prompt),
        }
        .map_err(|e| ApiError::field("prompt", e.to_string()))?;
        let needed = model.tokenizer.encode(&prompt).len();
        if needed >= model.cfg.max_seq_len {
            return Err(ApiError::field(
                "prompt",
                format!("conversation needs {needed} tokens but model {} holds {}", model.id, model.cfg.max_seq_len),
            ));
        }
        let slot = sessions.entry(session_id.clone()).or_insert_with(|| SessionSlot {
            session: ChatSession::new(session_id.clone(), req.params.clone()),
            busy: false,
            model_id: model.id.clone(),
            last_used: Instant::now(),
        });
        slot.busy = true;
        slot.last_used = Instant::now();
        slot.session.params = req.params.clone();
        slot.session.adapter_id = adapter.as_ref().map(|a| a.id.clone());
        (slot.session.clone(), model, adapter)
    };

    let prompt = req.prompt;
    let started = Instant::now();
    let (tx, rx) = mpsc::channel(STREAM_BUFFER);
    let state2 = state.clone();
    tokio::task::spawn_blocking(move || {
        let m = ModelRef::new(&model.cfg, &model.weights).with_adapter(adapter.as_ref().map(|a| &a.adapter));
        let result = infer::chat_step(&mut session, m, &model.tokenizer, &prompt, token_sender(&tx));
        {
            let mut sessions = state2.sessions.lock().unwrap();
            if let Some(slot) = sessions.get_mut(&session.id) {
                slot.busy = false;
                slot.last_used = Instant::now();
                if result.is_ok() {
                    slot.session = session.clone();
                }
            }
        }
        let _ = tx.blocking_send(match result {
            Ok(g) => StreamMsg::Done(DoneEvent {
                finish_reason: g.finish_reason,
                prompt_tokens: g.prompt_tokens,
                completion_tokens: g.completion_tokens,
                elapsed_ms: started.elapsed().as_millis() as u64,
                session_id: Some(session.id.clone()),
            }),
            Err(e) => StreamMsg::Failed(e.to_string()),
        });
    });
    Ok(Sse::new(sse_stream(rx)).keep_alive(KeepAlive::default()).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let sessions = state.sessions.lock().unwrap();
    let slot = sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    let turns = slot.session.turns().to_vec();
    Ok(Json(SessionView {
        session_id: id.clone(),
        model_id: slot.model_id.clone(),
        adapter_id: slot.session.adapter_id.clone(),
        prompt: render_chat_prompt(&turns).unwrap_or_default(),
        turns,
        busy: slot.busy,
    }))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let mut sessions = state.sessions.lock().unwrap();
    match sessions.get(&id) {
        None => Err(ApiError::not_found("session", &id)),
        Some(s) if s.busy => Err(ApiError::new(
            StatusCode::CONFLICT,
            "session_busy",
            format!("session {id} has a generation in flight"),
        )),
        Some(_) => {
            sessions.remove(&id);
            Ok(StatusCode::NO_CONTENT)
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/models", get(list_models))
        .route("/v1/reload", post(reload))
        .route("/v1/generate", post(generate))
        .route("/v1/chat", post(chat))
        .route("/v1/chat/{id}", get(get_session).delete(delete_session))
        .with_state(state)
}

/// Serves until `shutdown` resolves, evicting idle sessions once a minute.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = state.clone();
    let evict = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60).min(sweeper.idle_timeout));
        loop {
            tick.tick().await;
            sweeper.evict_idle();
        }
    });
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    evict.abort();
    result
}

/// Prompt that a chat session with these turns hands to the decoder.
pub fn chat_prompt(turns: &[Turn], user_text: &str) -> tinylora::Result<String> {
    let mut t = turns.to_vec();
    t.push(Turn::user(user_text));
    render_chat_prompt(&t)
}

/// Parameters `/v1/chat` actually decodes with for `params`.
pub fn chat_params(params: &GenParams) -> GenParams {
    let mut p = params.clone();
    if !p.stop_sequences.iter().any(|s| s == CHAT_STOP) {
        p.stop_sequences.push(CHAT_STOP.to_string());
    }
    p
}
