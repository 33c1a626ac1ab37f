//! HTTP+JSON front end: sessions hold a dialogue history, every user message
//! is answered with genre preferences, a top-k list and an explanation.
//!
//! Endpoints:
//!
//! | method | path                          | body                              |
//! |--------|-------------------------------|-----------------------------------|
//! | POST   | `/sessions`                   | none                              |
//! | POST   | `/sessions/{id}/messages`     | `{"text", "sender"?, "k"?}`       |
//! | POST   | `/sessions/{id}/system-turns` | `{"text"?, "accepted_item"?}`     |
//! | GET    | `/sessions/{id}`              | none                              |
//! | DELETE | `/sessions/{id}`              | none                              |
//! | GET    | `/health`                     | none                              |

pub mod config;
pub mod store;

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use catrec::catalog::Catalog;
use catrec::corpus::{Sender, Utterance};
use catrec::model::{NamedPreference, RankedItem};
use catrec::AnyRecommender;

pub use config::ServiceConfig;
pub use store::{SessionStore, StoreFull};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] catrec::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared, read-only model plus the session store.
pub struct AppState {
    pub model: Arc<AnyRecommender>,
    pub sessions: SessionStore,
    pub default_k: usize,
    pub retry_after_secs: u64,
}

impl AppState {
    pub fn new(model: AnyRecommender, cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        if !model.has_preference_model() {
            return Err(ServiceError::Config(
                "an oracle checkpoint cannot serve dialogue turns; it has no preference model".into(),
            ));
        }
        Ok(Self {
            model: Arc::new(model),
            sessions: SessionStore::new(cfg.ttl(), cfg.max_sessions),
            default_k: cfg.k,
            retry_after_secs: cfg.retry_after_secs,
        })
    }

    /// Loads catalog and checkpoint named in `cfg`.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let catalog = Catalog::load(&cfg.catalog)?;
        let model = AnyRecommender::load(&cfg.checkpoint, catalog)?;
        Self::new(model, cfg)
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

/// An error answer: status plus a JSON `{"error": ...}` body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            retry_after: None,
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(ErrorBody { error: self.message })).into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
    #[serde(default)]
    pub sender: Option<Sender>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session_id: String,
    pub history_length: usize,
    pub cat_pref: Vec<NamedPreference>,
    pub top_k: Vec<RankedItem>,
    pub explanation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemTurnRequest {
    #[serde(default)]
    pub text: String,
    /// Catalog index of the item the user took up.
    #[serde(default)]
    pub accepted_item: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub history_length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub history: Vec<Utterance>,
    /// Unix seconds.
    pub created_at: u64,
    pub last_active: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub mode: String,
    pub items: usize,
    pub categories: usize,
    pub sessions: usize,
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/system-turns", post(record_system_turn))
        .with_state(state)
}

async fn health(State(st): State<Shared>) -> Json<Health> {
    let catalog = st.model.catalog();
    Json(Health {
        status: "ok".into(),
        mode: st.model.mode().to_string(),
        items: catalog.len(),
        categories: catalog.vocabulary().len(),
        sessions: st.sessions.len(),
    })
}

async fn create_session(State(st): State<Shared>) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    match st.sessions.create() {
        Ok(id) => Ok((StatusCode::CREATED, Json(CreatedSession { session_id: id }))),
        Err(StoreFull) => Err(ApiError {
            retry_after: Some(st.retry_after_secs),
            ..ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "session capacity reached; retry later")
        }),
    }
}

async fn get_session(State(st): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = st.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let s = session.lock().await;
    Ok(Json(SessionView {
        session_id: id,
        history: s.history.clone(),
        created_at: s.created_at,
        last_active: s.last_active,
    }))
}

async fn delete_session(State(st): State<Shared>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if st.sessions.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(&id))
    }
}

async fn post_message(
    State(st): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Json<TurnResponse>, ApiError> {
    let Json(req) = body?;
    if req.text.trim().is_empty() {
        return Err(ApiError::invalid("text must not be empty"));
    }
    let k = req.k.unwrap_or(st.default_k);
    if k == 0 {
        return Err(ApiError::invalid("k must be at least 1"));
    }
    let session = st.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    // Held across inference so posts to one session are answered in order.
    let mut s = session.lock().await;
    let mut history = s.history.clone();
    history.push(Utterance::new(req.sender.unwrap_or(Sender::Seeker), req.text));
    let model = st.model.clone();
    let (history, turn) = tokio::task::spawn_blocking(move || {
        let turn = model.respond(&history, k);
        (history, turn)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let turn = turn.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    s.history = history;
    s.touch();
    Ok(Json(TurnResponse {
        session_id: id,
        history_length: s.history.len(),
        cat_pref: turn.cat_pref,
        top_k: turn.top_k,
        explanation: turn.explanation,
    }))
}

async fn record_system_turn(
    State(st): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<SystemTurnRequest>, JsonRejection>,
) -> Result<Json<Ack>, ApiError> {
    let Json(req) = body?;
    let mut text = req.text.trim().to_string();
    if let Some(idx) = req.accepted_item {
        let item = st
            .model
            .catalog()
            .item(idx)
            .ok_or_else(|| ApiError::invalid(format!("no item with index {idx}")))?;
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&format!("@{}", item.redial_id));
    }
    if text.is_empty() {
        return Err(ApiError::invalid("a system turn needs text or an accepted item"));
    }
    let session = st.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let mut s = session.lock().await;
    s.history.push(Utterance::recommender(text));
    s.touch();
    Ok(Json(Ack {
        session_id: id,
        history_length: s.history.len(),
    }))
}

/// Binds and serves until Ctrl-C, evicting idle sessions in the background.
pub async fn serve(state: AppState, host: &str, port: u16) -> Result<(), ServiceError> {
    let state = Arc::new(state);
    let sweeper = {
        let st = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(60));
            loop {
                tick.tick().await;
                let n = st.sessions.evict_expired();
                if n > 0 {
                    log::info!("evicted {n} idle sessions");
                }
            }
        })
    };
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    sweeper.abort();
    Ok(())
}
