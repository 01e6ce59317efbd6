use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use pulsectl::eventbus::names;
use pulsectl::sequencer::{state_payload, SeqError, ShotConfigDoc};
use pulsectl::shottree::{NewLogEntry, TreeError, Usage};

use crate::bridge::{decode_payload, wall_us, WsEnvelope};
use crate::{AppState, TOKEN_HEADER};

type Shared = Arc<AppState>;

#[derive(Debug)]
pub(crate) struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.kind, "message": self.message }));
        (self.status, body).into_response()
    }
}

impl From<SeqError> for ApiError {
    fn from(e: SeqError) -> Self {
        let status = match e {
            SeqError::WrongState { .. } => StatusCode::CONFLICT,
            SeqError::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SeqError::Stopped => StatusCode::SERVICE_UNAVAILABLE,
            SeqError::Storage(_) | SeqError::Clock(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl From<TreeError> for ApiError {
    fn from(e: TreeError) -> Self {
        let (status, kind) = match e {
            TreeError::NoSuchShot(_) => (StatusCode::NOT_FOUND, "NoSuchShot"),
            TreeError::NoSuchNode(_) => (StatusCode::NOT_FOUND, "NoSuchNode"),
            TreeError::NoData(_) | TreeError::UsageMismatch { .. } => (StatusCode::NOT_FOUND, "NoData"),
            TreeError::BadPath(_) => (StatusCode::BAD_REQUEST, "BadPath"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "StorageError"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

fn authorize(st: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) {
        Some(t) if t == st.token => Ok(()),
        Some(_) => Err(ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "bad token")),
        None => Err(ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing X-Auth-Token")),
    }
}

pub(crate) fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/shots", get(get_shots))
        .route("/api/shot/{n}/nodes", get(get_nodes))
        .route("/api/shot/{n}/signal", get(get_signal))
        .route("/api/logbook", get(get_logbook).post(post_logbook))
        .route("/api/engineering", get(get_engineering))
        .route("/api/shot/configure", post(configure))
        .route("/api/shot/arm", post(arm))
        .route("/api/shot/trigger", post(trigger))
        .route("/api/shot/abort", post(abort))
        .route("/api/events", get(events))
        .with_state(state)
}

#[derive(Debug, Serialize)]
struct StateBody {
    state: pulsectl::sequencer::SeqState,
    shot: Option<u32>,
}

fn state_body(st: &AppState) -> StateBody {
    let (state, shot) = st.seq.state();
    StateBody { state, shot }
}

async fn get_state(State(st): State<Shared>) -> Json<StateBody> {
    Json(state_body(&st))
}

async fn get_shots(State(st): State<Shared>) -> ApiResult<Json<Vec<u32>>> {
    blocking(move || Ok(Json(st.store.list_shots()?))).await
}

#[derive(Debug, Serialize)]
struct NodeBody {
    path: String,
    usage: Usage,
    has_data: bool,
}

async fn get_nodes(State(st): State<Shared>, Path(n): Path<u32>) -> ApiResult<Json<Vec<NodeBody>>> {
    blocking(move || {
        let tree = st.store.open_shot(n)?;
        let nodes = tree
            .walk("**")
            .into_iter()
            .map(|p| {
                Ok(NodeBody {
                    usage: tree.usage(&p)?,
                    has_data: tree.has_data(&p),
                    path: p.to_string(),
                })
            })
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(Json(nodes))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct SignalQuery {
    path: String,
}

#[derive(Debug, Serialize)]
struct SignalBody {
    path: String,
    units: String,
    t_us: Vec<i64>,
    v: Vec<f64>,
}

async fn get_signal(
    State(st): State<Shared>,
    Path(n): Path<u32>,
    Query(q): Query<SignalQuery>,
) -> ApiResult<Json<SignalBody>> {
    blocking(move || {
        let tree = st.store.open_shot(n)?;
        let path = pulsectl::shottree::NodePath::parse(&q.path)?;
        let sig = tree.get_signal(&path)?;
        Ok(Json(SignalBody {
            path: path.to_string(),
            units: sig.units.clone(),
            t_us: sig.timebase.times(),
            v: sig.samples.clone(),
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct LogQuery {
    shot: Option<u32>,
}

async fn get_logbook(State(st): State<Shared>, Query(q): Query<LogQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let entries = match q.shot {
            Some(n) => st.store.logbook_query(n)?,
            None => st.store.logbook_all()?,
        };
        Ok(Json(serde_json::to_value(entries).expect("entries serialize")))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogPost {
    shot: u32,
    #[serde(default)]
    author: Option<String>,
    body: String,
}

async fn post_logbook(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    authorize(&st, &headers)?;
    let req: LogPost = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidEntry", e.to_string()))?;
    if req.body.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidEntry", "empty body"));
    }
    blocking(move || {
        let entry = NewLogEntry {
            shot: req.shot,
            author: req.author.filter(|a| !a.trim().is_empty()).unwrap_or_else(|| "anonymous".into()),
            body: req.body,
            time_us: wall_us(),
        };
        let id = st.store.logbook_add(entry)?;
        let saved = st
            .store
            .logbook_query(req.shot)?
            .into_iter()
            .find(|e| e.id == id)
            .expect("entry just written");
        Ok((StatusCode::CREATED, Json(saved)).into_response())
    })
    .await
}

async fn get_engineering() -> Json<Value> {
    Json(json!({ "iocs": 3, "displays": 135, "io_points": 1500, "records": 7000 }))
}

async fn configure(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<StateBody>> {
    authorize(&st, &headers)?;
    let doc: ShotConfigDoc = if body.iter().all(u8::is_ascii_whitespace) {
        ShotConfigDoc::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidConfig", e.to_string()))?
    };
    let config = doc.resolve()?;
    blocking(move || {
        st.seq.configure(config)?;
        Ok(Json(state_body(&st)))
    })
    .await
}

async fn arm(State(st): State<Shared>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    authorize(&st, &headers)?;
    blocking(move || {
        let shot = st.seq.arm()?;
        Ok(Json(json!({ "state": st.seq.state().0, "shot": shot })))
    })
    .await
}

async fn trigger(State(st): State<Shared>, headers: HeaderMap) -> ApiResult<Json<StateBody>> {
    authorize(&st, &headers)?;
    blocking(move || {
        st.seq.trigger()?;
        Ok(Json(state_body(&st)))
    })
    .await
}

async fn abort(State(st): State<Shared>, headers: HeaderMap) -> ApiResult<Json<StateBody>> {
    authorize(&st, &headers)?;
    blocking(move || {
        st.seq.abort()?;
        Ok(Json(state_body(&st)))
    })
    .await
}

async fn events(State(st): State<Shared>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_events(st, socket))
}

fn text(env: &WsEnvelope) -> Message {
    Message::Text(serde_json::to_string(env).expect("envelope serializes").into())
}

async fn stream_events(st: Shared, mut socket: WebSocket) {
    // Subscribe before the snapshot so nothing falls in between.
    let mut rx = st.events.subscribe();
    let (state, shot) = st.seq.state();
    let raw = state_payload(state, shot);
    let snapshot = WsEnvelope {
        kind: names::SEQ_STATE.to_string(),
        payload: decode_payload(names::SEQ_STATE, raw.as_bytes()),
        t_us: wall_us(),
    };
    if socket.send(text(&snapshot)).await.is_err() {
        return;
    }
    let mut beat = tokio::time::interval(st.heartbeat);
    beat.tick().await;
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(t) => {
                    if socket.send(Message::Text(t.as_ref().into())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    log::warn!("closing slow WebSocket client ({n} envelopes behind)");
                    let _ = socket
                        .send(Message::Close(Some(CloseFrame {
                            code: 1008,
                            reason: "slow consumer".into(),
                        })))
                        .await;
                    return;
                }
                Err(RecvError::Closed) => return,
            },
            _ = beat.tick() => {
                if socket.send(Message::Ping(Bytes::new())).await.is_err() {
                    return;
                }
            }
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
