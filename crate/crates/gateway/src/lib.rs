//! HTTP + WebSocket front end for a live sequencer, its shot store and the
//! event stream.
//!
//! Read endpoints need nothing; mutating ones need the `X-Auth-Token` header.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/state` | `{"state","shot"}` |
//! | GET | `/api/shots` | shot numbers on disk |
//! | GET | `/api/shot/{n}/nodes` | `[{path, usage, has_data}]` |
//! | GET | `/api/shot/{n}/signal?path=P` | `{path, units, t_us[], v[]}` |
//! | GET | `/api/logbook[?shot=n]` | entries in id order |
//! | POST | `/api/logbook` | `{shot, author?, body}` (token) |
//! | GET | `/api/engineering` | static scale figures |
//! | POST | `/api/shot/configure` | shot config JSON (token) |
//! | POST | `/api/shot/arm`, `trigger`, `abort` | (token) |
//! | GET | `/api/events` | WebSocket of `{kind, payload, t_us}` envelopes |

mod api;
pub mod bridge;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{broadcast, oneshot};
use tokio::task::JoinHandle;

use pulsectl::eventbus::{BusError, Connection};
use pulsectl::sequencer::{Sequencer, SequencerService};
use pulsectl::shottree::{ShotStore, TreeError};

pub use bridge::{WsEnvelope, BRIDGED, WS_QUEUE_CAP};

pub const DEFAULT_PORT: u16 = 8080;
pub const TOKEN_HEADER: &str = "x-auth-token";
pub const HEARTBEAT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub bind: String,
    pub token: String,
    pub store: PathBuf,
    pub broker: String,
    /// Multiple of real time for the simulation; `None` runs unpaced.
    pub speed: Option<f64>,
    pub heartbeat: Duration,
}

impl GatewayConfig {
    pub fn new(store: impl Into<PathBuf>, broker: impl Into<String>, token: impl Into<String>) -> Self {
        GatewayConfig {
            bind: format!("127.0.0.1:{DEFAULT_PORT}"),
            token: token.into(),
            store: store.into(),
            broker: broker.into(),
            speed: None,
            heartbeat: HEARTBEAT,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    BindFailed {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(#[from] BusError),
    #[error("store: {0}")]
    Store(#[from] TreeError),
    #[error("empty API token")]
    EmptyToken,
}

pub(crate) struct AppState {
    pub seq: SequencerService,
    pub store: ShotStore,
    pub token: String,
    pub events: broadcast::Sender<Arc<str>>,
    pub heartbeat: Duration,
}

/// A running gateway. Dropping it without [`Gateway::shutdown`] aborts the
/// server task.
pub struct Gateway {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
    _bridge: bridge::Bridge,
}

impl Gateway {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.task.take() {
            // Open WebSockets would hold graceful shutdown forever.
            let abort = t.abort_handle();
            if tokio::time::timeout(Duration::from_secs(2), t).await.is_err() {
                abort.abort();
            }
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        if let Some(t) = self.task.take() {
            t.abort();
        }
    }
}

/// Connects to the broker, starts a sequencer service on `config.store` and
/// serves the API.
pub async fn serve(config: GatewayConfig) -> Result<Gateway, GatewayError> {
    if config.token.is_empty() {
        return Err(GatewayError::EmptyToken);
    }
    let store = ShotStore::open(&config.store)?;
    let broker = config.broker.clone();
    let (poster, listener_conn) = tokio::task::spawn_blocking(move || {
        Ok::<_, BusError>((Connection::connect(broker.as_str())?, Connection::connect(broker.as_str())?))
    })
    .await
    .expect("connect task")?;

    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .map_err(|source| GatewayError::BindFailed {
            addr: config.bind.clone(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| GatewayError::BindFailed {
        addr: config.bind.clone(),
        source,
    })?;

    let (tx, _) = broadcast::channel(WS_QUEUE_CAP);
    let bridge = bridge::Bridge::start(listener_conn, tx.clone())?;
    let seq = Sequencer::new(store.clone()).with_events(Arc::new(poster));
    let state = Arc::new(AppState {
        seq: SequencerService::spawn(seq, config.speed),
        store,
        token: config.token.clone(),
        events: tx,
        heartbeat: config.heartbeat,
    });

    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let app = api::router(state);
    let task = tokio::spawn(async move {
        let res = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await;
        if let Err(e) = res {
            log::error!("gateway server failed: {e}");
        }
    });
    log::info!("gateway listening on {addr}");
    Ok(Gateway {
        addr,
        stop: Some(stop_tx),
        task: Some(task),
        _bridge: bridge,
    })
}
