//! Broker-based publish/subscribe messaging over TCP.
//!
//! A single [`broker`] process routes named events between any number of
//! client [`Connection`]s. Every client opens with a `HELLO` exchange, then
//! subscribes to event names and posts payloads. The broker forwards one
//! `EVENT` frame to each current subscriber of the posted name.
//!
//! Delivery is at-most-once with no persistence: a connection that is not
//! subscribed when an event is posted never sees it, and nothing is replayed
//! on reconnect. Each connection's outbound queue is bounded; a consumer that
//! falls behind by more than [`DEFAULT_QUEUE_CAP`] events is disconnected
//! with an `ERROR` frame.

mod broker;
mod client;
mod frame;

use std::fmt;
use std::io;
use std::str::FromStr;
use std::sync::Mutex;

pub use broker::{start_broker, start_broker_with, BrokerConfig, BrokerHandle, BrokerStats};
pub use client::Connection;
pub use frame::{Frame, FrameError, MsgType, MAX_BODY, MAX_PAYLOAD};

/// Default broker TCP port.
pub const DEFAULT_PORT: u16 = 5610;
/// Per-connection outbound queue limit before a slow consumer is dropped.
pub const DEFAULT_QUEUE_CAP: usize = 1024;
/// Protocol identifier carried in both directions of the `HELLO` exchange.
pub const HELLO_PAYLOAD: &[u8] = b"PULSEBUS/1";

/// Reserved event names used by the rest of the stack.
pub mod names {
    pub const CLOCK: &str = "CLOCK";
    pub const SEQ_STATE: &str = "SEQ_STATE";
    pub const SHOT_DONE: &str = "SHOT_DONE";
    pub const TREE_WRITE: &str = "TREE_WRITE";
}

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("invalid event name {0:?}: expected 1-32 chars of [A-Z0-9_]")]
    BadName(String),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
    #[error("cannot bind broker to {addr}: {source}")]
    BindFailed { addr: String, source: io::Error },
    #[error("cannot connect to broker at {addr}: {source}")]
    ConnectFailed { addr: String, source: io::Error },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("timed out waiting for an event")]
    Timeout,
    #[error("connection closed")]
    Disconnected,
}

impl From<FrameError> for BusError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Eof | FrameError::Io(_) => BusError::Disconnected,
            other => BusError::Protocol(other.to_string()),
        }
    }
}

/// Validated bus event name: 1 to 32 characters of `[A-Z0-9_]`, stored
/// uppercase. Lowercase input is accepted and normalized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventName(String);

impl EventName {
    pub const MAX_LEN: usize = 32;

    pub fn new(raw: &str) -> Result<Self, BusError> {
        let upper = raw.to_ascii_uppercase();
        let ok = !upper.is_empty()
            && upper.len() <= Self::MAX_LEN
            && upper
                .bytes()
                .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_');
        if ok {
            Ok(EventName(upper))
        } else {
            Err(BusError::BadName(raw.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for EventName {
    type Err = BusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventName::new(s)
    }
}

impl fmt::Display for EventName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for EventName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// An event as received by a subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusEvent {
    pub name: EventName,
    pub payload: Vec<u8>,
}

impl BusEvent {
    pub fn payload_text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

/// Anything events can be posted into. Implemented by live bus
/// [`Connection`]s and by the in-memory [`RecordingSink`].
pub trait EventSink: Send + Sync {
    fn post_event(&self, name: &EventName, payload: &[u8]) -> Result<(), BusError>;
}

/// In-process sink that keeps every posted event, in order.
#[derive(Debug, Default)]
pub struct RecordingSink {
    events: Mutex<Vec<BusEvent>>,
}

impl RecordingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<BusEvent> {
        self.events.lock().unwrap().clone()
    }

    /// Events posted under `name`, payloads decoded as UTF-8.
    pub fn texts(&self, name: &str) -> Vec<String> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.name.as_str() == name)
            .map(BusEvent::payload_text)
            .collect()
    }

    pub fn count(&self, name: &str) -> usize {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.name.as_str() == name)
            .count()
    }
}

impl EventSink for RecordingSink {
    fn post_event(&self, name: &EventName, payload: &[u8]) -> Result<(), BusError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(BusError::PayloadTooLarge(payload.len()));
        }
        self.events.lock().unwrap().push(BusEvent {
            name: name.clone(),
            payload: payload.to_vec(),
        });
        Ok(())
    }
}

/// Posts to a fixed-name event on an optional sink, logging failures.
/// Used by components for which a lost notification must not fail the
/// underlying operation.
pub(crate) fn notify(sink: Option<&dyn EventSink>, name: &str, payload: &[u8]) {
    if let Some(sink) = sink {
        let name = EventName::new(name).expect("reserved event name");
        if let Err(e) = sink.post_event(&name, payload) {
            log::warn!("failed to post {name}: {e}");
        }
    }
}
