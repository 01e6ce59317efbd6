//! Event bus to WebSocket fan-out.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use pulsectl::clock::ClockBroadcast;
use pulsectl::eventbus::{names, BusError, BusEvent, Connection};

/// Names forwarded to WebSocket clients.
pub const BRIDGED: [&str; 4] = [names::SEQ_STATE, names::SHOT_DONE, names::CLOCK, names::TREE_WRITE];

/// Per-client backlog before the client is dropped.
pub const WS_QUEUE_CAP: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WsEnvelope {
    pub kind: String,
    pub payload: Value,
    /// Gateway receive time, microseconds since the Unix epoch.
    pub t_us: u64,
}

pub fn wall_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

fn shot_or_null(s: &str) -> Value {
    s.parse::<u32>().map(Value::from).unwrap_or(Value::Null)
}

/// Decoded form of a bus payload. Unknown shapes fall back to the raw text.
pub fn decode_payload(kind: &str, raw: &[u8]) -> Value {
    let text = String::from_utf8_lossy(raw);
    match kind {
        names::SEQ_STATE => match text.split_once(':') {
            Some((state, shot)) => json!({ "state": state, "shot": shot_or_null(shot) }),
            None => Value::from(text.as_ref()),
        },
        names::SHOT_DONE => json!({ "shot": shot_or_null(text.trim()) }),
        names::TREE_WRITE => match text.split_once(':') {
            Some((shot, path)) => json!({ "shot": shot_or_null(shot), "path": path }),
            None => Value::from(text.as_ref()),
        },
        names::CLOCK => match ClockBroadcast::parse_payload(raw) {
            Ok((code, abs_us)) => json!({ "code": code, "abs_us": abs_us }),
            Err(_) => Value::Null,
        },
        _ => Value::from(text.as_ref()),
    }
}

pub fn envelope(ev: &BusEvent) -> WsEnvelope {
    let kind = ev.name.as_str().to_string();
    WsEnvelope {
        payload: decode_payload(&kind, &ev.payload),
        kind,
        t_us: wall_us(),
    }
}

/// Reader thread that forwards bridged bus events into a broadcast channel.
pub struct Bridge {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Bridge {
    pub fn start(conn: Connection, tx: broadcast::Sender<Arc<str>>) -> Result<Self, BusError> {
        for name in BRIDGED {
            conn.subscribe(name)?;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let s = stop.clone();
        let thread = std::thread::Builder::new()
            .name("ws-bridge".into())
            .spawn(move || {
                while !s.load(Ordering::SeqCst) {
                    match conn.next_event(100_000) {
                        Ok(ev) => {
                            let text = serde_json::to_string(&envelope(&ev)).expect("envelope serializes");
                            // No receivers is fine.
                            let _ = tx.send(text.into());
                        }
                        Err(BusError::Timeout) => {}
                        Err(e) => {
                            log::error!("event bridge stopped: {e}");
                            return;
                        }
                    }
                }
            })
            .expect("spawn bridge thread");
        Ok(Bridge {
            stop,
            thread: Some(thread),
        })
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payloads_decode() {
        assert_eq!(
            decode_payload(names::SEQ_STATE, b"ARMED:3"),
            json!({"state": "ARMED", "shot": 3})
        );
        assert_eq!(
            decode_payload(names::SEQ_STATE, b"IDLE:-"),
            json!({"state": "IDLE", "shot": null})
        );
        assert_eq!(decode_payload(names::SHOT_DONE, b"12"), json!({"shot": 12}));
        assert_eq!(
            decode_payload(names::TREE_WRITE, b"4:\\TOP.RTCTRL.Z"),
            json!({"shot": 4, "path": "\\TOP.RTCTRL.Z"})
        );
        let mut clock = vec![pulsectl::clock::encode_event(2).unwrap()];
        clock.extend_from_slice(&1_000_000u64.to_le_bytes());
        assert_eq!(decode_payload(names::CLOCK, &clock), json!({"code": 2, "abs_us": 1_000_000}));
        assert_eq!(decode_payload(names::CLOCK, b"x"), Value::Null);
    }
}
