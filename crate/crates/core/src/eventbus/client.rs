use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::frame::{Frame, FrameError, MsgType, MAX_PAYLOAD};
use super::{BusError, BusEvent, EventName, EventSink, HELLO_PAYLOAD};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const SYNC_TIMEOUT: Duration = Duration::from_secs(10);

/// Client side of a bus connection.
///
/// A background thread reads frames as they arrive and queues `EVENT`s
/// locally, so [`Connection::next_event`] never stalls the broker. One thread
/// may read events while another posts; other concurrent use needs external
/// serialization.
pub struct Connection {
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    events: Mutex<Receiver<BusEvent>>,
    pongs: Mutex<Receiver<()>>,
    closed_reason: Arc<Mutex<Option<String>>>,
    reader: Option<JoinHandle<()>>,
}

impl Connection {
    /// Connects and performs the `HELLO` exchange.
    pub fn connect<A: ToSocketAddrs + std::fmt::Display>(addr: A) -> Result<Self, BusError> {
        let stream = TcpStream::connect(&addr).map_err(|source| BusError::ConnectFailed {
            addr: addr.to_string(),
            source,
        })?;
        let _ = stream.set_nodelay(true);
        let io_err = |e: std::io::Error| BusError::ConnectFailed {
            addr: addr.to_string(),
            source: e,
        };
        let mut read_half = BufReader::new(stream.try_clone().map_err(io_err)?);
        let mut writer = BufWriter::new(stream.try_clone().map_err(io_err)?);

        Frame::hello().write_to(&mut writer).map_err(io_err)?;
        stream
            .set_read_timeout(Some(HANDSHAKE_TIMEOUT))
            .map_err(io_err)?;
        match Frame::read_from(&mut read_half) {
            Ok(f) if f.kind == MsgType::Hello && f.payload == HELLO_PAYLOAD => {}
            Ok(f) if f.kind == MsgType::Error => {
                return Err(BusError::Protocol(String::from_utf8_lossy(&f.payload).into()))
            }
            Ok(f) => return Err(BusError::Protocol(format!("expected HELLO, got {:?}", f.kind))),
            Err(e) => return Err(BusError::Protocol(format!("handshake failed: {e}"))),
        }
        stream.set_read_timeout(None).map_err(io_err)?;

        let (ev_tx, ev_rx) = mpsc::channel();
        let (pong_tx, pong_rx) = mpsc::channel();
        let closed_reason = Arc::new(Mutex::new(None));
        let reason = Arc::clone(&closed_reason);
        let reader = thread::Builder::new()
            .name("bus-client-read".into())
            .spawn(move || read_loop(read_half, ev_tx, pong_tx, reason))
            .expect("spawn client reader");

        Ok(Connection {
            writer: Mutex::new(writer),
            stream,
            events: Mutex::new(ev_rx),
            pongs: Mutex::new(pong_rx),
            closed_reason,
            reader: Some(reader),
        })
    }

    fn send(&self, frame: &Frame) -> Result<(), BusError> {
        let mut w = self.writer.lock().unwrap();
        frame.write_to(&mut *w).map_err(|_| BusError::Disconnected)
    }

    /// Subscribes to `name`. Returns once the broker has registered the
    /// subscription, so posts made afterwards by any connection are seen.
    pub fn subscribe(&self, name: &str) -> Result<(), BusError> {
        let name = EventName::new(name)?;
        self.send(&Frame::named(MsgType::Subscribe, name, Vec::new()))?;
        self.sync()
    }

    pub fn unsubscribe(&self, name: &str) -> Result<(), BusError> {
        let name = EventName::new(name)?;
        self.send(&Frame::named(MsgType::Unsubscribe, name, Vec::new()))?;
        self.sync()
    }

    /// Posts an event. Fire-and-forget; use [`Connection::sync`] to wait
    /// until the broker has routed everything posted so far.
    pub fn post(&self, name: &str, payload: &[u8]) -> Result<(), BusError> {
        let name = EventName::new(name)?;
        self.post_named(&name, payload)
    }

    pub fn post_named(&self, name: &EventName, payload: &[u8]) -> Result<(), BusError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(BusError::PayloadTooLarge(payload.len()));
        }
        self.send(&Frame::named(MsgType::Post, name.clone(), payload.to_vec()))
    }

    /// PING/PONG round trip. The broker handles a connection's frames in
    /// order, so the PONG proves every earlier frame was processed.
    pub fn sync(&self) -> Result<(), BusError> {
        let pongs = self.pongs.lock().unwrap();
        self.send(&Frame::ping())?;
        match pongs.recv_timeout(SYNC_TIMEOUT) {
            Ok(()) => Ok(()),
            Err(RecvTimeoutError::Timeout) => Err(BusError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Disconnected),
        }
    }

    /// Oldest undelivered event, waiting up to `timeout_us` microseconds.
    pub fn next_event(&self, timeout_us: u64) -> Result<BusEvent, BusError> {
        let rx = self.events.lock().unwrap();
        match rx.recv_timeout(Duration::from_micros(timeout_us)) {
            Ok(ev) => Ok(ev),
            Err(RecvTimeoutError::Timeout) => Err(BusError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Disconnected),
        }
    }

    /// Why the broker closed the connection, if it sent an `ERROR` frame.
    pub fn close_reason(&self) -> Option<String> {
        self.closed_reason.lock().unwrap().clone()
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.writer.lock().unwrap().flush();
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl EventSink for Connection {
    fn post_event(&self, name: &EventName, payload: &[u8]) -> Result<(), BusError> {
        self.post_named(name, payload)
    }
}

fn read_loop(
    mut reader: BufReader<TcpStream>,
    events: Sender<BusEvent>,
    pongs: Sender<()>,
    reason: Arc<Mutex<Option<String>>>,
) {
    loop {
        match Frame::read_from(&mut reader) {
            Ok(f) => match f.kind {
                MsgType::Event => {
                    let ev = BusEvent {
                        name: f.name.expect("decoded named frame"),
                        payload: f.payload,
                    };
                    if events.send(ev).is_err() {
                        return;
                    }
                }
                MsgType::Pong => {
                    let _ = pongs.send(());
                }
                MsgType::Error => {
                    let msg = String::from_utf8_lossy(&f.payload).into_owned();
                    log::warn!("broker closed connection: {msg}");
                    *reason.lock().unwrap() = Some(msg);
                    return;
                }
                other => {
                    log::warn!("ignoring unexpected {other:?} frame from broker");
                }
            },
            Err(FrameError::Eof) | Err(FrameError::Io(_)) => return,
            Err(e) => {
                *reason.lock().unwrap() = Some(e.to_string());
                return;
            }
        }
    }
}
