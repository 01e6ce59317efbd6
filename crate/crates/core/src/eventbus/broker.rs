use std::collections::{BTreeSet, HashMap};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::frame::{Frame, FrameError, MsgType};
use super::{BusError, EventName, DEFAULT_QUEUE_CAP, HELLO_PAYLOAD};

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Outbound events buffered per connection before it is dropped.
    pub queue_cap: usize,
    /// How long a new connection has to send its `HELLO`.
    pub handshake_timeout: Duration,
    /// Socket write timeout; a peer that stops reading for this long is cut off.
    pub write_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            queue_cap: DEFAULT_QUEUE_CAP,
            handshake_timeout: Duration::from_secs(5),
            write_timeout: Duration::from_secs(5),
        }
    }
}

/// Monotonic broker counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct BrokerStats {
    /// Connections that completed the `HELLO` exchange.
    pub connections: u64,
    pub subscriptions: u64,
    pub posts: u64,
    pub deliveries: u64,
    /// Consumers disconnected for overflowing their outbound queue.
    pub evictions: u64,
}

#[derive(Default)]
struct Counters {
    connections: AtomicU64,
    subscriptions: AtomicU64,
    posts: AtomicU64,
    deliveries: AtomicU64,
    evictions: AtomicU64,
}

struct Peer {
    tx: SyncSender<Frame>,
    evicted: Arc<AtomicBool>,
}

#[derive(Default)]
struct Registry {
    peers: HashMap<u64, Peer>,
    subs: HashMap<EventName, BTreeSet<u64>>,
}

impl Registry {
    fn remove_peer(&mut self, id: u64) {
        self.peers.remove(&id);
        self.subs.retain(|_, ids| {
            ids.remove(&id);
            !ids.is_empty()
        });
    }
}

struct Shared {
    config: BrokerConfig,
    stop: AtomicBool,
    registry: Mutex<Registry>,
    // Every accepted socket, so shutdown can unblock their reader threads.
    sockets: Mutex<HashMap<u64, TcpStream>>,
    next_id: AtomicU64,
    counters: Counters,
}

/// Running broker. Dropping the handle shuts the broker down.
pub struct BrokerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

pub fn start_broker<A: ToSocketAddrs + std::fmt::Display>(
    addr: A,
) -> Result<BrokerHandle, BusError> {
    start_broker_with(addr, BrokerConfig::default())
}

pub fn start_broker_with<A: ToSocketAddrs + std::fmt::Display>(
    addr: A,
    config: BrokerConfig,
) -> Result<BrokerHandle, BusError> {
    let listener = TcpListener::bind(&addr).map_err(|source| BusError::BindFailed {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr().map_err(|source| BusError::BindFailed {
        addr: addr.to_string(),
        source,
    })?;
    let shared = Arc::new(Shared {
        config,
        stop: AtomicBool::new(false),
        registry: Mutex::new(Registry::default()),
        sockets: Mutex::new(HashMap::new()),
        next_id: AtomicU64::new(1),
        counters: Counters::default(),
    });
    let accept_shared = Arc::clone(&shared);
    let accept = thread::Builder::new()
        .name("bus-accept".into())
        .spawn(move || accept_loop(listener, accept_shared))
        .expect("spawn accept thread");
    log::info!("event broker listening on {local}");
    Ok(BrokerHandle {
        addr: local,
        shared,
        accept: Some(accept),
    })
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn stats(&self) -> BrokerStats {
        let c = &self.shared.counters;
        BrokerStats {
            connections: c.connections.load(Ordering::SeqCst),
            subscriptions: c.subscriptions.load(Ordering::SeqCst),
            posts: c.posts.load(Ordering::SeqCst),
            deliveries: c.deliveries.load(Ordering::SeqCst),
            evictions: c.evictions.load(Ordering::SeqCst),
        }
    }

    /// Stops accepting and closes every connection.
    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, sock) in self.shared.sockets.lock().unwrap().drain() {
            let _ = sock.shutdown(Shutdown::Both);
        }
        let mut reg = self.shared.registry.lock().unwrap();
        reg.peers.clear();
        reg.subs.clear();
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
        if let Ok(clone) = stream.try_clone() {
            shared.sockets.lock().unwrap().insert(id, clone);
        }
        let conn_shared = Arc::clone(&shared);
        let spawned = thread::Builder::new()
            .name(format!("bus-conn-{id}"))
            .spawn(move || {
                serve_connection(id, stream, &conn_shared);
                conn_shared.sockets.lock().unwrap().remove(&id);
            });
        if let Err(e) = spawned {
            log::error!("cannot spawn connection thread: {e}");
            shared.sockets.lock().unwrap().remove(&id);
        }
    }
}

fn reject(stream: &TcpStream, msg: &str) {
    let mut w = stream;
    let _ = Frame::error(msg).write_to(&mut w);
    let _ = stream.shutdown(Shutdown::Both);
}

fn serve_connection(id: u64, stream: TcpStream, shared: &Shared) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_write_timeout(Some(shared.config.write_timeout));
    let _ = stream.set_read_timeout(Some(shared.config.handshake_timeout));

    let mut reader = match stream.try_clone() {
        Ok(s) => BufReader::new(s),
        Err(_) => return,
    };
    match Frame::read_from(&mut reader) {
        Ok(f) if f.kind == MsgType::Hello && f.payload == HELLO_PAYLOAD => {}
        Ok(f) => {
            reject(&stream, &format!("expected HELLO, got {:?}", f.kind));
            return;
        }
        Err(FrameError::Eof) => return,
        Err(e) => {
            reject(&stream, &format!("bad handshake: {e}"));
            return;
        }
    }
    let _ = stream.set_read_timeout(None);

    let (tx, rx) = mpsc::sync_channel(shared.config.queue_cap);
    let evicted = Arc::new(AtomicBool::new(false));
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    // Register before answering so the peer is counted once connect() returns.
    shared.registry.lock().unwrap().peers.insert(
        id,
        Peer {
            tx: tx.clone(),
            evicted: Arc::clone(&evicted),
        },
    );
    shared.counters.connections.fetch_add(1, Ordering::SeqCst);
    {
        let mut w = &stream;
        if Frame::hello().write_to(&mut w).is_err() {
            shared.registry.lock().unwrap().remove_peer(id);
            return;
        }
    }
    let writer = {
        let evicted = Arc::clone(&evicted);
        thread::Builder::new()
            .name(format!("bus-write-{id}"))
            .spawn(move || write_loop(write_half, rx, evicted))
            .expect("spawn writer thread")
    };

    loop {
        let frame = match Frame::read_from(&mut reader) {
            Ok(f) => f,
            Err(FrameError::Eof) | Err(FrameError::Io(_)) => break,
            Err(e) => {
                let _ = tx.try_send(Frame::error(&format!("protocol error: {e}")));
                break;
            }
        };
        if evicted.load(Ordering::SeqCst) {
            break;
        }
        match frame.kind {
            MsgType::Subscribe => {
                let name = frame.name.expect("decoded named frame");
                shared
                    .registry
                    .lock()
                    .unwrap()
                    .subs
                    .entry(name)
                    .or_default()
                    .insert(id);
                shared.counters.subscriptions.fetch_add(1, Ordering::SeqCst);
            }
            MsgType::Unsubscribe => {
                let name = frame.name.expect("decoded named frame");
                let mut reg = shared.registry.lock().unwrap();
                if let Some(ids) = reg.subs.get_mut(&name) {
                    ids.remove(&id);
                    if ids.is_empty() {
                        reg.subs.remove(&name);
                    }
                }
            }
            MsgType::Post => {
                let name = frame.name.expect("decoded named frame");
                fan_out(shared, name, frame.payload);
            }
            MsgType::Ping => {
                if let Err(TrySendError::Full(_)) = tx.try_send(Frame::pong()) {
                    evict(shared, id);
                    break;
                }
            }
            other => {
                let _ = tx.try_send(Frame::error(&format!("unexpected {other:?} frame")));
                break;
            }
        }
    }

    shared.registry.lock().unwrap().remove_peer(id);
    drop(tx);
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
}

fn fan_out(shared: &Shared, name: EventName, payload: Vec<u8>) {
    shared.counters.posts.fetch_add(1, Ordering::SeqCst);
    let mut overflowed = Vec::new();
    {
        let reg = shared.registry.lock().unwrap();
        let Some(ids) = reg.subs.get(&name) else {
            return;
        };
        for id in ids {
            let Some(peer) = reg.peers.get(id) else {
                continue;
            };
            let frame = Frame::named(MsgType::Event, name.clone(), payload.clone());
            match peer.tx.try_send(frame) {
                Ok(()) => {
                    shared.counters.deliveries.fetch_add(1, Ordering::SeqCst);
                }
                Err(TrySendError::Full(_)) => overflowed.push(*id),
                Err(TrySendError::Disconnected(_)) => {}
            }
        }
    }
    for id in overflowed {
        evict(shared, id);
    }
}

fn evict(shared: &Shared, id: u64) {
    let mut reg = shared.registry.lock().unwrap();
    if let Some(peer) = reg.peers.get(&id) {
        peer.evicted.store(true, Ordering::SeqCst);
        shared.counters.evictions.fetch_add(1, Ordering::SeqCst);
        log::warn!("evicting slow consumer {id}");
    }
    reg.remove_peer(id);
}

fn write_loop(stream: TcpStream, rx: Receiver<Frame>, evicted: Arc<AtomicBool>) {
    let mut w = BufWriter::new(&stream);
    let mut next = rx.recv().ok();
    while let Some(frame) = next.take() {
        if evicted.load(Ordering::SeqCst) {
            let _ = Frame::error("slow consumer: outbound queue overflow").write_to(&mut w);
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
        if w.write_all(&frame.encode()).is_err() {
            return;
        }
        if frame.kind == MsgType::Error {
            let _ = w.flush();
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
        // Batch writes while the queue has more; flush when it runs dry.
        next = match rx.try_recv() {
            Ok(f) => Some(f),
            Err(_) => {
                if w.flush().is_err() {
                    return;
                }
                rx.recv().ok()
            }
        };
    }
    let _ = w.flush();
    let _ = stream.shutdown(Shutdown::Write);
}
