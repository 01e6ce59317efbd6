use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

use pulsectl::eventbus::{start_broker, BrokerHandle};
use pulsectl::rtcontrol::COIL_PATH;
use pulsectl::scope::{self, Format, Panel};
use pulsectl::sequencer::{Sequencer, ShotConfigDoc};
use pulsectl::shottree::{NodePath, ShotStore};
use pulsectl_gateway::{serve, Gateway, GatewayConfig, GatewayError};

const TOKEN: &str = "s3cret";

struct Stack {
    _broker: BrokerHandle,
    dir: tempfile::TempDir,
    gw: Gateway,
    http: Client,
}

impl Stack {
    async fn start() -> Stack {
        Self::start_with(Duration::from_secs(10)).await
    }

    async fn start_with(heartbeat: Duration) -> Stack {
        let broker = start_broker("127.0.0.1:0").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GatewayConfig::new(dir.path().join("store"), broker.local_addr().to_string(), TOKEN);
        cfg.bind = "127.0.0.1:0".into();
        cfg.heartbeat = heartbeat;
        let gw = serve(cfg).await.unwrap();
        Stack {
            _broker: broker,
            dir,
            gw,
            http: Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.gw.local_addr())
    }

    fn store(&self) -> std::path::PathBuf {
        self.dir.path().join("store")
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(self.url(path)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = self.http.post(self.url(path));
        if let Some(t) = token {
            req = req.header("X-Auth-Token", t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let r = req.send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn ws(&self) -> WsClient {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/api/events", self.gw.local_addr()))
            .await
            .unwrap();
        WsClient(ws)
    }
}

struct WsClient(tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>);

impl WsClient {
    async fn next_raw(&mut self, wait: Duration) -> Option<Message> {
        match tokio::time::timeout(wait, self.0.next()).await {
            Ok(Some(Ok(m))) => Some(m),
            _ => None,
        }
    }

    async fn next_json(&mut self, wait: Duration) -> Option<Value> {
        loop {
            match self.next_raw(wait).await? {
                Message::Text(t) => return Some(serde_json::from_str(&t).unwrap()),
                Message::Ping(_) | Message::Pong(_) => continue,
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    /// Envelopes up to and including the next `SEQ_STATE` IDLE.
    async fn until_idle(&mut self) -> Vec<Value> {
        let mut out = Vec::new();
        loop {
            let env = self.next_json(Duration::from_secs(10)).await.expect("envelope");
            let idle = env["kind"] == "SEQ_STATE" && env["payload"]["state"] == "IDLE";
            out.push(env);
            if idle {
                return out;
            }
        }
    }
}

fn dir_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn short_shot() -> Value {
    json!({ "pulse_len_us": 20_000, "cooldown_us": 5_000 })
}

async fn run_shot(s: &Stack) -> u32 {
    run_shot_with(s, short_shot()).await
}

async fn run_shot_with(s: &Stack, config: Value) -> u32 {
    let (st, _) = s.post("/api/shot/configure", Some(TOKEN), Some(config)).await;
    assert_eq!(st, StatusCode::OK);
    let (st, body) = s.post("/api/shot/arm", Some(TOKEN), None).await;
    assert_eq!(st, StatusCode::OK, "{body}");
    let shot = body["shot"].as_u64().unwrap() as u32;
    let (st, _) = s.post("/api/shot/trigger", Some(TOKEN), None).await;
    assert_eq!(st, StatusCode::OK);
    for _ in 0..500 {
        let (_, state) = s.get("/api/state").await;
        if state == json!({"state": "IDLE", "shot": null}) {
            let (_, shots) = s.get("/api/shots").await;
            if shots.as_array().unwrap().contains(&json!(shot)) {
                return shot;
            }
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("shot {shot} never finished");
}

#[tokio::test(flavor = "multi_thread")]
async fn fresh_system_reads() {
    let s = Stack::start().await;
    assert_eq!(s.get("/api/state").await, (StatusCode::OK, json!({"state": "IDLE", "shot": null})));
    assert_eq!(s.get("/api/shots").await, (StatusCode::OK, json!([])));
    assert_eq!(
        s.get("/api/engineering").await.1,
        json!({"iocs": 3, "displays": 135, "io_points": 1500, "records": 7000})
    );
    assert_eq!(s.get("/api/logbook").await, (StatusCode::OK, json!([])));
    assert_eq!(s.get("/api/shot/1/nodes").await.0, StatusCode::NOT_FOUND);
    s.gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn mutations_need_token_and_legal_state() {
    let s = Stack::start().await;
    for op in ["configure", "arm", "trigger", "abort"] {
        let path = format!("/api/shot/{op}");
        assert_eq!(s.post(&path, None, None).await.0, StatusCode::UNAUTHORIZED, "{op}");
        assert_eq!(s.post(&path, Some("nope"), None).await.0, StatusCode::UNAUTHORIZED, "{op}");
    }
    let (st, body) = s.post("/api/shot/trigger", Some(TOKEN), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(body["error"], "WrongState");
    assert_eq!(s.post("/api/shot/abort", Some(TOKEN), None).await.0, StatusCode::CONFLICT);
    assert_eq!(s.post("/api/shot/arm", Some(TOKEN), None).await.0, StatusCode::CONFLICT);

    let (st, body) = s.post("/api/shot/configure", Some(TOKEN), Some(json!({"pulse_len_us": 500}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "InvalidConfig");
    let (st, _) = s.post("/api/shot/configure", Some(TOKEN), Some(json!({"bogus": 1}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let program = json!({"clock_program": [{"code": 3, "name": "PULSE_END", "offset_us": 500000}]});
    let (st, _) = s.post("/api/shot/configure", Some(TOKEN), Some(program)).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(s.get("/api/state").await.1["state"], "IDLE");

    let (st, body) = s.post("/api/shot/configure", Some(TOKEN), None).await;
    assert_eq!((st, body), (StatusCode::OK, json!({"state": "CONFIGURED", "shot": null})));
    let (st, body) = s.post("/api/shot/arm", Some(TOKEN), None).await;
    assert_eq!((st, body), (StatusCode::OK, json!({"state": "ARMED", "shot": 1})));
    assert_eq!(s.post("/api/shot/arm", Some(TOKEN), None).await.0, StatusCode::CONFLICT);
    let (st, body) = s.post("/api/shot/abort", Some(TOKEN), None).await;
    assert_eq!(st, StatusCode::OK);
    // Unpaced, the cooldown may already be over.
    assert!(body["state"] == "COOLDOWN" || body["state"] == "IDLE", "{body}");
    s.gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn full_shot_over_http_and_ws() {
    let s = Stack::start().await;
    let mut a = s.ws().await;
    let mut b = s.ws().await;
    let snap = a.next_json(Duration::from_secs(5)).await.unwrap();
    assert_eq!(snap["kind"], "SEQ_STATE");
    assert_eq!(snap["payload"], json!({"state": "IDLE", "shot": null}));
    b.next_json(Duration::from_secs(5)).await.unwrap();

    let shot = run_shot(&s).await;
    assert_eq!(shot, 1);

    let mut seen_a = vec![snap];
    seen_a.extend(a.until_idle().await.into_iter());
    let states: Vec<&str> = seen_a
        .iter()
        .filter(|e| e["kind"] == "SEQ_STATE")
        .map(|e| e["payload"]["state"].as_str().unwrap())
        .collect();
    assert_eq!(
        states,
        ["IDLE", "CONFIGURED", "ARMED", "PULSING", "ACQUIRING", "ARCHIVING", "COOLDOWN", "IDLE"]
    );
    let kinds: Vec<String> = seen_a.iter().map(|e| e["kind"].as_str().unwrap().to_string()).collect();
    let done = kinds.iter().position(|k| k == "SHOT_DONE").unwrap();
    let archiving = seen_a.iter().position(|e| e["payload"]["state"] == "ARCHIVING").unwrap();
    assert!(done > archiving);
    assert_eq!(seen_a[done]["payload"], json!({"shot": 1}));
    assert_eq!(kinds.iter().filter(|k| *k == "CLOCK").count(), 3);
    assert!(kinds.iter().any(|k| k == "TREE_WRITE"));
    for e in &seen_a {
        assert!(e["t_us"].as_u64().unwrap() > 0);
    }

    // The second client saw the same envelopes after its own snapshot.
    let seen_b = b.until_idle().await;
    assert_eq!(seen_b.len() + 1, seen_a.len());
    assert_eq!(seen_b[..], seen_a[1..]);
    s.gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn signal_json_matches_store_and_csv() {
    let s = Stack::start().await;
    let shot = run_shot_with(&s, json!({})).await;
    let (st, body) = s
        .get(&format!("/api/shot/{shot}/signal?path={}", urlencode(COIL_PATH)))
        .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["path"], COIL_PATH);
    let v: Vec<f64> = serde_json::from_value(body["v"].clone()).unwrap();
    let t: Vec<i64> = serde_json::from_value(body["t_us"].clone()).unwrap();
    assert_eq!(v.len(), 500);

    let store = ShotStore::open(s.store()).unwrap();
    let stored = store.open_shot(shot).unwrap().get_signal(COIL_PATH).unwrap().clone();
    assert_eq!(body["units"], stored.units.as_str());
    assert_eq!(t, stored.timebase.times());
    let out = s.dir.path().join("csv");
    let panel = Panel::new(NodePath::parse(COIL_PATH).unwrap());
    let files = scope::export(&store, shot, &[panel], Format::Csv, &out).unwrap();
    let (_, csv_t, csv_v) = scope::parse_csv(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(csv_t, t);
    for ((a, b), c) in v.iter().zip(&csv_v).zip(&stored.samples) {
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
    }

    let (st, nodes) = s.get(&format!("/api/shot/{shot}/nodes")).await;
    assert_eq!(st, StatusCode::OK);
    let coil = nodes.as_array().unwrap().iter().find(|n| n["path"] == COIL_PATH).unwrap();
    assert_eq!(coil["usage"], "SIGNAL");
    assert_eq!(coil["has_data"], true);

    assert_eq!(s.get("/api/shot/99/signal?path=%5CTOP.RTCTRL.Z").await.0, StatusCode::NOT_FOUND);
    assert_eq!(s.get(&format!("/api/shot/{shot}/signal?path=%5CTOP.NOPE")).await.0, StatusCode::NOT_FOUND);
    let (st, body) = s.get(&format!("/api/shot/{shot}/signal?path=%5CTOP.SEQ%3AOUTCOME")).await;
    assert_eq!((st, body["error"].clone()), (StatusCode::NOT_FOUND, json!("NoData")));
    assert_eq!(s.get(&format!("/api/shot/{shot}/signal?path=bad")).await.0, StatusCode::BAD_REQUEST);
    s.gw.shutdown().await;
}

fn urlencode(s: &str) -> String {
    s.replace('\\', "%5C").replace(':', "%3A")
}

#[tokio::test(flavor = "multi_thread")]
async fn gateway_matches_direct_sequencer() {
    let s = Stack::start().await;
    let shot = run_shot(&s).await;
    let via_http = dir_bytes(&ShotStore::open(s.store()).unwrap().shot_dir(shot));

    let doc: ShotConfigDoc = serde_json::from_value(short_shot()).unwrap();
    let direct_dir = tempfile::tempdir().unwrap();
    let mut seq = Sequencer::new(ShotStore::open(direct_dir.path()).unwrap());
    let rec = seq.run_shot(doc.resolve().unwrap()).unwrap();
    assert_eq!(rec.shot, shot);
    let direct = dir_bytes(&seq.store().shot_dir(shot));
    assert_eq!(via_http, direct);
    s.gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn reads_leave_store_untouched() {
    let s = Stack::start().await;
    let shot = run_shot(&s).await;
    let (st, _) = s
        .post("/api/logbook", Some(TOKEN), Some(json!({"shot": shot, "body": "nominal"})))
        .await;
    assert_eq!(st, StatusCode::CREATED);
    let before = dir_bytes(&s.store());
    for path in [
        "/api/state".to_string(),
        "/api/shots".into(),
        format!("/api/shot/{shot}/nodes"),
        format!("/api/shot/{shot}/signal?path={}", urlencode(COIL_PATH)),
        format!("/api/shot/{shot}/signal?path=%5CTOP.NOPE"),
        "/api/shot/42/nodes".into(),
        "/api/logbook".into(),
        format!("/api/logbook?shot={shot}"),
        "/api/engineering".into(),
    ] {
        s.get(&path).await;
    }
    assert!(before == dir_bytes(&s.store()));
    s.gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn logbook_round_trip() {
    let s = Stack::start().await;
    let entry = json!({"shot": 3, "author": "ops", "body": "first"});
    assert_eq!(s.post("/api/logbook", None, Some(entry.clone())).await.0, StatusCode::UNAUTHORIZED);
    let (st, _) = s.post("/api/logbook", Some(TOKEN), Some(json!({"shot": 3, "body": "  "}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, first) = s.post("/api/logbook", Some(TOKEN), Some(entry)).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!((first["shot"].clone(), first["author"].clone()), (json!(3), json!("ops")));
    s.post("/api/logbook", Some(TOKEN), Some(json!({"shot": 4, "body": "second"}))).await;
    s.post("/api/logbook", Some(TOKEN), Some(json!({"shot": 3, "body": "third"}))).await;

    let (_, all) = s.get("/api/logbook").await;
    let bodies: Vec<&str> = all.as_array().unwrap().iter().map(|e| e["body"].as_str().unwrap()).collect();
    assert_eq!(bodies, ["first", "second", "third"]);
    let ids: Vec<u64> = all.as_array().unwrap().iter().map(|e| e["id"].as_u64().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    let (_, three) = s.get("/api/logbook?shot=3").await;
    assert_eq!(three.as_array().unwrap().len(), 2);
    assert_eq!(three[0], first);
    s.gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn idle_stream_only_heartbeats() {
    let s = Stack::start_with(Duration::from_millis(100)).await;
    let mut ws = s.ws().await;
    ws.next_json(Duration::from_secs(5)).await.unwrap();
    let mut pings = 0;
    for _ in 0..4 {
        match ws.next_raw(Duration::from_secs(2)).await {
            Some(Message::Ping(_)) => pings += 1,
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(pings, 4);
    ws.0.send(Message::Close(None)).await.unwrap();
    s.gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn serve_errors() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = GatewayConfig::new(dir.path(), format!("127.0.0.1:{port}"), TOKEN);
    cfg.bind = "127.0.0.1:0".into();
    assert!(matches!(serve(cfg.clone()).await, Err(GatewayError::BrokerUnreachable(_))));

    let broker = start_broker("127.0.0.1:0").unwrap();
    cfg.broker = broker.local_addr().to_string();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    cfg.bind = taken.local_addr().unwrap().to_string();
    assert!(matches!(serve(cfg.clone()).await, Err(GatewayError::BindFailed { .. })));
    cfg.token.clear();
    assert!(matches!(serve(cfg).await, Err(GatewayError::EmptyToken)));
}
