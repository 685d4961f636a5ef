use std::sync::Arc;
use std::time::Duration;

use ays_sandbox::protocol::{Envelope, Kind, StateBody};
use ays_sandbox::{serve, SessionManager};
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn start(dir: Option<std::path::PathBuf>) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let manager = Arc::new(SessionManager::new(Duration::from_secs(60), dir));
    tokio::spawn(serve(listener, manager));
    addr
}

async fn request(ws: &mut Socket, req: Value) -> Envelope {
    ws.send(Message::Text(req.to_string().into())).await.unwrap();
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            _ => continue,
        }
    }
}

async fn step(ws: &mut Socket, id: &str, action: &str) -> StateBody {
    let r = request(
        ws,
        json!({ "proto": 1, "kind": "step", "session_id": id, "body": { "action": action } }),
    )
    .await;
    assert_eq!(r.kind, Kind::State, "{:?}", r.body);
    serde_json::from_value(r.body).unwrap()
}

async fn create(ws: &mut Socket, seed: u64) -> (String, StateBody) {
    let r = request(ws, json!({ "proto": 1, "kind": "create", "body": { "seed": seed } })).await;
    assert_eq!(r.kind, Kind::Created);
    let state = serde_json::from_value(r.body["state"].clone()).unwrap();
    (r.session_id.unwrap(), state)
}

async fn http_get(addr: std::net::SocketAddr, path: &str) -> (String, Value) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    let req = format!("GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n");
    s.write_all(req.as_bytes()).await.unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).await.unwrap();
    let (head, body) = buf.split_once("\r\n\r\n").unwrap();
    (
        head.lines().next().unwrap().to_string(),
        serde_json::from_str(body).unwrap(),
    )
}

#[tokio::test]
async fn scripted_branching_session() {
    let addr = start(None).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/session"))
        .await
        .unwrap();

    let (id, s0) = create(&mut ws, 2024).await;
    let mut first = vec![s0.clone()];
    for _ in 0..30 {
        first.push(step(&mut ws, &id, "ET_DG").await);
    }
    assert_eq!(first[30].year, 30);

    let r = request(
        &mut ws,
        json!({ "proto": 1, "kind": "undo", "session_id": id, "body": { "to_year": 10 } }),
    )
    .await;
    let back: StateBody = serde_json::from_value(r.body).unwrap();
    assert_eq!(back, first[10]);
    let mut second = first[..=10].to_vec();
    for _ in 0..20 {
        second.push(step(&mut ws, &id, "NOOP").await);
    }

    // An independent session replaying the branch's actions delivers the same bits.
    let (other, o0) = create(&mut ws, 2024).await;
    let mut replay = vec![o0];
    for y in 0..30 {
        replay.push(step(&mut ws, &other, if y < 10 { "ET_DG" } else { "NOOP" }).await);
    }
    assert_eq!(replay, second);

    for y in 0..=10 {
        assert_eq!(first[y].raw.a.to_bits(), second[y].raw.a.to_bits());
        assert_eq!(first[y].raw.y.to_bits(), second[y].raw.y.to_bits());
        assert_eq!(first[y].raw.s.to_bits(), second[y].raw.s.to_bits());
    }
    for y in 11..=30 {
        assert_ne!(first[y].raw, second[y].raw, "year {y}");
    }

    let r = request(&mut ws, json!({ "proto": 1, "kind": "suggest", "session_id": id })).await;
    assert_eq!(r.kind, Kind::Error);
}

#[tokio::test]
async fn one_reply_per_line() {
    let addr = start(None).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/session"))
        .await
        .unwrap();
    let batch = "{\"proto\":1,\"kind\":\"create\",\"body\":{\"seed\":1}}\n{\"proto\":1,\"kind\":\"undo\"}\n";
    ws.send(Message::Text(batch.into())).await.unwrap();
    let mut kinds = Vec::new();
    while kinds.len() < 2 {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            kinds.push(serde_json::from_str::<Envelope>(&t).unwrap().kind);
        }
    }
    assert_eq!(kinds, [Kind::Created, Kind::Error]);
}

#[tokio::test]
async fn health_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let net = ays_core::neural::MlpWeights::zeros(ays_core::neural::MlpSpec::new(3, ays_core::neural::HeadKind::Plain));
    ays_core::neural::save_weights(&net, &dir.path().join("a.aysw")).unwrap();
    let addr = start(Some(dir.path().to_path_buf())).await;
    let (status, health) = http_get(addr, "/health").await;
    assert!(status.contains("200"));
    assert_eq!(health["status"], "ok");
    assert_eq!(health["proto"], 1);
    let (_, list) = http_get(addr, "/checkpoints").await;
    assert_eq!(list[0]["name"], "a.aysw");
    assert_eq!(list[0]["head"], "plain");
}
