use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::protocol::PROTO;
use crate::session::SessionManager;

/// `/session` (websocket), `/health` and `/checkpoints`.
pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/session", get(session_socket))
        .route("/health", get(health))
        .route("/checkpoints", get(checkpoints))
        .with_state(manager)
}

/// Serves on `listener` until the task is dropped, expiring idle sessions.
pub async fn serve(listener: TcpListener, manager: Arc<SessionManager>) -> std::io::Result<()> {
    let sweeper = Arc::clone(&manager);
    let period = (manager.ttl() / 4).max(Duration::from_millis(100));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.sweep(Instant::now());
        }
    });
    axum::serve(listener, router(manager)).await
}

async fn health(State(m): State<Arc<SessionManager>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "proto": PROTO, "sessions": m.len() }))
}

async fn checkpoints(State(m): State<Arc<SessionManager>>) -> Response {
    match m.list_checkpoints() {
        Ok(list) => Json(list).into_response(),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "message": e.to_string() })),
        )
            .into_response(),
    }
}

async fn session_socket(ws: WebSocketUpgrade, State(m): State<Arc<SessionManager>>) -> Response {
    ws.on_upgrade(move |socket| pump(socket, m))
}

async fn pump(mut socket: WebSocket, m: Arc<SessionManager>) {
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        // Each line is one request; each gets one reply.
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let reply = m.handle_text(line);
            if socket.send(Message::Text(reply.into())).await.is_err() {
                return;
            }
        }
    }
}
