//! HTTP/WebSocket gateway for browser clients.
//!
//! `GET /devices` returns the device registry as JSON. `GET /ws` upgrades to a
//! WebSocket bridged one-to-one to a native session on the device server:
//! each text message is one frame, in both directions. A message that is not a
//! valid frame is answered with an `error` frame (`bad-frame`) and the
//! session stays open.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use deskctl_core::frame::Frame;
use deskctl_core::propdb::PropertyDb;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::codec;

#[derive(Clone)]
struct Gateway {
    backend: SocketAddr,
    db: Arc<PropertyDb>,
}

pub fn router(backend: SocketAddr, db: Arc<PropertyDb>) -> Router {
    Router::new()
        .route("/devices", get(devices))
        .route("/ws", get(upgrade))
        .with_state(Gateway { backend, db })
}

/// Serves the gateway on `listener` until the task is aborted.
pub fn spawn(listener: TcpListener, backend: SocketAddr, db: Arc<PropertyDb>) -> JoinHandle<std::io::Result<()>> {
    tokio::spawn(async move { axum::serve(listener, router(backend, db)).await })
}

async fn devices(State(g): State<Gateway>) -> Response {
    Json(g.db.registry()).into_response()
}

async fn upgrade(ws: WebSocketUpgrade, State(g): State<Gateway>) -> Response {
    ws.on_upgrade(move |socket| bridge(socket, g.backend))
}

async fn send_frame(ws: &mut WebSocket, frame: &Frame) -> bool {
    ws.send(Message::Text(frame.to_json().into())).await.is_ok()
}

async fn bridge(mut ws: WebSocket, backend: SocketAddr) {
    let tcp = match TcpStream::connect(backend).await {
        Ok(s) => s,
        Err(e) => {
            let _ = send_frame(&mut ws, &Frame::error(None, "backend-unavailable", e)).await;
            return;
        }
    };
    let _ = tcp.set_nodelay(true);
    let (mut rd, mut wr) = tcp.into_split();
    // reads run in their own task: a partially read frame must never be cancelled
    let (from_server, mut server_rx) = mpsc::channel::<Frame>(64);
    let reader = tokio::spawn(async move {
        while let Ok(Some(frame)) = codec::read_frame(&mut rd).await {
            if from_server.send(frame).await.is_err() {
                break;
            }
        }
    });
    loop {
        tokio::select! {
            msg = ws.recv() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Binary(b))) => String::from_utf8_lossy(&b).into_owned(),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                match Frame::from_json(&text) {
                    Ok(frame) => {
                        if codec::write_frame(&mut wr, &frame).await.is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        if !send_frame(&mut ws, &Frame::error(None, e.code(), &e)).await {
                            break;
                        }
                    }
                }
            }
            frame = server_rx.recv() => {
                match frame {
                    Some(f) => if !send_frame(&mut ws, &f).await { break },
                    None => break,
                }
            }
        }
    }
    reader.abort();
}
