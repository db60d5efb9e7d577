//! Async client for the device server.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use deskctl_core::frame::{Frame, Outcome};
use deskctl_core::Payload;
use thiserror::Error;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpStream, ToSocketAddrs};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::codec;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{code}: {message}")]
pub struct RemoteError {
    pub code: String,
    pub message: String,
}

impl RemoteError {
    fn new(code: &str, message: impl ToString) -> Self {
        RemoteError { code: code.to_string(), message: message.to_string() }
    }

    fn disconnected() -> Self {
        RemoteError::new("disconnected", "connection to server lost")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SubEvent {
    Event { seq: u64, payload: Payload },
    Closed { code: String },
}

enum Response {
    Frame(Frame),
    Ack(u64, oneshot::Receiver<Outcome>),
    Subscribed(u64, mpsc::UnboundedReceiver<SubEvent>),
}

#[derive(Default)]
struct Routes {
    pending: HashMap<u64, oneshot::Sender<Response>>,
    tickets: HashMap<u64, oneshot::Sender<Outcome>>,
    subs: HashMap<u64, mpsc::UnboundedSender<SubEvent>>,
}

pub struct Client {
    routes: Arc<Mutex<Routes>>,
    writer: tokio::sync::Mutex<OwnedWriteHalf>,
    next_id: AtomicU64,
    reader: JoinHandle<()>,
}

/// An accepted async command.
pub struct Ticket {
    pub ticket: u64,
    rx: oneshot::Receiver<Outcome>,
}

impl Ticket {
    pub async fn wait(self) -> Result<Payload, RemoteError> {
        match self.rx.await.map_err(|_| RemoteError::disconnected())? {
            Outcome::Ok { payload } => Ok(payload),
            Outcome::Err { code, message } => Err(RemoteError { code, message }),
        }
    }
}

pub struct Subscription {
    pub id: u64,
    rx: mpsc::UnboundedReceiver<SubEvent>,
}

impl Subscription {
    /// Next event; `None` once the subscription or connection is gone.
    pub async fn next(&mut self) -> Option<SubEvent> {
        self.rx.recv().await
    }

    pub fn try_next(&mut self) -> Option<SubEvent> {
        self.rx.try_recv().ok()
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

impl Client {
    pub async fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Client> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (mut rd, wr) = stream.into_split();
        let routes = Arc::new(Mutex::new(Routes::default()));
        let r = routes.clone();
        let reader = tokio::spawn(async move {
            while let Ok(Some(frame)) = codec::read_frame(&mut rd).await {
                route(&r, frame);
            }
            // dropping every sender wakes all waiters with a disconnect
            let mut routes = r.lock().unwrap_or_else(|p| p.into_inner());
            *routes = Routes::default();
        });
        Ok(Client { routes, writer: tokio::sync::Mutex::new(wr), next_id: AtomicU64::new(0), reader })
    }

    async fn request(&self, make: impl FnOnce(u64) -> Frame) -> Result<Response, RemoteError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        let (tx, rx) = oneshot::channel();
        self.routes.lock().unwrap_or_else(|p| p.into_inner()).pending.insert(id, tx);
        {
            let mut w = self.writer.lock().await;
            codec::write_frame(&mut *w, &make(id)).await.map_err(|_| RemoteError::disconnected())?;
        }
        rx.await.map_err(|_| RemoteError::disconnected())
    }

    fn expect_reply(r: Response) -> Result<Payload, RemoteError> {
        match r {
            Response::Frame(Frame::Reply { payload, .. }) => Ok(payload),
            other => Err(Self::unexpected(other)),
        }
    }

    fn unexpected(r: Response) -> RemoteError {
        match r {
            Response::Frame(Frame::Error { code, message, .. }) => RemoteError { code, message },
            _ => RemoteError::new("bad-frame", "unexpected response"),
        }
    }

    pub async fn sync(&self, device: &str, command: &str, payload: Payload) -> Result<Payload, RemoteError> {
        let r = self
            .request(|id| Frame::Sync { id, device: device.into(), command: command.into(), payload })
            .await?;
        Self::expect_reply(r)
    }

    /// Sends an async command and returns once the server has acknowledged it.
    pub async fn submit(&self, device: &str, command: &str, payload: Payload) -> Result<Ticket, RemoteError> {
        let r = self
            .request(|id| Frame::Async { id, device: device.into(), command: command.into(), payload })
            .await?;
        match r {
            Response::Ack(ticket, rx) => Ok(Ticket { ticket, rx }),
            other => Err(Self::unexpected(other)),
        }
    }

    /// Async command, waiting for its completion.
    pub async fn call_async(&self, device: &str, command: &str, payload: Payload) -> Result<Payload, RemoteError> {
        self.submit(device, command, payload).await?.wait().await
    }

    pub async fn subscribe(&self, device: &str, event: &str) -> Result<Subscription, RemoteError> {
        let r = self.request(|id| Frame::Subscribe { id, device: device.into(), event: event.into() }).await?;
        match r {
            Response::Subscribed(id, rx) => Ok(Subscription { id, rx }),
            other => Err(Self::unexpected(other)),
        }
    }

    pub async fn unsubscribe(&self, subscription: u64) -> Result<(), RemoteError> {
        let r = self.request(|id| Frame::Unsubscribe { id, subscription }).await?;
        Self::expect_reply(r)?;
        self.routes.lock().unwrap_or_else(|p| p.into_inner()).subs.remove(&subscription);
        Ok(())
    }

    pub async fn describe(&self, device: &str) -> Result<Payload, RemoteError> {
        let r = self.request(|id| Frame::Describe { id, device: device.into() }).await?;
        Self::expect_reply(r)
    }
}

fn route(routes: &Mutex<Routes>, frame: Frame) {
    let mut r = routes.lock().unwrap_or_else(|p| p.into_inner());
    match frame {
        Frame::Ack { id, ticket } => {
            let (tx, rx) = oneshot::channel();
            r.tickets.insert(ticket, tx);
            if let Some(p) = r.pending.remove(&id) {
                let _ = p.send(Response::Ack(ticket, rx));
            }
        }
        Frame::Subscribed { id, subscription } => {
            let (tx, rx) = mpsc::unbounded_channel();
            r.subs.insert(subscription, tx);
            if let Some(p) = r.pending.remove(&id) {
                let _ = p.send(Response::Subscribed(subscription, rx));
            }
        }
        Frame::Completion { ticket, outcome } => {
            if let Some(t) = r.tickets.remove(&ticket) {
                let _ = t.send(outcome);
            }
        }
        Frame::Event { subscription, seq, payload } => {
            if let Some(s) = r.subs.get(&subscription) {
                let _ = s.send(SubEvent::Event { seq, payload });
            }
        }
        Frame::Closed { subscription, code } => {
            if let Some(s) = r.subs.remove(&subscription) {
                let _ = s.send(SubEvent::Closed { code });
            }
        }
        f @ (Frame::Reply { .. } | Frame::Error { .. }) => {
            let id = match &f {
                Frame::Reply { id, .. } => Some(*id),
                Frame::Error { id, .. } => *id,
                _ => None,
            };
            if let Some(p) = id.and_then(|id| r.pending.remove(&id)) {
                let _ = p.send(Response::Frame(f));
            }
        }
        _ => {}
    }
}
