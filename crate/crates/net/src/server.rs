//! TCP device server.
//!
//! Frames from one session are handled in arrival order. A sync command gets
//! its `reply` before the next frame is read; an async command gets an `ack`
//! with a ticket immediately and a `completion` once it has run.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use deskctl_core::frame::{Frame, FrameError, Outcome};
use deskctl_core::hardware::Tick;
use deskctl_core::propdb::{PropertyDb, PropertyError, RegistryEntry};
use deskctl_core::{DeviceError, EventName, Payload, Station};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::codec;
use crate::hub::{self, Hub, SessionId};

/// Per-subscription event queue length.
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    /// The clock only moves through `sys/station/1 Advance`.
    Frozen,
    /// One tick per millisecond of wall time, applied every `step_ms`.
    Realtime { step_ms: u64 },
}

#[derive(Clone, Debug)]
pub struct ServerOptions {
    pub name: String,
    pub clock: ClockMode,
    pub queue_capacity: usize,
    /// Frames buffered per session before writers wait for the socket.
    pub outbound_capacity: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            name: "deskctl".into(),
            clock: ClockMode::Realtime { step_ms: 10 },
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            outbound_capacity: 256,
        }
    }
}

pub(crate) struct Shared {
    station: Mutex<Station>,
    hub: Mutex<Hub>,
    db: Arc<PropertyDb>,
    opts: ServerOptions,
    tickets: AtomicU64,
    sessions: AtomicU64,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Station> {
        self.station.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` on the station, then emits change events.
    fn with_station<T>(&self, f: impl FnOnce(&mut Station) -> T) -> T {
        let mut st = self.lock();
        let out = f(&mut st);
        self.hub.lock().unwrap_or_else(|p| p.into_inner()).poll(&mut st);
        out
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn db(&self) -> Arc<PropertyDb> {
        self.shared.db.clone()
    }

    /// Direct access to the station, e.g. to compare state in tests.
    pub fn with_station<T>(&self, f: impl FnOnce(&mut Station) -> T) -> T {
        self.shared.with_station(f)
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }

    /// Waits until the server stops (it only stops on shutdown).
    pub async fn wait(mut self) {
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }
}

/// Registers every station device under `host:port` in the property db.
pub fn register_devices(station: &Station, db: &PropertyDb, addr: SocketAddr, server: &str) -> Result<(), PropertyError> {
    for (name, _) in station.devices() {
        db.register_device(&RegistryEntry {
            device: name.to_string(),
            host: addr.ip().to_string(),
            port: addr.port(),
            server: server.to_string(),
        })?;
    }
    Ok(())
}

/// Starts serving `station` on `listener`. Devices are registered in `db`.
pub async fn serve(
    listener: TcpListener,
    station: Station,
    db: Arc<PropertyDb>,
    opts: ServerOptions,
) -> Result<ServerHandle, PropertyError> {
    let addr = listener.local_addr().map_err(|source| PropertyError::Io { path: "<listener>".into(), source })?;
    register_devices(&station, &db, addr, &opts.name)?;
    let shared = Arc::new(Shared {
        station: Mutex::new(station),
        hub: Mutex::new(Hub::default()),
        db,
        opts,
        tickets: AtomicU64::new(0),
        sessions: AtomicU64::new(0),
    });
    let (stop, stop_rx) = watch::channel(false);
    let mut tasks = vec![tokio::spawn(accept_loop(listener, shared.clone(), stop_rx.clone()))];
    if let ClockMode::Realtime { step_ms } = shared.opts.clock {
        tasks.push(tokio::spawn(clock_loop(shared.clone(), step_ms.max(1), stop_rx)));
    }
    Ok(ServerHandle { addr, shared, stop, tasks })
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>, mut stop: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            _ = stop.changed() => return,
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                let _ = stream.set_nodelay(true);
                let id = shared.sessions.fetch_add(1, Ordering::Relaxed) + 1;
                tokio::spawn(session(shared.clone(), stream, id, stop.clone()));
            }
        }
    }
}

async fn clock_loop(shared: Arc<Shared>, step_ms: u64, mut stop: watch::Receiver<bool>) {
    let start = tokio::time::Instant::now();
    let base = shared.lock().now();
    let mut interval = tokio::time::interval(Duration::from_millis(step_ms));
    loop {
        tokio::select! {
            _ = stop.changed() => return,
            _ = interval.tick() => {
                let target = base + start.elapsed().as_millis() as Tick;
                shared.with_station(|st| {
                    if target > st.now() {
                        st.advance_to(target);
                    }
                });
            }
        }
    }
}

async fn session(shared: Arc<Shared>, stream: TcpStream, id: SessionId, mut stop: watch::Receiver<bool>) {
    let (mut rd, mut wr) = stream.into_split();
    let (out, mut out_rx) = mpsc::channel::<Frame>(shared.opts.outbound_capacity.max(1));
    let writer = tokio::spawn(async move {
        while let Some(frame) = out_rx.recv().await {
            if codec::write_frame(&mut wr, &frame).await.is_err() {
                break;
            }
        }
    });
    loop {
        let body = tokio::select! {
            _ = stop.changed() => break,
            body = codec::read_body(&mut rd) => body,
        };
        let frame = match body {
            Ok(Some(body)) => codec::parse_body(&body),
            Ok(None) => break,
            Err(e @ FrameError::TooLarge(_)) => {
                // the stream cannot be resynchronised after an oversized prefix
                let _ = out.send(Frame::error(None, e.code(), &e)).await;
                break;
            }
            Err(_) => break,
        };
        match frame {
            Ok(frame) => {
                if handle(&shared, id, frame, &out).await.is_err() {
                    break;
                }
            }
            Err(e) => {
                if out.send(Frame::error(None, e.code(), &e)).await.is_err() {
                    break;
                }
            }
        }
    }
    shared.hub.lock().unwrap_or_else(|p| p.into_inner()).drop_session(id);
    drop(out);
    let _ = writer.await;
}

fn outcome(r: Result<Payload, DeviceError>) -> Outcome {
    match r {
        Ok(payload) => Outcome::Ok { payload },
        Err(e) => Outcome::Err { code: e.code().to_string(), message: e.to_string() },
    }
}

type Closed = mpsc::error::SendError<Frame>;

async fn handle(shared: &Arc<Shared>, session: SessionId, frame: Frame, out: &mpsc::Sender<Frame>) -> Result<(), Closed> {
    match frame {
        Frame::Sync { id, device, command, payload } => {
            let r = shared.with_station(|st| st.execute(&device, &command, &payload));
            let reply = match r {
                Ok(payload) => Frame::Reply { id, payload },
                Err(e) => Frame::error(Some(id), e.code(), &e),
            };
            out.send(reply).await
        }
        Frame::Async { id, device, command, payload } => {
            let ticket = shared.tickets.fetch_add(1, Ordering::Relaxed) + 1;
            out.send(Frame::Ack { id, ticket }).await?;
            let shared = shared.clone();
            let out = out.clone();
            tokio::spawn(async move {
                let r = shared.with_station(|st| st.execute(&device, &command, &payload));
                let _ = out.send(Frame::Completion { ticket, outcome: outcome(r) }).await;
            });
            Ok(())
        }
        Frame::Subscribe { id, device, event } => {
            // observe and register under one station lock so no change slips in between
            let registered = event.parse::<EventName>().and_then(|ev| {
                let mut st = shared.lock();
                let value = st.observe(&device, &ev)?;
                let mut hub = shared.hub.lock().unwrap_or_else(|p| p.into_inner());
                Ok(hub.subscribe(session, &device, ev, value, shared.opts.queue_capacity))
            });
            let q = match registered {
                Ok(q) => q,
                Err(e) => return out.send(Frame::error(Some(id), e.code(), &e)).await,
            };
            out.send(Frame::Subscribed { id, subscription: q.id }).await?;
            tokio::spawn(hub::forward(q, out.clone()));
            Ok(())
        }
        Frame::Unsubscribe { id, subscription } => {
            let removed = shared.hub.lock().unwrap_or_else(|p| p.into_inner()).unsubscribe(session, subscription);
            if removed {
                out.send(Frame::Reply { id, payload: Payload::None }).await
            } else {
                out.send(Frame::error(Some(id), "unknown-subscription", format!("no subscription {subscription}"))).await
            }
        }
        Frame::Describe { id, device } => {
            let r = shared.lock().commands(&device);
            match r {
                Ok(cmds) => out.send(Frame::Reply { id, payload: Payload::json(&cmds) }).await,
                Err(e) => out.send(Frame::error(Some(id), e.code(), &e)).await,
            }
        }
        other => {
            let id = match other {
                Frame::Reply { id, .. } | Frame::Ack { id, .. } | Frame::Subscribed { id, .. } => Some(id),
                _ => None,
            };
            out.send(Frame::error(id, "bad-frame", "frame kind is not accepted by the server")).await
        }
    }
}
