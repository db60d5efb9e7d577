//! Subscriptions and change detection.
//!
//! Each subscription owns a bounded queue. A forwarder task drains it into the
//! session's outbound channel; when a slow client lets the queue fill up, the
//! subscription is dropped and the forwarder ends it with a `closed` frame
//! carrying `overflow` after the events already queued.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use deskctl_core::frame::Frame;
use deskctl_core::{EventName, Payload, Station};
use tokio::sync::mpsc;

pub(crate) type SessionId = u64;

struct Sub {
    session: SessionId,
    device: String,
    event: EventName,
    last: Payload,
    seq: u64,
    tx: mpsc::Sender<Frame>,
    overflowed: Arc<AtomicBool>,
}

#[derive(Default)]
pub(crate) struct Hub {
    subs: BTreeMap<u64, Sub>,
    next_id: u64,
}

/// Receiving end handed to the forwarder task.
pub(crate) struct SubQueue {
    pub id: u64,
    pub rx: mpsc::Receiver<Frame>,
    pub overflowed: Arc<AtomicBool>,
}

impl Hub {
    /// Registers a subscription whose current value is `initial` and queues
    /// that value as event 1.
    pub fn subscribe(
        &mut self,
        session: SessionId,
        device: &str,
        event: EventName,
        initial: Payload,
        capacity: usize,
    ) -> SubQueue {
        self.next_id += 1;
        let id = self.next_id;
        let (tx, rx) = mpsc::channel(capacity.max(1));
        let overflowed = Arc::new(AtomicBool::new(false));
        let first = Frame::Event { subscription: id, seq: 1, payload: initial.clone() };
        tx.try_send(first).expect("fresh queue has room");
        self.subs.insert(
            id,
            Sub { session, device: device.to_string(), event, last: initial, seq: 1, tx, overflowed: overflowed.clone() },
        );
        SubQueue { id, rx, overflowed }
    }

    pub fn unsubscribe(&mut self, session: SessionId, id: u64) -> bool {
        match self.subs.get(&id) {
            Some(s) if s.session == session => {
                self.subs.remove(&id);
                true
            }
            _ => false,
        }
    }

    pub fn drop_session(&mut self, session: SessionId) {
        self.subs.retain(|_, s| s.session != session);
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.subs.len()
    }

    /// Emits one event per subscription whose observed value changed.
    pub fn poll(&mut self, station: &mut Station) {
        let mut dead = Vec::new();
        for (id, sub) in self.subs.iter_mut() {
            let Ok(now) = station.observe(&sub.device, &sub.event) else { continue };
            if now == sub.last {
                continue;
            }
            sub.seq += 1;
            sub.last = now.clone();
            match sub.tx.try_send(Frame::Event { subscription: *id, seq: sub.seq, payload: now }) {
                Ok(()) => {}
                Err(mpsc::error::TrySendError::Full(_)) => {
                    sub.overflowed.store(true, Ordering::SeqCst);
                    dead.push(*id);
                }
                Err(mpsc::error::TrySendError::Closed(_)) => dead.push(*id),
            }
        }
        for id in dead {
            self.subs.remove(&id);
        }
    }
}

/// Moves queued events to the session; ends with `closed/overflow` if the
/// subscription was dropped for overflowing.
pub(crate) async fn forward(mut q: SubQueue, out: mpsc::Sender<Frame>) {
    while let Some(frame) = q.rx.recv().await {
        if out.send(frame).await.is_err() {
            return;
        }
    }
    if q.overflowed.load(Ordering::SeqCst) {
        let _ = out.send(Frame::Closed { subscription: q.id, code: "overflow".into() }).await;
    }
}
