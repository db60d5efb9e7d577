//! The hook: event-triggered capture of a configured set of channels into a
//! linear or circular record buffer.
//!
//! Each configured channel is compiled once into an [`AccessPlan`]: a
//! read-program for simple channels, the driver's callback for complex ones.
//! On every trigger the plans run in configuration order and produce one
//! [`Record`]. With `async_write` the capture is a deferred job that takes
//! `capture_delay` ticks; a trigger that finds the previous job unfinished is
//! an overrun and is dropped whole.
//!
//! Records are published to readers under a lock, one complete record at a
//! time, so a concurrent reader never sees a partial record.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::busmap::LogicalId;
use crate::driver::{AccessPlan, BoardIo, ChannelDecl, DriverLayer, IoWindow, IrqTrigger, ValueKind};
use crate::hardware::{SlotAddress, Tick, Topology};

/// Floor of the hook's own software timer, in ticks.
pub const DEFAULT_MIN_TIMER_PERIOD: Tick = 10;

pub type HookId = u32;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelKey {
    pub driver: String,
    pub logical: LogicalId,
    pub channel: usize,
}

impl ChannelKey {
    pub fn new(driver: impl Into<String>, logical: u32, channel: usize) -> Self {
        ChannelKey { driver: driver.into(), logical: LogicalId(logical), channel }
    }
}

impl fmt::Display for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.driver, self.logical, self.channel)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    Timer { period: Tick },
    Interrupt { chassis: u16, slot: u16, line: u8 },
    Software,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferMode {
    Linear,
    Circular,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookConfig {
    pub channels: Vec<ChannelKey>,
    pub trigger: Trigger,
    pub capacity: usize,
    pub mode: BufferMode,
    #[serde(default)]
    pub async_write: bool,
    /// Simulated duration of an asynchronous capture job.
    #[serde(default)]
    pub capture_delay: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub event_seq: u64,
    pub timestamp: Tick,
    pub values: Vec<i64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookStatus {
    pub armed: bool,
    pub events_seen: u64,
    /// Records currently held in the buffer.
    pub records_stored: u64,
    /// Records ever stored, including those overwritten in circular mode.
    pub records_total: u64,
    pub overruns: u64,
    pub ignored_after_stop: u64,
    /// Captures that failed on a register access error.
    pub faults: u64,
    pub stopped_at_end: bool,
    pub capture_pending: bool,
    pub lowest_available: Option<u64>,
}

/// Records with `event_seq >= from_seq`; `lowest_available` exposes any gap
/// left by circular overwrites.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordBatch {
    pub lowest_available: Option<u64>,
    pub records: Vec<Record>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HookError {
    #[error("unknown hook {0}")]
    UnknownHook(HookId),
    #[error("channels of driver {0} already registered")]
    Duplicate(String),
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelKey),
    #[error("board of channel {0} is not attached")]
    NotAttached(ChannelKey),
    #[error("hook needs at least one channel")]
    NoChannels,
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("timer period {period} below minimum {min}")]
    PeriodTooSmall { period: Tick, min: Tick },
    #[error("a capture delay requires async_write")]
    DelayNeedsAsync,
    #[error("hook {0} stopped at end of buffer; arm with reset")]
    NeedsReset(HookId),
    #[error("hook {0} is not software-triggered")]
    NotSoftwareTriggered(HookId),
}

impl HookError {
    pub fn code(&self) -> &'static str {
        match self {
            HookError::UnknownHook(_) => "unknown-hook",
            HookError::Duplicate(_) => "duplicate",
            HookError::UnknownChannel(_) => "unknown-channel",
            HookError::NotAttached(_) => "not-attached",
            HookError::NoChannels => "no-channels",
            HookError::ZeroCapacity => "zero-capacity",
            HookError::PeriodTooSmall { .. } => "period-too-small",
            HookError::DelayNeedsAsync => "delay-needs-async",
            HookError::NeedsReset(_) => "needs-reset",
            HookError::NotSoftwareTriggered(_) => "not-software-triggered",
        }
    }
}

#[derive(Debug)]
struct Buffer {
    capacity: usize,
    mode: BufferMode,
    records: VecDeque<Record>,
    status: HookStatus,
}

impl Buffer {
    fn new(capacity: usize, mode: BufferMode) -> Self {
        Buffer { capacity, mode, records: VecDeque::with_capacity(capacity.min(4096)), status: HookStatus::default() }
    }

    fn push(&mut self, record: Record) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        self.status.records_total += 1;
        self.sync_counts();
    }

    fn sync_counts(&mut self) {
        self.status.records_stored = self.records.len() as u64;
        self.status.lowest_available = self.records.front().map(|r| r.event_seq);
    }

    fn full(&self) -> bool {
        self.records.len() >= self.capacity
    }
}

/// Read side of one hook's buffer; cheap to clone and safe to poll from other
/// threads while capture runs.
#[derive(Clone, Debug)]
pub struct HookReader {
    buffer: Arc<RwLock<Buffer>>,
}

impl HookReader {
    pub fn status(&self) -> HookStatus {
        self.buffer.read().expect("hook buffer lock").status.clone()
    }

    pub fn read_records(&self, from_seq: u64) -> RecordBatch {
        let buf = self.buffer.read().expect("hook buffer lock");
        RecordBatch {
            lowest_available: buf.status.lowest_available,
            records: buf.records.iter().filter(|r| r.event_seq >= from_seq).cloned().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HookState {
    Disarmed,
    Armed,
    /// Linear buffer full: no more captures, triggers still counted.
    Stopped,
}

#[derive(Clone, Debug)]
struct Column {
    key: ChannelKey,
    name: String,
    window: IoWindow,
    plan: AccessPlan,
    kind: ValueKind,
}

#[derive(Clone, Copy, Debug)]
struct PendingCapture {
    seq: u64,
    timestamp: Tick,
    due: Tick,
}

#[derive(Debug)]
struct Hook {
    config: HookConfig,
    columns: Vec<Column>,
    state: HookState,
    next_timer: Option<Tick>,
    pending: Option<PendingCapture>,
    buffer: Arc<RwLock<Buffer>>,
}

impl Hook {
    fn listening(&self) -> bool {
        self.state != HookState::Disarmed
    }

    fn set_state(&mut self, state: HookState) {
        self.state = state;
        let mut buf = self.buffer.write().expect("hook buffer lock");
        buf.status.armed = state == HookState::Armed;
        buf.status.stopped_at_end = state == HookState::Stopped;
    }

    fn status(&self) -> HookStatus {
        self.buffer.read().expect("hook buffer lock").status.clone()
    }

    fn trigger_event(&mut self, now: Tick, topology: &mut Topology, drivers: &mut DriverLayer) {
        let seq = {
            let mut buf = self.buffer.write().expect("hook buffer lock");
            buf.status.events_seen += 1;
            if self.state == HookState::Stopped {
                buf.status.ignored_after_stop += 1;
                return;
            }
            if self.pending.is_some() {
                buf.status.overruns += 1;
                return;
            }
            buf.status.events_seen
        };
        if self.config.async_write {
            self.pending = Some(PendingCapture { seq, timestamp: now, due: now + self.config.capture_delay });
            self.buffer.write().expect("hook buffer lock").status.capture_pending = true;
            if self.config.capture_delay == 0 {
                self.complete_pending(topology, drivers);
            }
        } else {
            self.capture(seq, now, topology, drivers);
        }
    }

    fn complete_pending(&mut self, topology: &mut Topology, drivers: &mut DriverLayer) {
        if let Some(p) = self.pending.take() {
            self.buffer.write().expect("hook buffer lock").status.capture_pending = false;
            self.capture(p.seq, p.timestamp, topology, drivers);
        }
    }

    fn capture(&mut self, seq: u64, timestamp: Tick, topology: &mut Topology, drivers: &mut DriverLayer) {
        let mut values = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            match col.plan.exec(&mut BoardIo::new(topology, col.window)) {
                Ok(raw) => {
                    let v = col.kind.convert(raw);
                    drivers.note_value(&col.key.driver, col.key.logical, col.key.channel, v);
                    values.push(v);
                }
                Err(_) => {
                    self.buffer.write().expect("hook buffer lock").status.faults += 1;
                    return;
                }
            }
        }
        let stop = {
            let mut buf = self.buffer.write().expect("hook buffer lock");
            buf.push(Record { event_seq: seq, timestamp, values });
            buf.mode == BufferMode::Linear && buf.full()
        };
        if stop {
            self.set_state(HookState::Stopped);
        }
    }

    fn csv_header(&self) -> String {
        let mut h = String::from("seq,timestamp");
        for c in &self.columns {
            h.push(',');
            h.push_str(&c.name);
        }
        h
    }
}

/// Registry of driver channels plus every configured hook.
#[derive(Debug)]
pub struct HookEngine {
    min_period: Tick,
    declarations: BTreeMap<String, Vec<ChannelDecl>>,
    plan_cache: HashMap<ChannelKey, AccessPlan>,
    hooks: BTreeMap<HookId, Hook>,
    next_id: HookId,
}

impl Default for HookEngine {
    fn default() -> Self {
        HookEngine::new(DEFAULT_MIN_TIMER_PERIOD)
    }
}

impl HookEngine {
    pub fn new(min_period: Tick) -> Self {
        HookEngine {
            min_period,
            declarations: BTreeMap::new(),
            plan_cache: HashMap::new(),
            hooks: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn min_period(&self) -> Tick {
        self.min_period
    }

    pub fn register_channels(&mut self, driver: &str, declarations: Vec<ChannelDecl>) -> Result<(), HookError> {
        if self.declarations.contains_key(driver) {
            return Err(HookError::Duplicate(driver.to_string()));
        }
        self.declarations.insert(driver.to_string(), declarations);
        Ok(())
    }

    fn declaration(&self, key: &ChannelKey) -> Result<&ChannelDecl, HookError> {
        self.declarations
            .get(&key.driver)
            .and_then(|d| d.get(key.channel))
            .ok_or_else(|| HookError::UnknownChannel(key.clone()))
    }

    /// What to run to read `key`: a program or a callback. Cached per key.
    pub fn plan_access(&mut self, key: &ChannelKey, drivers: &DriverLayer) -> Result<AccessPlan, HookError> {
        let plan = self.declaration(key)?.access.clone();
        if drivers.handle(&key.driver, key.logical).is_none() {
            return Err(HookError::NotAttached(key.clone()));
        }
        Ok(self.plan_cache.entry(key.clone()).or_insert(plan).clone())
    }

    /// Validates the config, compiles plans for every channel and allocates
    /// the buffer. The hook starts disarmed.
    pub fn configure(&mut self, config: HookConfig, drivers: &DriverLayer) -> Result<HookId, HookError> {
        if config.channels.is_empty() {
            return Err(HookError::NoChannels);
        }
        if config.capacity == 0 {
            return Err(HookError::ZeroCapacity);
        }
        if let Trigger::Timer { period } = config.trigger {
            if period < self.min_period {
                return Err(HookError::PeriodTooSmall { period, min: self.min_period });
            }
        }
        if config.capture_delay > 0 && !config.async_write {
            return Err(HookError::DelayNeedsAsync);
        }
        let mut columns = Vec::with_capacity(config.channels.len());
        for key in &config.channels {
            let plan = self.plan_access(key, drivers)?;
            let decl = self.declaration(key)?;
            let window = drivers.handle(&key.driver, key.logical).expect("checked by plan_access").window;
            columns.push(Column {
                key: key.clone(),
                name: format!("{}/{}/{}", key.driver, key.logical, decl.name),
                window,
                plan,
                kind: decl.kind,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        let buffer = Arc::new(RwLock::new(Buffer::new(config.capacity, config.mode)));
        self.hooks.insert(
            id,
            Hook { config, columns, state: HookState::Disarmed, next_timer: None, pending: None, buffer },
        );
        Ok(id)
    }

    fn hook(&self, id: HookId) -> Result<&Hook, HookError> {
        self.hooks.get(&id).ok_or(HookError::UnknownHook(id))
    }

    fn hook_mut(&mut self, id: HookId) -> Result<&mut Hook, HookError> {
        self.hooks.get_mut(&id).ok_or(HookError::UnknownHook(id))
    }

    pub fn config(&self, id: HookId) -> Result<&HookConfig, HookError> {
        Ok(&self.hook(id)?.config)
    }

    pub fn ids(&self) -> impl Iterator<Item = HookId> + '_ {
        self.hooks.keys().copied()
    }

    /// Starts capture. A linear hook that stopped at the end of its buffer
    /// needs `reset`, which clears records and counters.
    pub fn arm(&mut self, id: HookId, reset: bool, now: Tick) -> Result<HookStatus, HookError> {
        let hook = self.hook_mut(id)?;
        if hook.state == HookState::Stopped && !reset {
            return Err(HookError::NeedsReset(id));
        }
        if reset {
            hook.pending = None;
            let fresh = Buffer::new(hook.config.capacity, hook.config.mode);
            *hook.buffer.write().expect("hook buffer lock") = fresh;
        }
        if hook.state != HookState::Armed {
            hook.next_timer = match hook.config.trigger {
                Trigger::Timer { period } => Some(now + period),
                _ => None,
            };
        }
        hook.set_state(HookState::Armed);
        Ok(hook.status())
    }

    /// Stops capture; the buffer and an in-flight capture job are kept.
    pub fn disarm(&mut self, id: HookId) -> Result<HookStatus, HookError> {
        let hook = self.hook_mut(id)?;
        hook.next_timer = None;
        hook.set_state(HookState::Disarmed);
        Ok(hook.status())
    }

    pub fn status(&self, id: HookId) -> Result<HookStatus, HookError> {
        Ok(self.hook(id)?.status())
    }

    pub fn reader(&self, id: HookId) -> Result<HookReader, HookError> {
        Ok(HookReader { buffer: Arc::clone(&self.hook(id)?.buffer) })
    }

    pub fn read_records(&self, id: HookId, from_seq: u64) -> Result<RecordBatch, HookError> {
        Ok(self.reader(id)?.read_records(from_seq))
    }

    /// Buffer dump: header `seq,timestamp,<channel names...>`, one row per record.
    pub fn dump_csv(&self, id: HookId, from_seq: u64) -> Result<String, HookError> {
        let hook = self.hook(id)?;
        let mut out = hook.csv_header();
        out.push('\n');
        for r in self.read_records(id, from_seq)?.records {
            out.push_str(&format!("{},{}", r.event_seq, r.timestamp));
            for v in &r.values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Delivers one trigger to a listening hook.
    pub fn handle_event(
        &mut self,
        id: HookId,
        now: Tick,
        topology: &mut Topology,
        drivers: &mut DriverLayer,
    ) -> Result<(), HookError> {
        let hook = self.hook_mut(id)?;
        if hook.listening() {
            hook.trigger_event(now, topology, drivers);
        }
        Ok(())
    }

    pub fn fire_software(
        &mut self,
        id: HookId,
        now: Tick,
        topology: &mut Topology,
        drivers: &mut DriverLayer,
    ) -> Result<(), HookError> {
        if self.hook(id)?.config.trigger != Trigger::Software {
            return Err(HookError::NotSoftwareTriggered(id));
        }
        self.handle_event(id, now, topology, drivers)
    }

    /// Delivers a routed interrupt to every listening hook bound to its line.
    pub fn on_interrupt(&mut self, trigger: &IrqTrigger, topology: &mut Topology, drivers: &mut DriverLayer) {
        let ev = trigger.event;
        for hook in self.hooks.values_mut() {
            let matches = matches!(hook.config.trigger,
                Trigger::Interrupt { chassis, slot, line }
                    if SlotAddress::new(chassis, slot) == ev.at && line == ev.line);
            if matches && hook.listening() {
                hook.trigger_event(ev.timestamp, topology, drivers);
            }
        }
    }

    /// Earliest pending timer expiry or capture completion.
    pub fn next_due(&self) -> Option<Tick> {
        self.hooks.values().flat_map(|h| [h.next_timer, h.pending.map(|p| p.due)]).flatten().min()
    }

    /// Completes capture jobs due at or before `now`, then fires due timers.
    pub fn run_due(&mut self, now: Tick, topology: &mut Topology, drivers: &mut DriverLayer) {
        self.complete_due(now, topology, drivers);
        self.fire_timers(now, topology, drivers);
    }

    /// Finishes capture jobs due at or before `now`. A job completing on the
    /// same tick as a new trigger finishes first, so that trigger is no overrun.
    pub fn complete_due(&mut self, now: Tick, topology: &mut Topology, drivers: &mut DriverLayer) {
        for hook in self.hooks.values_mut() {
            if hook.pending.is_some_and(|p| p.due <= now) {
                hook.complete_pending(topology, drivers);
            }
        }
    }

    pub fn fire_timers(&mut self, now: Tick, topology: &mut Topology, drivers: &mut DriverLayer) {
        for hook in self.hooks.values_mut() {
            while let (Some(t), Trigger::Timer { period }) = (hook.next_timer, &hook.config.trigger) {
                if t > now {
                    break;
                }
                hook.next_timer = Some(t + period);
                hook.trigger_event(t, topology, drivers);
            }
        }
    }

    /// Hooks whose capture or trigger involves the board at `at` and that are
    /// still listening or have a capture in flight.
    pub fn active_on(&self, at: SlotAddress) -> Vec<HookId> {
        self.hooks
            .iter()
            .filter(|(_, h)| h.listening() || h.pending.is_some())
            .filter(|(_, h)| {
                h.columns.iter().any(|c| c.window.at == at)
                    || matches!(h.config.trigger, Trigger::Interrupt { chassis, slot, .. }
                        if SlotAddress::new(chassis, slot) == at)
            })
            .map(|(id, _)| *id)
            .collect()
    }

    /// Channel keys of a hook, in column order.
    pub fn channels(&self, id: HookId) -> Result<Vec<ChannelKey>, HookError> {
        Ok(self.hook(id)?.columns.iter().map(|c| c.key.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::Width;
    use crate::station::Station;

    fn count0() -> ChannelKey {
        ChannelKey::new("vct6", 1, 0)
    }

    fn timer_cfg(period: Tick, capacity: usize, mode: BufferMode) -> HookConfig {
        HookConfig {
            channels: vec![count0()],
            trigger: Trigger::Timer { period },
            capacity,
            mode,
            async_write: false,
            capture_delay: 0,
        }
    }

    #[test]
    fn linear_timer_fills_and_stops() {
        let mut st = Station::new(Topology::desk1());
        let id = st.configure_hook(timer_cfg(10, 100, BufferMode::Linear)).unwrap();
        st.arm_hook(id, false).unwrap();
        st.advance_clock(1000);
        let batch = st.read_records(id, 0).unwrap();
        let ts: Vec<Tick> = batch.records.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, (1..=100).map(|k| k * 10).collect::<Vec<_>>());
        assert!(batch.records.iter().all(|r| r.values == vec![r.timestamp as i64]));
        let s = st.hook_status(id).unwrap();
        assert!(s.stopped_at_end && !s.armed);
        st.advance_clock(100);
        let s = st.hook_status(id).unwrap();
        assert_eq!((s.records_stored, s.ignored_after_stop, s.events_seen), (100, 10, 110));
        assert_eq!(st.arm_hook(id, false).unwrap_err().code(), "needs-reset");
        let s = st.arm_hook(id, true).unwrap();
        assert_eq!((s.records_stored, s.events_seen, s.armed), (0, 0, true));
    }

    #[test]
    fn circular_keeps_latest() {
        let mut st = Station::new(Topology::desk1());
        let id = st.configure_hook(timer_cfg(10, 50, BufferMode::Circular)).unwrap();
        st.arm_hook(id, false).unwrap();
        st.advance_clock(1000);
        let b = st.read_records(id, 0).unwrap();
        assert_eq!(b.lowest_available, Some(51));
        let seqs: Vec<u64> = b.records.iter().map(|r| r.event_seq).collect();
        assert_eq!(seqs, (51..=100).collect::<Vec<_>>());
        assert_eq!(st.hook_status(id).unwrap().records_total, 100);
        assert_eq!(st.read_records(id, 90).unwrap().records.len(), 11);
    }

    #[test]
    fn config_errors() {
        let mut st = Station::new(Topology::desk1());
        let code = |st: &mut Station, c: HookConfig| st.configure_hook(c).unwrap_err().code();
        assert_eq!(code(&mut st, timer_cfg(9, 10, BufferMode::Linear)), "period-too-small");
        assert_eq!(code(&mut st, timer_cfg(10, 0, BufferMode::Linear)), "zero-capacity");
        let mut c = timer_cfg(10, 10, BufferMode::Linear);
        c.capture_delay = 3;
        assert_eq!(code(&mut st, c), "delay-needs-async");
        let mut c = timer_cfg(10, 10, BufferMode::Linear);
        c.channels = vec![ChannelKey::new("vct6", 1, 4)];
        assert_eq!(code(&mut st, c), "unknown-channel");
        let mut c = timer_cfg(10, 10, BufferMode::Linear);
        c.channels = vec![ChannelKey::new("vct6", 2, 0)];
        assert_eq!(code(&mut st, c), "not-attached");
        let mut c = timer_cfg(10, 10, BufferMode::Linear);
        c.channels.clear();
        assert_eq!(code(&mut st, c), "no-channels");
    }

    #[test]
    fn async_overrun_drops_every_other_event() {
        let mut st = Station::new(Topology::desk1());
        let mut cfg = timer_cfg(10, 1000, BufferMode::Linear);
        cfg.async_write = true;
        cfg.capture_delay = 15;
        let id = st.configure_hook(cfg).unwrap();
        st.arm_hook(id, false).unwrap();
        st.advance_clock(1000);
        st.disarm_hook(id).unwrap();
        st.advance_clock(20);
        let s = st.hook_status(id).unwrap();
        assert_eq!((s.events_seen, s.records_total, s.overruns), (100, 50, 50));
        let b = st.read_records(id, 0).unwrap();
        assert!(b.records.iter().all(|r| r.event_seq % 2 == 1));
        // the capture runs when the job completes, not at trigger time
        assert!(b.records.iter().all(|r| r.values[0] == r.timestamp as i64 + 15));
    }

    #[test]
    fn completion_on_trigger_tick_is_not_an_overrun() {
        let mut st = Station::new(Topology::desk1());
        let mut cfg = timer_cfg(10, 1000, BufferMode::Linear);
        cfg.async_write = true;
        cfg.capture_delay = 10;
        let id = st.configure_hook(cfg).unwrap();
        st.arm_hook(id, false).unwrap();
        st.advance_clock(500);
        let s = st.hook_status(id).unwrap();
        assert_eq!((s.overruns, s.records_total, s.capture_pending), (0, 49, true));
    }

    #[test]
    fn disarm_lets_pending_job_finish() {
        let mut st = Station::new(Topology::desk1());
        let mut cfg = timer_cfg(10, 10, BufferMode::Linear);
        cfg.async_write = true;
        cfg.capture_delay = 5;
        let id = st.configure_hook(cfg).unwrap();
        st.arm_hook(id, false).unwrap();
        st.advance_clock(12);
        st.disarm_hook(id).unwrap();
        st.advance_clock(100);
        let s = st.hook_status(id).unwrap();
        assert_eq!((s.events_seen, s.records_total, s.armed), (1, 1, false));
    }

    #[test]
    fn software_and_interrupt_triggers() {
        let mut st = Station::new(Topology::desk1());
        let mut cfg = timer_cfg(10, 10, BufferMode::Linear);
        cfg.trigger = Trigger::Software;
        let sw = st.configure_hook(cfg).unwrap();
        let timer = st.configure_hook(timer_cfg(10, 10, BufferMode::Linear)).unwrap();
        assert_eq!(st.fire_hook(timer).unwrap_err().code(), "not-software-triggered");
        st.fire_hook(sw).unwrap();
        assert_eq!(st.hook_status(sw).unwrap().events_seen, 0, "disarmed hooks ignore triggers");
        st.arm_hook(sw, false).unwrap();
        st.fire_hook(sw).unwrap();
        assert_eq!(st.hook_status(sw).unwrap().records_total, 1);

        let mut cfg = timer_cfg(10, 100, BufferMode::Linear);
        cfg.trigger = Trigger::Interrupt { chassis: 0, slot: 1, line: 0 };
        let irq = st.configure_hook(cfg).unwrap();
        st.arm_hook(irq, false).unwrap();
        st.write_register(SlotAddress::new(0, 1), crate::hardware::vct6::PERIOD, Width::Bits32, 25).unwrap();
        st.advance_clock(100);
        let ts: Vec<Tick> = st.read_records(irq, 0).unwrap().records.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![25, 50, 75, 100]);
        assert_eq!(st.drivers().counters().handled, 4);
    }

    #[test]
    fn csv_dump() {
        let mut st = Station::new(Topology::desk1());
        let mut cfg = timer_cfg(10, 10, BufferMode::Linear);
        cfg.channels.push(ChannelKey::new("adc8", 2, 8));
        let id = st.configure_hook(cfg).unwrap();
        st.arm_hook(id, false).unwrap();
        st.advance_clock(20);
        let csv = st.dump_hook(id, 0).unwrap();
        assert_eq!(csv, "seq,timestamp,vct6/1/count0,adc8/2/averaged\n1,10,10,4500\n2,20,20,4500\n");
    }

    #[test]
    fn readers_never_see_partial_records() {
        let mut st = Station::new(Topology::desk1());
        let mut cfg = timer_cfg(10, 64, BufferMode::Circular);
        cfg.channels = vec![count0(), count0(), count0(), count0()];
        let id = st.configure_hook(cfg).unwrap();
        let reader = st.hook_reader(id).unwrap();
        st.arm_hook(id, false).unwrap();
        let done = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
        let flag = done.clone();
        let t = std::thread::spawn(move || {
            let mut checked = 0u64;
            while !flag.load(std::sync::atomic::Ordering::Relaxed) {
                for r in reader.read_records(0).records {
                    assert_eq!(r.values.len(), 4);
                    assert!(r.values.iter().all(|v| *v == r.timestamp as i64));
                    checked += 1;
                }
            }
            checked
        });
        for _ in 0..2000 {
            st.advance_clock(10);
        }
        done.store(true, std::sync::atomic::Ordering::Relaxed);
        t.join().unwrap();
        assert_eq!(st.hook_status(id).unwrap().records_total, 2000);
    }
}
