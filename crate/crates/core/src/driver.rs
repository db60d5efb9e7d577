//! Driver layer: registration, board attachment with I/O window and IRQ
//! routing, interrupt dispatch and the `/drivers` state export.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::busmap::{BusMapError, LogicalId, MappingTable};
use crate::hardware::{BoardType, HwError, InterruptEvent, RegisterBus, SlotAddress, Topology, Width};
use crate::program::{BoardAccess, ExecError, Program, ProgramError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Unsigned,
    Signed,
}

impl ValueKind {
    /// Interprets a raw 32-bit register result.
    pub fn convert(self, raw: u32) -> i64 {
        match self {
            ValueKind::Unsigned => i64::from(raw),
            ValueKind::Signed => i64::from(raw as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cost {
    Simple,
    Complex,
}

impl Cost {
    pub fn as_str(self) -> &'static str {
        match self {
            Cost::Simple => "simple",
            Cost::Complex => "complex",
        }
    }
}

pub type ReadRoutine = dyn Fn(&mut BoardIo<'_>) -> Result<u32, ExecError> + Send + Sync;

/// Opaque handle on a driver-supplied read routine.
#[derive(Clone)]
pub struct CallbackRef {
    label: String,
    routine: Arc<ReadRoutine>,
}

impl CallbackRef {
    pub fn new(
        label: impl Into<String>,
        routine: impl Fn(&mut BoardIo<'_>) -> Result<u32, ExecError> + Send + Sync + 'static,
    ) -> Self {
        CallbackRef { label: label.into(), routine: Arc::new(routine) }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn call(&self, io: &mut BoardIo<'_>) -> Result<u32, ExecError> {
        (self.routine)(io)
    }
}

impl fmt::Debug for CallbackRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CallbackRef({})", self.label)
    }
}

impl PartialEq for CallbackRef {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && Arc::ptr_eq(&self.routine, &other.routine)
    }
}

/// How a channel value is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum AccessPlan {
    Program(Program),
    Callback(CallbackRef),
}

impl AccessPlan {
    pub fn exec(&self, io: &mut BoardIo<'_>) -> Result<u32, ExecError> {
        match self {
            AccessPlan::Program(p) => p.exec(io),
            AccessPlan::Callback(c) => c.call(io),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChannelDecl {
    pub index: usize,
    pub name: String,
    pub kind: ValueKind,
    pub cost: Cost,
    pub access: AccessPlan,
}

#[derive(Clone, Debug)]
pub struct DriverDescriptor {
    pub name: String,
    pub board_type: BoardType,
    pub channels: Vec<ChannelDecl>,
    pub commands: Vec<String>,
    /// Bounded work run on every routed interrupt (acknowledge writes).
    pub irq_ack: Option<Program>,
}

impl DriverDescriptor {
    pub fn channel_by_name(&self, name: &str) -> Option<&ChannelDecl> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        let bad = |reason: String| DriverError::InvalidDescriptor { driver: self.name.clone(), reason };
        let map = self.board_type.register_map();
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.index != i {
                return Err(bad(format!("channel {} has index {}", i, ch.index)));
            }
            if self.channels[..i].iter().any(|c| c.name == ch.name) {
                return Err(bad(format!("duplicate channel name {}", ch.name)));
            }
            match (&ch.access, ch.cost) {
                (AccessPlan::Program(p), Cost::Simple) => {
                    p.validate(map).map_err(|e| bad(format!("channel {}: {e}", ch.name)))?
                }
                (AccessPlan::Callback(_), Cost::Complex) => {}
                _ => return Err(bad(format!("channel {}: simple channels need a program, complex a callback", ch.name))),
            }
        }
        if let Some(ack) = &self.irq_ack {
            ack.validate(map).map_err(|e| bad(format!("irq ack: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DriverError {
    #[error("driver {0} already registered")]
    Duplicate(String),
    #[error("unknown driver {0}")]
    UnknownDriver(String),
    #[error("invalid descriptor for {driver}: {reason}")]
    InvalidDescriptor { driver: String, reason: String },
    #[error("driver {driver} handles {expected} boards, logical {logical} is {found}")]
    TypeMismatch { driver: String, logical: LogicalId, expected: BoardType, found: BoardType },
    #[error("logical board {logical} already attached to {driver}")]
    AlreadyAttached { driver: String, logical: LogicalId },
    #[error("board {driver}/{logical} is not attached")]
    NotAttached { driver: String, logical: LogicalId },
    #[error("interrupt line {line} of {at} already routed")]
    IrqBusy { at: SlotAddress, line: u8 },
    #[error("unknown channel {channel} of driver {driver}")]
    UnknownChannel { driver: String, channel: usize },
    #[error(transparent)]
    BusMap(#[from] BusMapError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

impl DriverError {
    pub fn code(&self) -> &'static str {
        match self {
            DriverError::Duplicate(_) => "duplicate",
            DriverError::UnknownDriver(_) => "unknown-driver",
            DriverError::InvalidDescriptor { .. } => "invalid-descriptor",
            DriverError::TypeMismatch { .. } => "type-mismatch",
            DriverError::AlreadyAttached { .. } => "already-attached",
            DriverError::NotAttached { .. } => "not-attached",
            DriverError::IrqBusy { .. } => "irq-busy",
            DriverError::UnknownChannel { .. } => "unknown-channel",
            DriverError::BusMap(e) => e.code(),
            DriverError::Exec(e) => e.code(),
        }
    }
}

impl From<HwError> for DriverError {
    fn from(e: HwError) -> Self {
        DriverError::Exec(ExecError::Hardware(e))
    }
}

impl From<ProgramError> for DriverError {
    fn from(e: ProgramError) -> Self {
        DriverError::Exec(ExecError::Malformed(e))
    }
}

/// Where a board's registers live. Remote crates map through the same window
/// as host-bus boards, so channel reads never depend on the bus kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoWindow {
    pub at: SlotAddress,
    pub base: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardHandle {
    pub driver: String,
    pub logical_id: LogicalId,
    pub window: IoWindow,
    pub irq_lines: Vec<u8>,
}

/// Register access through one board's I/O window.
pub struct BoardIo<'a> {
    bus: &'a mut Topology,
    window: IoWindow,
}

impl<'a> BoardIo<'a> {
    pub fn new(bus: &'a mut Topology, window: IoWindow) -> Self {
        BoardIo { bus, window }
    }

    pub fn window(&self) -> IoWindow {
        self.window
    }
}

impl BoardAccess for BoardIo<'_> {
    fn read(&mut self, offset: u32, width: Width) -> Result<u32, HwError> {
        self.bus.read_reg(self.window.at, self.window.base + offset, width)
    }

    fn write(&mut self, offset: u32, width: Width, value: u32) -> Result<(), HwError> {
        self.bus.write_reg(self.window.at, self.window.base + offset, width, value)
    }
}

#[derive(Clone, Debug)]
struct Attached {
    handle: BoardHandle,
    last: Vec<Option<i64>>,
}

/// Forwarded by a driver's interrupt handler to the hook engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IrqTrigger {
    pub event: InterruptEvent,
    pub logical_id: LogicalId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchCounters {
    pub handled: u64,
    pub dropped: u64,
}

/// Rendered `/drivers` tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateTree(pub String);

impl fmt::Display for StateTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Default)]
pub struct DriverLayer {
    drivers: BTreeMap<String, DriverDescriptor>,
    attached: BTreeMap<(String, LogicalId), Attached>,
    routes: HashMap<(SlotAddress, u8), (String, LogicalId)>,
    counters: DispatchCounters,
}

impl DriverLayer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_driver(&mut self, descriptor: DriverDescriptor) -> Result<(), DriverError> {
        if self.drivers.contains_key(&descriptor.name) {
            return Err(DriverError::Duplicate(descriptor.name));
        }
        descriptor.validate()?;
        self.drivers.insert(descriptor.name.clone(), descriptor);
        Ok(())
    }

    pub fn driver(&self, name: &str) -> Option<&DriverDescriptor> {
        self.drivers.get(name)
    }

    pub fn drivers(&self) -> impl Iterator<Item = &DriverDescriptor> {
        self.drivers.values()
    }

    /// Binds a driver to the board behind `logical_id` and routes its IRQ lines.
    pub fn attach(
        &mut self,
        driver: &str,
        logical_id: LogicalId,
        table: &MappingTable,
        topology: &Topology,
    ) -> Result<BoardHandle, DriverError> {
        let desc = self.drivers.get(driver).ok_or_else(|| DriverError::UnknownDriver(driver.to_string()))?;
        let binding = table.bound(logical_id, topology.generation())?;
        if binding.board_type != desc.board_type {
            return Err(DriverError::TypeMismatch {
                driver: driver.to_string(),
                logical: logical_id,
                expected: desc.board_type,
                found: binding.board_type,
            });
        }
        let key = (driver.to_string(), logical_id);
        if self.attached.contains_key(&key) {
            return Err(DriverError::AlreadyAttached { driver: driver.to_string(), logical: logical_id });
        }
        let at = binding.at;
        let irq_lines: Vec<u8> = (0..binding.board_type.irq_lines()).collect();
        if let Some(line) = irq_lines.iter().find(|l| self.routes.contains_key(&(at, **l))) {
            return Err(DriverError::IrqBusy { at, line: *line });
        }
        for line in &irq_lines {
            self.routes.insert((at, *line), key.clone());
        }
        let handle = BoardHandle { driver: driver.to_string(), logical_id, window: IoWindow { at, base: 0 }, irq_lines };
        let last = vec![None; desc.channels.len()];
        self.attached.insert(key, Attached { handle: handle.clone(), last });
        Ok(handle)
    }

    pub fn detach(&mut self, driver: &str, logical_id: LogicalId) -> Result<BoardHandle, DriverError> {
        let a = self
            .attached
            .remove(&(driver.to_string(), logical_id))
            .ok_or_else(|| DriverError::NotAttached { driver: driver.to_string(), logical: logical_id })?;
        for line in &a.handle.irq_lines {
            self.routes.remove(&(a.handle.window.at, *line));
        }
        Ok(a.handle)
    }

    pub fn handle(&self, driver: &str, logical_id: LogicalId) -> Option<&BoardHandle> {
        self.attached.get(&(driver.to_string(), logical_id)).map(|a| &a.handle)
    }

    pub fn handles(&self) -> impl Iterator<Item = &BoardHandle> {
        self.attached.values().map(|a| &a.handle)
    }

    pub fn handles_at(&self, at: SlotAddress) -> Vec<BoardHandle> {
        self.attached.values().filter(|a| a.handle.window.at == at).map(|a| a.handle.clone()).collect()
    }

    pub fn counters(&self) -> DispatchCounters {
        self.counters
    }

    /// Reads one channel of an attached board and records it as the last-known value.
    pub fn read_channel(
        &mut self,
        driver: &str,
        logical_id: LogicalId,
        channel: usize,
        topology: &mut Topology,
    ) -> Result<i64, DriverError> {
        let (plan, kind) = {
            let desc = self.drivers.get(driver).ok_or_else(|| DriverError::UnknownDriver(driver.to_string()))?;
            let ch = desc
                .channels
                .get(channel)
                .ok_or_else(|| DriverError::UnknownChannel { driver: driver.to_string(), channel })?;
            (ch.access.clone(), ch.kind)
        };
        let window = self
            .handle(driver, logical_id)
            .ok_or_else(|| DriverError::NotAttached { driver: driver.to_string(), logical: logical_id })?
            .window;
        let raw = plan.exec(&mut BoardIo::new(topology, window))?;
        let value = kind.convert(raw);
        self.note_value(driver, logical_id, channel, value);
        Ok(value)
    }

    pub fn note_value(&mut self, driver: &str, logical_id: LogicalId, channel: usize, value: i64) {
        if let Some(slot) = self
            .attached
            .get_mut(&(driver.to_string(), logical_id))
            .and_then(|a| a.last.get_mut(channel))
        {
            *slot = Some(value);
        }
    }

    /// Runs the owning driver's handler for a hardware interrupt.
    ///
    /// The handler only executes the driver's acknowledge program, never a
    /// complex read; anything heavier is left to the hook engine. Unrouted
    /// events are counted and dropped.
    pub fn dispatch_interrupt(&mut self, event: InterruptEvent, topology: &mut Topology) -> Option<IrqTrigger> {
        let Some((driver, logical_id)) = self.routes.get(&(event.at, event.line)).cloned() else {
            self.counters.dropped += 1;
            return None;
        };
        self.counters.handled += 1;
        let ack = self.drivers.get(&driver).and_then(|d| d.irq_ack.clone());
        if let Some(ack) = ack {
            // a failing ack does not lose the event
            let _ = ack.exec(&mut BoardIo::new(topology, IoWindow { at: event.at, base: 0 }));
        }
        Some(IrqTrigger { event, logical_id })
    }

    /// `/drivers` tree, sorted by driver name then logical id.
    pub fn export_state(&self) -> StateTree {
        let mut out = String::from("/drivers\n");
        for (name, desc) in &self.drivers {
            out.push_str(&format!("/drivers/{name}\n"));
            for ((_, logical), a) in self.attached.range((name.clone(), LogicalId(0))..) {
                if a.handle.driver != *name {
                    break;
                }
                let irq: Vec<String> = a.handle.irq_lines.iter().map(u8::to_string).collect();
                out.push_str(&format!(
                    "/drivers/{name}/{logical}: board={logical} at={} irq=[{}]\n",
                    a.handle.window.at,
                    irq.join(",")
                ));
                for (ch, last) in desc.channels.iter().zip(&a.last) {
                    let last = last.map_or_else(|| "none".to_string(), |v| v.to_string());
                    out.push_str(&format!("  ch{} {} {} last={last}\n", ch.index, ch.name, ch.cost.as_str()));
                }
            }
        }
        StateTree(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::busmap::enumerate;
    use crate::drivers::builtin;
    use crate::hardware::{mot4, vct6, BusKind, Hotswap};

    fn setup() -> (Topology, MappingTable, DriverLayer) {
        let topo = Topology::desk1();
        let mut table = MappingTable::new();
        table.reconcile(&enumerate(&topo));
        let mut layer = DriverLayer::new();
        for d in builtin() {
            layer.register_driver(d).unwrap();
        }
        (topo, table, layer)
    }

    #[test]
    fn duplicate_registration() {
        let (_, _, mut layer) = setup();
        let again = builtin().into_iter().next().unwrap();
        assert_eq!(layer.register_driver(again), Err(DriverError::Duplicate("vct6".into())));
    }

    #[test]
    fn adc8_has_nine_channels() {
        let (_, _, layer) = setup();
        let adc = layer.driver("adc8").unwrap();
        assert_eq!(adc.channels.len(), 9);
        assert_eq!(adc.channels[8].cost, Cost::Complex);
    }

    #[test]
    fn empty_tree_is_root_only() {
        assert_eq!(DriverLayer::new().export_state().0, "/drivers\n");
        let mut layer = DriverLayer::new();
        layer.register_driver(builtin().remove(0)).unwrap();
        assert_eq!(layer.export_state().0, "/drivers\n/drivers/vct6\n");
    }

    #[test]
    fn attach_and_export() {
        let (topo, table, mut layer) = setup();
        let h = layer.attach("vct6", LogicalId(1), &table, &topo).unwrap();
        assert_eq!(h.window.at, SlotAddress::new(0, 1));
        let text = layer.export_state().0;
        assert!(text.contains("/drivers/vct6/1: board=1 at=0/1 irq=[0]\n"), "{text}");
        assert!(text.contains("  ch0 count0 simple last=none\n"));
        assert_eq!(layer.export_state(), layer.export_state());
    }

    #[test]
    fn export_sorted_regardless_of_attach_order() {
        let (topo, table, mut layer) = setup();
        layer.attach("mot4", LogicalId(3), &table, &topo).unwrap();
        layer.attach("dio16", LogicalId(4), &table, &topo).unwrap();
        layer.attach("adc8", LogicalId(2), &table, &topo).unwrap();
        let text = layer.export_state().0;
        let order: Vec<_> = text.lines().filter(|l| l.contains(": board=")).map(|l| l.split(':').next().unwrap()).collect();
        assert_eq!(order, vec!["/drivers/adc8/2", "/drivers/dio16/4", "/drivers/mot4/3"]);
    }

    #[test]
    fn attach_errors() {
        let (mut topo, mut table, mut layer) = setup();
        assert!(matches!(
            layer.attach("vct6", LogicalId(2), &table, &topo),
            Err(DriverError::TypeMismatch { found: BoardType::Adc8, .. })
        ));
        assert_eq!(
            layer.attach("nope", LogicalId(1), &table, &topo),
            Err(DriverError::UnknownDriver("nope".into()))
        );
        topo.hotswap(Hotswap::Remove(SlotAddress::new(0, 2))).unwrap();
        table.reconcile(&enumerate(&topo));
        assert_eq!(
            layer.attach("adc8", LogicalId(2), &table, &topo),
            Err(DriverError::BusMap(BusMapError::BindingMissing(LogicalId(2))))
        );
    }

    #[test]
    fn remote_board_reads_like_local() {
        let (mut topo, table, mut layer) = setup();
        layer.attach("mot4", LogicalId(3), &table, &topo).unwrap();
        assert_eq!(topo.crate_of(1).unwrap().bus_kind(), BusKind::RemoteVme);
        topo.write(SlotAddress::new(1, 3), mot4::pos(0), 100).unwrap();
        assert_eq!(layer.read_channel("mot4", LogicalId(3), 0, &mut topo), Ok(100));
        topo.write(SlotAddress::new(1, 3), mot4::pos(0), u64::from((-7i32) as u32)).unwrap();
        assert_eq!(layer.read_channel("mot4", LogicalId(3), 0, &mut topo), Ok(-7));
        assert!(layer.export_state().0.contains("  ch0 pos0 simple last=-7\n"));
    }

    #[test]
    fn dispatch_routes_and_drops() {
        let (mut topo, table, mut layer) = setup();
        layer.attach("vct6", LogicalId(1), &table, &topo).unwrap();
        topo.write(SlotAddress::new(0, 1), vct6::PERIOD, 10).unwrap();
        let events = topo.advance_clock(30);
        let triggers: Vec<_> = events.iter().filter_map(|e| layer.dispatch_interrupt(*e, &mut topo)).collect();
        assert_eq!(triggers.iter().map(|t| t.event.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(topo.read(SlotAddress::new(0, 1), vct6::STATUS), Ok(1));

        let stray = topo.inject_interrupt(SlotAddress::new(1, 5), 0).unwrap();
        assert_eq!(layer.dispatch_interrupt(stray, &mut topo), None);
        assert_eq!(layer.counters(), DispatchCounters { handled: 3, dropped: 1 });
    }
}
