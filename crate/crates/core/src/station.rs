//! One desk station: simulated hardware, bus map, drivers, hooks and the
//! devices clients talk to, driven by a single simulated clock.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::busmap::{enumerate, BindingState, BusMapError, ChangeReport, LogicalId, MappingTable};
use crate::device::{ArgKind, CommandDescriptor, DeviceError, DeviceName, EventName, Payload};
use crate::driver::{DriverDescriptor, DriverError, StateTree};
use crate::drivers;
use crate::hardware::{mot4, vct6, adc8, dio16, BoardType, HwError, Hotswap, SlotAddress, Tick, Topology, Width};
use crate::hook::{HookConfig, HookEngine, HookError, HookId, HookReader, HookStatus, RecordBatch, DEFAULT_MIN_TIMER_PERIOD};

pub const STATION_DEVICE: &str = "sys/station/1";

#[derive(Debug, Error)]
pub enum StationError {
    #[error(transparent)]
    Hardware(#[from] HwError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Hook(#[from] HookError),
    #[error(transparent)]
    BusMap(#[from] BusMapError),
    #[error("board at {at} is in use by armed hooks {hooks:?}")]
    HookArmed { at: SlotAddress, hooks: Vec<HookId> },
    #[error("device {0} already exists")]
    DeviceExists(String),
}

impl StationError {
    pub fn code(&self) -> &'static str {
        match self {
            StationError::Hardware(e) => e.code(),
            StationError::Driver(e) => e.code(),
            StationError::Hook(e) => e.code(),
            StationError::BusMap(e) => e.code(),
            StationError::HookArmed { .. } => "hook-armed",
            StationError::DeviceExists(_) => "device-exists",
        }
    }
}

impl From<StationError> for DeviceError {
    fn from(e: StationError) -> Self {
        DeviceError::failed(e.code(), e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeviceKind {
    Counter,
    Adc,
    Motor,
    Dio,
    Station,
}

impl DeviceKind {
    pub fn for_board(t: BoardType) -> DeviceKind {
        match t {
            BoardType::Vct6 => DeviceKind::Counter,
            BoardType::Adc8 => DeviceKind::Adc,
            BoardType::Mot4 => DeviceKind::Motor,
            BoardType::Dio16 => DeviceKind::Dio,
        }
    }

    pub fn family(self) -> &'static str {
        match self {
            DeviceKind::Counter => "counter",
            DeviceKind::Adc => "adc",
            DeviceKind::Motor => "motor",
            DeviceKind::Dio => "dio",
            DeviceKind::Station => "station",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.family())
    }
}

/// A device bound to a board through a driver and a logical id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceBinding {
    pub kind: DeviceKind,
    pub driver: String,
    pub logical: Option<LogicalId>,
}

pub struct Station {
    topology: Topology,
    table: MappingTable,
    drivers: crate::driver::DriverLayer,
    hooks: HookEngine,
    devices: BTreeMap<DeviceName, DeviceBinding>,
}

impl Station {
    /// Station over `topology` with the built-in drivers attached to every
    /// board and one device per board, named `sim/<family>/<n>`.
    pub fn new(topology: Topology) -> Self {
        Station::from_parts(topology, MappingTable::new(), DEFAULT_MIN_TIMER_PERIOD)
    }

    /// Like [`Station::new`] but starting from a persisted mapping table, so
    /// logical ids survive a restart.
    pub fn from_parts(topology: Topology, table: MappingTable, min_period: Tick) -> Self {
        let mut st = Station {
            topology,
            table,
            drivers: crate::driver::DriverLayer::new(),
            hooks: HookEngine::new(min_period),
            devices: BTreeMap::new(),
        };
        for d in drivers::builtin() {
            st.register_driver(d).expect("built-in drivers are valid");
        }
        st.reconcile();
        let station = DeviceBinding { kind: DeviceKind::Station, driver: String::new(), logical: None };
        st.devices.insert(STATION_DEVICE.parse().expect("valid name"), station);
        let mut counts: BTreeMap<DeviceKind, u32> = BTreeMap::new();
        let bound: Vec<_> = st
            .table
            .bindings()
            .filter(|b| b.state == BindingState::Bound)
            .map(|b| (b.logical_id, b.board_type))
            .collect();
        for (logical, t) in bound {
            let kind = DeviceKind::for_board(t);
            let n = counts.entry(kind).or_insert(0);
            *n += 1;
            let name: DeviceName = format!("sim/{}/{}", kind.family(), n).parse().expect("valid name");
            st.devices.insert(name, DeviceBinding { kind, driver: t.as_str().to_string(), logical: Some(logical) });
        }
        st
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn table(&self) -> &MappingTable {
        &self.table
    }

    pub fn drivers(&self) -> &crate::driver::DriverLayer {
        &self.drivers
    }

    pub fn hooks(&self) -> &HookEngine {
        &self.hooks
    }

    pub fn now(&self) -> Tick {
        self.topology.clock()
    }

    pub fn register_driver(&mut self, desc: DriverDescriptor) -> Result<(), StationError> {
        let name = desc.name.clone();
        let channels = desc.channels.clone();
        self.drivers.register_driver(desc)?;
        self.hooks.register_channels(&name, channels)?;
        Ok(())
    }

    pub fn attach(&mut self, driver: &str, logical: LogicalId) -> Result<(), StationError> {
        self.drivers.attach(driver, logical, &self.table, &self.topology)?;
        Ok(())
    }

    pub fn detach(&mut self, driver: &str, logical: LogicalId) -> Result<(), StationError> {
        self.drivers.detach(driver, logical)?;
        Ok(())
    }

    /// Re-enumerates the bus, updates the mapping table and attaches the
    /// built-in driver to every bound board that has none.
    pub fn reconcile(&mut self) -> ChangeReport {
        let report = self.table.reconcile(&enumerate(&self.topology));
        let bound: Vec<_> = self
            .table
            .bindings()
            .filter(|b| b.state == BindingState::Bound)
            .map(|b| (b.logical_id, b.at, b.board_type))
            .collect();
        for (logical, at, t) in bound {
            if self.drivers.handles_at(at).is_empty() {
                let _ = self.drivers.attach(t.as_str(), logical, &self.table, &self.topology);
            }
        }
        report
    }

    pub fn forget(&mut self, logical: LogicalId) -> Result<(), StationError> {
        self.table.forget(logical)?;
        Ok(())
    }

    /// Removes or inserts a board and reconciles. Refused while a hook that
    /// reads or is triggered by the board is armed.
    pub fn hotswap(&mut self, action: Hotswap) -> Result<ChangeReport, StationError> {
        let at = match &action {
            Hotswap::Remove(at) | Hotswap::Insert(at, _) => *at,
        };
        let active = self.hooks.active_on(at);
        if !active.is_empty() {
            return Err(StationError::HookArmed { at, hooks: active });
        }
        let removing = matches!(action, Hotswap::Remove(_));
        self.topology.hotswap(action)?;
        if removing {
            for h in self.drivers.handles_at(at) {
                self.drivers.detach(&h.driver, h.logical_id)?;
            }
        }
        Ok(self.reconcile())
    }

    /// Earliest tick at which something happens: a periodic interrupt, a
    /// hook timer or a capture completion.
    pub fn next_event_at(&self) -> Option<Tick> {
        [self.topology.next_interrupt_at(), self.hooks.next_due()].into_iter().flatten().min()
    }

    fn step_to(&mut self, t: Tick) {
        let events = self.topology.advance_to(t);
        self.hooks.complete_due(t, &mut self.topology, &mut self.drivers);
        for ev in events {
            if let Some(trigger) = self.drivers.dispatch_interrupt(ev, &mut self.topology) {
                self.hooks.on_interrupt(&trigger, &mut self.topology, &mut self.drivers);
            }
        }
        self.hooks.fire_timers(t, &mut self.topology, &mut self.drivers);
    }

    /// Runs the clock forward `dt` ticks, processing every event in order.
    pub fn advance_clock(&mut self, dt: Tick) -> Tick {
        self.advance_to(self.now() + dt)
    }

    pub fn advance_to(&mut self, end: Tick) -> Tick {
        while let Some(t) = self.next_event_at().filter(|&t| t <= end) {
            self.step_to(t.max(self.now()));
        }
        if end > self.now() {
            self.step_to(end);
        }
        self.now()
    }

    /// Processes only the next event, if it is at or before `limit`.
    pub fn step_until(&mut self, limit: Tick) -> Option<Tick> {
        let t = self.next_event_at().filter(|&t| t <= limit)?;
        self.step_to(t.max(self.now()));
        Some(t)
    }

    /// Raises an interrupt now and delivers it to drivers and hooks.
    pub fn inject_interrupt(&mut self, at: SlotAddress, line: u8) -> Result<u64, StationError> {
        let ev = self.topology.inject_interrupt(at, line)?;
        if let Some(trigger) = self.drivers.dispatch_interrupt(ev, &mut self.topology) {
            self.hooks.on_interrupt(&trigger, &mut self.topology, &mut self.drivers);
        }
        Ok(ev.seq)
    }

    pub fn read_register(&mut self, at: SlotAddress, offset: u32, width: Width) -> Result<u32, StationError> {
        use crate::hardware::RegisterBus;
        Ok(self.topology.read_reg(at, offset, width)?)
    }

    pub fn write_register(&mut self, at: SlotAddress, offset: u32, width: Width, value: u32) -> Result<(), StationError> {
        use crate::hardware::RegisterBus;
        Ok(self.topology.write_reg(at, offset, width, value)?)
    }

    pub fn read_channel(&mut self, driver: &str, logical: LogicalId, channel: usize) -> Result<i64, StationError> {
        Ok(self.drivers.read_channel(driver, logical, channel, &mut self.topology)?)
    }

    pub fn export_state(&self) -> StateTree {
        self.drivers.export_state()
    }

    /// Mapping table, one line per binding.
    pub fn render_bindings(&self) -> String {
        let mut out = String::new();
        for b in self.table.bindings() {
            let state = match b.state {
                BindingState::Bound => "bound",
                BindingState::Missing => "missing",
            };
            out.push_str(&format!(
                "logical={} type={} at={} state={state} last_seen={}\n",
                b.logical_id, b.board_type, b.at, b.last_seen_generation
            ));
        }
        out
    }

    // hooks

    pub fn configure_hook(&mut self, config: HookConfig) -> Result<HookId, StationError> {
        Ok(self.hooks.configure(config, &self.drivers)?)
    }

    pub fn arm_hook(&mut self, id: HookId, reset: bool) -> Result<HookStatus, StationError> {
        let now = self.now();
        Ok(self.hooks.arm(id, reset, now)?)
    }

    pub fn disarm_hook(&mut self, id: HookId) -> Result<HookStatus, StationError> {
        Ok(self.hooks.disarm(id)?)
    }

    pub fn hook_status(&self, id: HookId) -> Result<HookStatus, StationError> {
        Ok(self.hooks.status(id)?)
    }

    pub fn hook_reader(&self, id: HookId) -> Result<HookReader, StationError> {
        Ok(self.hooks.reader(id)?)
    }

    pub fn read_records(&self, id: HookId, from_seq: u64) -> Result<RecordBatch, StationError> {
        Ok(self.hooks.read_records(id, from_seq)?)
    }

    pub fn dump_hook(&self, id: HookId, from_seq: u64) -> Result<String, StationError> {
        Ok(self.hooks.dump_csv(id, from_seq)?)
    }

    pub fn fire_hook(&mut self, id: HookId) -> Result<(), StationError> {
        let now = self.now();
        Ok(self.hooks.fire_software(id, now, &mut self.topology, &mut self.drivers)?)
    }

    // devices

    pub fn devices(&self) -> impl Iterator<Item = (&DeviceName, &DeviceBinding)> {
        self.devices.iter()
    }

    pub fn device(&self, name: &str) -> Result<&DeviceBinding, DeviceError> {
        let name: DeviceName = name.parse()?;
        self.devices.get(&name).ok_or_else(|| DeviceError::UnknownDevice(name.to_string()))
    }

    /// Adds a device for a board already driven by `driver`.
    pub fn add_device(&mut self, name: &str, driver: &str, logical: LogicalId) -> Result<(), DeviceError> {
        let parsed: DeviceName = name.parse()?;
        if self.devices.contains_key(&parsed) {
            return Err(StationError::DeviceExists(name.to_string()).into());
        }
        let desc = self.drivers.driver(driver).ok_or_else(|| {
            DeviceError::from(StationError::Driver(DriverError::UnknownDriver(driver.to_string())))
        })?;
        let kind = DeviceKind::for_board(desc.board_type);
        self.devices.insert(parsed, DeviceBinding { kind, driver: driver.to_string(), logical: Some(logical) });
        Ok(())
    }

    pub fn commands(&self, name: &str) -> Result<Vec<CommandDescriptor>, DeviceError> {
        Ok(commands_of(self.device(name)?.kind))
    }

    /// Runs one command to completion.
    pub fn execute(&mut self, name: &str, command: &str, payload: &Payload) -> Result<Payload, DeviceError> {
        let binding = self.device(name)?.clone();
        let desc = commands_of(binding.kind)
            .into_iter()
            .find(|c| c.name == command)
            .ok_or_else(|| DeviceError::UnknownCommand { device: name.to_string(), command: command.to_string() })?;
        if !desc.accepts(payload) {
            return Err(DeviceError::bad_payload(command, format!("expected {:?}", desc.arg)));
        }
        match binding.kind {
            DeviceKind::Station => self.station_command(command, payload),
            _ => self.board_command(&binding, command, payload),
        }
    }

    /// Current value of a subscribable event.
    pub fn observe(&mut self, name: &str, event: &EventName) -> Result<Payload, DeviceError> {
        let binding = self.device(name)?.clone();
        match event {
            EventName::State => Ok(Payload::Str(self.device_state(&binding).to_string())),
            EventName::Value(ch) => {
                let idx = self.channel_index(&binding, ch).ok_or_else(|| DeviceError::UnknownEvent(event.to_string()))?;
                let logical = binding.logical.expect("board devices have a logical id");
                Ok(Payload::Int(self.read_channel(&binding.driver, logical, idx)?))
            }
            EventName::Hook(id) if binding.kind == DeviceKind::Station => {
                Ok(Payload::json(&self.hook_status(*id)?))
            }
            EventName::Hook(_) => Err(DeviceError::UnknownEvent(event.to_string())),
        }
    }

    fn channel_index(&self, binding: &DeviceBinding, channel: &str) -> Option<usize> {
        self.drivers.driver(&binding.driver)?.channel_by_name(channel).map(|c| c.index)
    }

    fn device_state(&self, binding: &DeviceBinding) -> &'static str {
        let Some(logical) = binding.logical else { return "ON" };
        let Some(handle) = self.drivers.handle(&binding.driver, logical) else { return "FAULT" };
        if self.table.bound(logical, self.topology.generation()).is_err() {
            return "FAULT";
        }
        if binding.kind == DeviceKind::Motor && self.topology.read(handle.window.at, mot4::CMD).unwrap_or(0) != 0 {
            return "MOVING";
        }
        "ON"
    }

    fn board_command(&mut self, b: &DeviceBinding, command: &str, payload: &Payload) -> Result<Payload, DeviceError> {
        let logical = b.logical.expect("board devices have a logical id");
        match command {
            "State" => return Ok(Payload::Str(self.device_state(b).to_string())),
            "Status" => {
                let at = self.table.binding(logical).map(|x| x.at.to_string()).unwrap_or_else(|| "-".into());
                return Ok(Payload::Str(format!(
                    "{} logical={logical} at={at} state={}",
                    b.driver,
                    self.device_state(b)
                )));
            }
            _ => {}
        }
        if self.device_state(b) == "FAULT" {
            return Err(DeviceError::failed("board-unavailable", format!("logical board {logical} is not bound")));
        }
        let at = self.drivers.handle(&b.driver, logical).expect("checked by device_state").window.at;
        let int = |i: usize| payload.int_args().and_then(|v| v.get(i).copied());
        let need = |i: usize| int(i).ok_or_else(|| DeviceError::bad_payload(command, format!("missing argument {i}")));
        let index = |v: i64, n: usize| {
            usize::try_from(v).ok().filter(|&x| x < n).ok_or_else(|| DeviceError::bad_payload(command, format!("index {v} out of range")))
        };
        let ch_count = self.drivers.driver(&b.driver).map_or(0, |d| d.channels.len());
        match command {
            "ReadChannel" => {
                let ch = index(need(0)?, ch_count)?;
                Ok(Payload::Int(self.read_channel(&b.driver, logical, ch)?))
            }
            "Read" => {
                let n = index(payload.as_int().unwrap_or(0), vct6::COUNTERS)?;
                Ok(Payload::Int(self.read_channel(&b.driver, logical, n)?))
            }
            "SetPeriod" => {
                let p = u32::try_from(need(0)?).map_err(|_| DeviceError::bad_payload(command, "period out of range"))?;
                self.write_register(at, vct6::PERIOD, Width::Bits32, p)?;
                Ok(Payload::None)
            }
            "ReadPos" => {
                let axis = index(need(0)?, mot4::AXES)?;
                Ok(Payload::Int(self.read_channel(&b.driver, logical, axis)?))
            }
            "Move" | "Jog" => {
                let axis = index(need(0)?, mot4::AXES)?;
                let arg = need(1)?;
                let target = if command == "Jog" {
                    let cur = self.read_register(at, mot4::pos(axis), Width::Bits32)? as i32 as i64;
                    cur.wrapping_add(arg)
                } else {
                    arg
                };
                let raw = i32::try_from(target).map_err(|_| DeviceError::bad_payload(command, "position out of range"))?;
                self.write_register(at, mot4::pos(axis), Width::Bits32, raw as u32)?;
                Ok(if command == "Jog" { Payload::Int(target) } else { Payload::None })
            }
            "Start" | "Stop" => {
                let axis = index(need(0)?, mot4::AXES)?;
                let cmd = self.read_register(at, mot4::CMD, Width::Bits8)?;
                let cmd = if command == "Start" { cmd | (1 << axis) } else { cmd & !(1 << axis) };
                self.write_register(at, mot4::CMD, Width::Bits8, cmd)?;
                Ok(Payload::None)
            }
            "SetMode" => {
                let ch = index(need(0)?, adc8::CHANNELS)?;
                let mode = need(1)?;
                if !(0..=2).contains(&mode) {
                    return Err(DeviceError::bad_payload(command, "mode must be 0, 1 or 2"));
                }
                self.write_register(at, adc8::mode(ch), Width::Bits8, mode as u32)?;
                if let Some(level) = int(2) {
                    let level = u16::try_from(level).map_err(|_| DeviceError::bad_payload(command, "level out of range"))?;
                    self.write_register(at, adc8::level(ch), Width::Bits16, level as u32)?;
                }
                Ok(Payload::None)
            }
            "Write" => {
                let v = u16::try_from(need(0)?).map_err(|_| DeviceError::bad_payload(command, "value must fit 16 bits"))?;
                self.write_register(at, dio16::DATA, Width::Bits16, v as u32)?;
                Ok(Payload::None)
            }
            _ => Err(DeviceError::UnknownCommand { device: b.kind.to_string(), command: command.to_string() }),
        }
    }

    fn station_command(&mut self, command: &str, payload: &Payload) -> Result<Payload, DeviceError> {
        let args = payload.int_args().unwrap_or_default();
        let hook_id = || {
            args.first()
                .and_then(|&v| HookId::try_from(v).ok())
                .ok_or_else(|| DeviceError::bad_payload(command, "expected a hook id"))
        };
        let from = args.get(1).copied().unwrap_or(0).max(0) as u64;
        match command {
            "Now" => Ok(Payload::Int(self.now() as i64)),
            "Advance" => {
                let dt = payload.as_int().filter(|&v| v >= 0).ok_or_else(|| DeviceError::bad_payload(command, "ticks must be >= 0"))?;
                Ok(Payload::Int(self.advance_clock(dt as Tick) as i64))
            }
            "ExportState" => Ok(Payload::Str(self.export_state().to_string())),
            "Bindings" => Ok(Payload::Str(self.render_bindings())),
            "Interrupt" => {
                let &[c, s, line] = args.as_slice() else {
                    return Err(DeviceError::bad_payload(command, "expected [chassis, slot, line]"));
                };
                let (Ok(c), Ok(s), Ok(line)) = (u16::try_from(c), u16::try_from(s), u8::try_from(line)) else {
                    return Err(DeviceError::bad_payload(command, "argument out of range"));
                };
                Ok(Payload::Int(self.inject_interrupt(SlotAddress::new(c, s), line)? as i64))
            }
            "HookConfig" => {
                let text = payload.as_str().unwrap_or_default();
                let cfg: HookConfig = serde_json::from_str(text).map_err(|e| DeviceError::bad_payload(command, e.to_string()))?;
                Ok(Payload::Int(self.configure_hook(cfg)? as i64))
            }
            "HookArm" => {
                let reset = args.get(1).copied().unwrap_or(0) != 0;
                Ok(Payload::json(&self.arm_hook(hook_id()?, reset)?))
            }
            "HookDisarm" => Ok(Payload::json(&self.disarm_hook(hook_id()?)?)),
            "HookStatus" => Ok(Payload::json(&self.hook_status(hook_id()?)?)),
            "HookRead" => Ok(Payload::json(&self.read_records(hook_id()?, from)?)),
            "HookDump" => Ok(Payload::Str(self.dump_hook(hook_id()?, from)?)),
            "HookTrigger" => {
                self.fire_hook(hook_id()?)?;
                Ok(Payload::None)
            }
            _ => Err(DeviceError::UnknownCommand { device: STATION_DEVICE.into(), command: command.into() }),
        }
    }
}

/// Command set of each device kind.
pub fn commands_of(kind: DeviceKind) -> Vec<CommandDescriptor> {
    use ArgKind::*;
    let c = CommandDescriptor::new;
    let mut out = Vec::new();
    if kind != DeviceKind::Station {
        out.push(c("State", None, "ON, MOVING or FAULT"));
        out.push(c("Status", None, "one-line description"));
        out.push(c("ReadChannel", Int, "read a driver channel by index"));
    }
    match kind {
        DeviceKind::Counter => {
            out.push(c("Read", OptInt, "read counter n (default 0)"));
            out.push(c("SetPeriod", Int, "periodic interrupt period in ticks, 0 disables"));
        }
        DeviceKind::Adc => out.push(c("SetMode", IntList, "[channel, mode] or [channel, mode, level]")),
        DeviceKind::Motor => {
            out.push(c("ReadPos", Int, "position of an axis"));
            out.push(c("Move", IntList, "[axis, target]"));
            out.push(c("Jog", IntList, "[axis, delta], returns the new position"));
            out.push(c("Start", Int, "start integrating velocity on an axis"));
            out.push(c("Stop", Int, "stop an axis"));
        }
        DeviceKind::Dio => out.push(c("Write", Int, "set the 16-bit output word")),
        DeviceKind::Station => {
            out.push(c("Now", None, "simulated clock in ticks"));
            out.push(c("Advance", Int, "run the clock forward"));
            out.push(c("ExportState", None, "driver state tree"));
            out.push(c("Bindings", None, "logical board table"));
            out.push(c("Interrupt", IntList, "[chassis, slot, line]: raise an interrupt now"));
            out.push(c("HookConfig", Str, "hook configuration as JSON, returns the hook id"));
            out.push(c("HookArm", IntOrList, "id or [id, reset]"));
            out.push(c("HookDisarm", Int, "hook id"));
            out.push(c("HookStatus", Int, "hook id"));
            out.push(c("HookRead", IntOrList, "id or [id, from_seq]: records as JSON"));
            out.push(c("HookDump", IntOrList, "id or [id, from_seq]: records as CSV"));
            out.push(c("HookTrigger", Int, "software trigger"));
        }
    }
    out
}
