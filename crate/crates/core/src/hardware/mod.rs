//! Register-level simulation of crates, slots, boards, the hardware clock and
//! interrupt lines.
//!
//! Time is integer ticks (1 tick = 1 ms of model time). Every behavior model is
//! a pure function of register state and clock, so replaying the same call
//! sequence yields bit-identical register stores and event lists.

mod boards;
mod spec;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use boards::{adc8, dio16, mot4, vct6, waveform_sample, Behavior, BoardType, SimBoard};
pub use spec::{BoardSpec, CrateSpec, TopologySpec, DESK1};

pub type Tick = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HwError {
    #[error("malformed topology spec: {0}")]
    MalformedSpec(String),
    #[error("duplicate chassis {0}")]
    DuplicateChassis(u16),
    #[error("duplicate slot {0}")]
    DuplicateSlot(SlotAddress),
    #[error("invalid slot number {0} (slots start at 1)")]
    InvalidSlot(u16),
    #[error("unknown board type {0:?}")]
    UnknownBoardType(String),
    #[error("unknown chassis {0}")]
    UnknownChassis(u16),
    #[error("slot {0} is empty")]
    EmptySlot(SlotAddress),
    #[error("slot {0} is occupied")]
    OccupiedSlot(SlotAddress),
    #[error("no register at offset {offset:#x} on {at}")]
    UnmappedOffset { at: SlotAddress, offset: u32 },
    #[error("register at offset {offset:#x} on {at} is {actual}-bit, accessed as {requested}-bit")]
    WidthMismatch { at: SlotAddress, offset: u32, actual: u8, requested: u8 },
    #[error("register at offset {offset:#x} on {at} is read-only")]
    ReadOnly { at: SlotAddress, offset: u32 },
    #[error("value {value:#x} exceeds {width}-bit register")]
    ValueTooWide { value: u64, width: u8 },
    #[error("board at {at} has no interrupt line {line}")]
    InvalidLine { at: SlotAddress, line: u8 },
    #[error("invalid register map: {0}")]
    InvalidRegisterMap(String),
}

impl HwError {
    /// Stable kebab-case identifier used on the wire and in CLI messages.
    pub fn code(&self) -> &'static str {
        match self {
            HwError::MalformedSpec(_) => "malformed-spec",
            HwError::DuplicateChassis(_) => "duplicate-chassis",
            HwError::DuplicateSlot(_) => "duplicate-slot",
            HwError::InvalidSlot(_) => "invalid-slot",
            HwError::UnknownBoardType(_) => "unknown-board-type",
            HwError::UnknownChassis(_) => "unknown-chassis",
            HwError::EmptySlot(_) => "empty-slot",
            HwError::OccupiedSlot(_) => "occupied-slot",
            HwError::UnmappedOffset { .. } => "unmapped-offset",
            HwError::WidthMismatch { .. } => "width-mismatch",
            HwError::ReadOnly { .. } => "read-only",
            HwError::ValueTooWide { .. } => "value-too-wide",
            HwError::InvalidLine { .. } => "invalid-line",
            HwError::InvalidRegisterMap(_) => "invalid-register-map",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    #[serde(rename = "8")]
    Bits8,
    #[serde(rename = "16")]
    Bits16,
    #[serde(rename = "32")]
    Bits32,
}

impl Width {
    pub fn bits(self) -> u8 {
        match self {
            Width::Bits8 => 8,
            Width::Bits16 => 16,
            Width::Bits32 => 32,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Width> {
        match bits {
            8 => Some(Width::Bits8),
            16 => Some(Width::Bits16),
            32 => Some(Width::Bits32),
            _ => None,
        }
    }

    pub fn mask(self) -> u32 {
        match self {
            Width::Bits8 => 0xFF,
            Width::Bits16 => 0xFFFF,
            Width::Bits32 => 0xFFFF_FFFF,
        }
    }

    pub fn fits(self, value: u64) -> bool {
        value <= u64::from(self.mask())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Access {
    ReadOnly,
    ReadWrite,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterDef {
    pub name: String,
    pub offset: u32,
    pub width: Width,
    pub access: Access,
    pub reset: u32,
}

/// Ordered register layout of one board type. Offsets are unique and aligned
/// to their width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegisterMap {
    entries: Vec<RegisterDef>,
}

impl RegisterMap {
    pub fn new(entries: Vec<RegisterDef>) -> Result<Self, HwError> {
        let mut seen = BTreeMap::new();
        for d in &entries {
            let align = u32::from(d.width.bits() / 8);
            if d.offset % align != 0 {
                return Err(HwError::InvalidRegisterMap(format!("{} at {:#x} is misaligned", d.name, d.offset)));
            }
            if !d.width.fits(u64::from(d.reset)) {
                return Err(HwError::InvalidRegisterMap(format!("{} reset value does not fit", d.name)));
            }
            if seen.insert(d.offset, &d.name).is_some() {
                return Err(HwError::InvalidRegisterMap(format!("duplicate offset {:#x}", d.offset)));
            }
        }
        Ok(RegisterMap { entries })
    }

    pub fn entries(&self) -> &[RegisterDef] {
        &self.entries
    }

    pub fn index_of(&self, offset: u32) -> Option<usize> {
        self.entries.iter().position(|d| d.offset == offset)
    }

    pub fn get(&self, offset: u32) -> Option<&RegisterDef> {
        self.index_of(offset).map(|i| &self.entries[i])
    }

    pub fn by_name(&self, name: &str) -> Option<&RegisterDef> {
        self.entries.iter().find(|d| d.name == name)
    }
}

/// Chassis/slot position of a board, the address operators see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotAddress {
    pub chassis: u16,
    pub slot: u16,
}

impl SlotAddress {
    pub const fn new(chassis: u16, slot: u16) -> Self {
        SlotAddress { chassis, slot }
    }
}

impl fmt::Display for SlotAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.chassis, self.slot)
    }
}

impl FromStr for SlotAddress {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (c, sl) = s.split_once('/').ok_or_else(|| format!("expected <chassis>/<slot>, got {s:?}"))?;
        let chassis = c.parse().map_err(|_| format!("bad chassis in {s:?}"))?;
        let slot = sl.parse().map_err(|_| format!("bad slot in {s:?}"))?;
        Ok(SlotAddress { chassis, slot })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusKind {
    HostPci,
    RemoteVme,
    RemoteCpci,
}

impl BusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BusKind::HostPci => "host-pci",
            BusKind::RemoteVme => "remote-vme",
            BusKind::RemoteCpci => "remote-cpci",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimCrate {
    chassis: u16,
    bus_kind: BusKind,
    slots: BTreeMap<u16, SimBoard>,
}

impl SimCrate {
    pub fn chassis(&self) -> u16 {
        self.chassis
    }

    pub fn bus_kind(&self) -> BusKind {
        self.bus_kind
    }

    /// Occupied slots in ascending slot order.
    pub fn boards(&self) -> impl Iterator<Item = (u16, &SimBoard)> {
        self.slots.iter().map(|(s, b)| (*s, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InterruptEvent {
    pub timestamp: Tick,
    pub at: SlotAddress,
    pub line: u8,
    pub seq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegOp {
    Read,
    Write(u64),
}

#[derive(Clone, Debug)]
pub enum Hotswap {
    Remove(SlotAddress),
    Insert(SlotAddress, SimBoard),
}

/// Width-checked register access used by read-programs and drivers.
pub trait RegisterBus {
    fn read_reg(&self, at: SlotAddress, offset: u32, width: Width) -> Result<u32, HwError>;
    fn write_reg(&mut self, at: SlotAddress, offset: u32, width: Width, value: u32) -> Result<(), HwError>;
}

/// The simulated hardware tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    crates: Vec<SimCrate>,
    generation: u64,
    clock: Tick,
    irq_seq: BTreeMap<(SlotAddress, u8), u64>,
}

impl Topology {
    pub fn from_spec(spec: &TopologySpec) -> Result<Self, HwError> {
        let mut crates: Vec<SimCrate> = Vec::with_capacity(spec.crates.len());
        for c in &spec.crates {
            if crates.iter().any(|x| x.chassis == c.chassis) {
                return Err(HwError::DuplicateChassis(c.chassis));
            }
            let mut slots = BTreeMap::new();
            for (key, board) in &c.slots.0 {
                let slot: u16 = key
                    .trim()
                    .parse()
                    .map_err(|_| HwError::MalformedSpec(format!("slot key {key:?} is not a number")))?;
                if slot == 0 {
                    return Err(HwError::InvalidSlot(slot));
                }
                let board_type: BoardType = board.board_type.parse()?;
                let serial = board
                    .serial
                    .clone()
                    .unwrap_or_else(|| format!("{board_type}-{}-{slot}", c.chassis));
                if slots.insert(slot, SimBoard::new(board_type, serial)).is_some() {
                    return Err(HwError::DuplicateSlot(SlotAddress::new(c.chassis, slot)));
                }
            }
            crates.push(SimCrate { chassis: c.chassis, bus_kind: c.bus_kind, slots });
        }
        crates.sort_by_key(|c| c.chassis);
        Ok(Topology { crates, generation: 0, clock: 0, irq_seq: BTreeMap::new() })
    }

    pub fn from_json(text: &str) -> Result<Self, HwError> {
        Topology::from_spec(&TopologySpec::from_json(text)?)
    }

    /// The four-board desk fixture.
    pub fn desk1() -> Self {
        Topology::from_json(DESK1).expect("desk1 fixture is valid")
    }

    pub fn crates(&self) -> &[SimCrate] {
        &self.crates
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn clock(&self) -> Tick {
        self.clock
    }

    pub fn crate_of(&self, chassis: u16) -> Option<&SimCrate> {
        self.crates.iter().find(|c| c.chassis == chassis)
    }

    pub fn board(&self, at: SlotAddress) -> Option<&SimBoard> {
        self.crate_of(at.chassis)?.slots.get(&at.slot)
    }

    /// Occupied slots in (chassis, slot) order.
    pub fn boards(&self) -> impl Iterator<Item = (SlotAddress, &SimBoard)> {
        self.crates
            .iter()
            .flat_map(|c| c.slots.iter().map(move |(s, b)| (SlotAddress::new(c.chassis, *s), b)))
    }

    fn board_mut(&mut self, at: SlotAddress) -> Result<&mut SimBoard, HwError> {
        self.crates
            .iter_mut()
            .find(|c| c.chassis == at.chassis)
            .and_then(|c| c.slots.get_mut(&at.slot))
            .ok_or(HwError::EmptySlot(at))
    }

    pub fn reg_access(&mut self, at: SlotAddress, offset: u32, op: RegOp) -> Result<u32, HwError> {
        let now = self.clock;
        let board = self.board_mut(at)?;
        let index = board.registers().index_of(offset).ok_or(HwError::UnmappedOffset { at, offset })?;
        match op {
            RegOp::Read => Ok(board.value_at(index)),
            RegOp::Write(value) => {
                let def = &board.registers().entries()[index];
                if def.access == Access::ReadOnly {
                    return Err(HwError::ReadOnly { at, offset });
                }
                if !def.width.fits(value) {
                    return Err(HwError::ValueTooWide { value, width: def.width.bits() });
                }
                board.store(index, value as u32, now);
                Ok(value as u32)
            }
        }
    }

    pub fn read(&self, at: SlotAddress, offset: u32) -> Result<u32, HwError> {
        let board = self.board(at).ok_or(HwError::EmptySlot(at))?;
        board.peek(offset).ok_or(HwError::UnmappedOffset { at, offset })
    }

    pub fn write(&mut self, at: SlotAddress, offset: u32, value: u64) -> Result<u32, HwError> {
        self.reg_access(at, offset, RegOp::Write(value))
    }

    /// Earliest periodic interrupt strictly after the current clock.
    pub fn next_interrupt_at(&self) -> Option<Tick> {
        self.boards().filter_map(|(_, b)| b.next_fire_after(self.clock)).min()
    }

    /// Moves the clock to `t` (≥ now), evolving every board, and returns the
    /// periodic interrupts that fire at exactly `t`.
    ///
    /// `t` must not lie beyond [`Topology::next_interrupt_at`]; callers that
    /// need register state at each interrupt step through them one by one.
    pub fn advance_to(&mut self, t: Tick) -> Vec<InterruptEvent> {
        assert!(t >= self.clock, "clock cannot run backwards");
        debug_assert!(self.next_interrupt_at().is_none_or(|n| t <= n), "advance_to skipped an interrupt");
        let from = self.clock;
        let dt = t - from;
        let mut fired = Vec::new();
        for c in &mut self.crates {
            for (slot, board) in &mut c.slots {
                if dt > 0 {
                    board.evolve(from, dt);
                }
                if board.next_fire_after(from) == Some(t) && dt > 0 {
                    fired.push((SlotAddress::new(c.chassis, *slot), 0u8));
                }
            }
        }
        self.clock = t;
        fired.into_iter().map(|(at, line)| self.next_event(at, line)).collect()
    }

    /// Advances the clock by `dt` ticks and returns every periodic interrupt
    /// raised in between, in timestamp order.
    pub fn advance_clock(&mut self, dt: Tick) -> Vec<InterruptEvent> {
        let end = self.clock + dt;
        let mut events = Vec::new();
        while let Some(next) = self.next_interrupt_at().filter(|&n| n <= end) {
            events.extend(self.advance_to(next));
        }
        self.advance_to(end);
        events
    }

    pub fn inject_interrupt(&mut self, at: SlotAddress, line: u8) -> Result<InterruptEvent, HwError> {
        let board = self.board(at).ok_or(HwError::EmptySlot(at))?;
        if line >= board.irq_lines() {
            return Err(HwError::InvalidLine { at, line });
        }
        Ok(self.next_event(at, line))
    }

    fn next_event(&mut self, at: SlotAddress, line: u8) -> InterruptEvent {
        let seq = self.irq_seq.entry((at, line)).or_insert(0);
        *seq += 1;
        InterruptEvent { timestamp: self.clock, at, line, seq: *seq }
    }

    /// Removes or inserts a board; returns the new generation.
    pub fn hotswap(&mut self, action: Hotswap) -> Result<u64, HwError> {
        match action {
            Hotswap::Remove(at) => {
                let c = self
                    .crates
                    .iter_mut()
                    .find(|c| c.chassis == at.chassis)
                    .ok_or(HwError::EmptySlot(at))?;
                c.slots.remove(&at.slot).ok_or(HwError::EmptySlot(at))?;
            }
            Hotswap::Insert(at, board) => {
                if at.slot == 0 {
                    return Err(HwError::InvalidSlot(0));
                }
                let c = self
                    .crates
                    .iter_mut()
                    .find(|c| c.chassis == at.chassis)
                    .ok_or(HwError::UnknownChassis(at.chassis))?;
                if c.slots.contains_key(&at.slot) {
                    return Err(HwError::OccupiedSlot(at));
                }
                c.slots.insert(at.slot, board);
            }
        }
        self.generation += 1;
        Ok(self.generation)
    }
}

impl RegisterBus for Topology {
    fn read_reg(&self, at: SlotAddress, offset: u32, width: Width) -> Result<u32, HwError> {
        let board = self.board(at).ok_or(HwError::EmptySlot(at))?;
        let def = board.registers().get(offset).ok_or(HwError::UnmappedOffset { at, offset })?;
        if def.width != width {
            return Err(HwError::WidthMismatch { at, offset, actual: def.width.bits(), requested: width.bits() });
        }
        Ok(board.peek(offset).unwrap_or_default())
    }

    fn write_reg(&mut self, at: SlotAddress, offset: u32, width: Width, value: u32) -> Result<(), HwError> {
        let board = self.board(at).ok_or(HwError::EmptySlot(at))?;
        let def = board.registers().get(offset).ok_or(HwError::UnmappedOffset { at, offset })?;
        if def.width != width {
            return Err(HwError::WidthMismatch { at, offset, actual: def.width.bits(), requested: width.bits() });
        }
        self.reg_access(at, offset, RegOp::Write(u64::from(value))).map(|_| ())
    }
}
