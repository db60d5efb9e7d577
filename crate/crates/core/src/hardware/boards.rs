//! Register layouts and behavior models of the simulated board types.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{Access, HwError, RegisterDef, RegisterMap, Tick, Width};

/// Register offsets of the VCT6 counter/timer board.
pub mod vct6 {
    pub const COUNT0: u32 = 0x00;
    pub const COUNT1: u32 = 0x04;
    pub const COUNT2: u32 = 0x08;
    pub const COUNT3: u32 = 0x0C;
    /// Bit n enables counting on COUNTn.
    pub const CTRL: u32 = 0x10;
    /// Periodic interrupt on line 0 every PERIOD ticks; 0 disables.
    pub const PERIOD: u32 = 0x14;
    /// Interrupt acknowledge register.
    pub const STATUS: u32 = 0x18;
    pub const COUNTERS: usize = 4;
}

/// Register offsets of the 8-channel ADC.
pub mod adc8 {
    pub const CHANNELS: usize = 8;
    /// Read-only sample register of channel `k`.
    pub const fn ch(k: usize) -> u32 {
        (k as u32) * 4
    }
    /// Waveform shape of channel `k`: 0 constant, 1 ramp, 2 sine.
    pub const fn mode(k: usize) -> u32 {
        0x20 + (k as u32) * 4
    }
    /// Constant level, ramp slope or sine amplitude of channel `k`.
    pub const fn level(k: usize) -> u32 {
        0x40 + (k as u32) * 4
    }
    pub const MODE_CONSTANT: u32 = 0;
    pub const MODE_RAMP: u32 = 1;
    pub const MODE_SINE: u32 = 2;
}

/// Register offsets of the 4-axis motor controller.
pub mod mot4 {
    pub const AXES: usize = 4;
    pub const fn pos(axis: usize) -> u32 {
        (axis as u32) * 4
    }
    pub const fn vel(axis: usize) -> u32 {
        0x10 + (axis as u32) * 4
    }
    /// Bit n set: axis n integrates VELn into POSn every tick.
    pub const CMD: u32 = 0x20;
}

/// Register offsets of the 16-bit digital I/O board.
pub mod dio16 {
    pub const DATA: u32 = 0x00;
    pub const DIR: u32 = 0x04;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoardType {
    Vct6,
    Adc8,
    Mot4,
    Dio16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    Counter,
    WaveformSource,
    MotorIntegrator,
    Static,
}

impl BoardType {
    pub const ALL: [BoardType; 4] = [BoardType::Vct6, BoardType::Adc8, BoardType::Mot4, BoardType::Dio16];

    pub fn as_str(self) -> &'static str {
        match self {
            BoardType::Vct6 => "vct6",
            BoardType::Adc8 => "adc8",
            BoardType::Mot4 => "mot4",
            BoardType::Dio16 => "dio16",
        }
    }

    pub fn behavior(self) -> Behavior {
        match self {
            BoardType::Vct6 => Behavior::Counter,
            BoardType::Adc8 => Behavior::WaveformSource,
            BoardType::Mot4 => Behavior::MotorIntegrator,
            BoardType::Dio16 => Behavior::Static,
        }
    }

    pub fn irq_lines(self) -> u8 {
        1
    }

    /// The register map shared by every board of this type.
    pub fn register_map(self) -> &'static RegisterMap {
        static MAPS: OnceLock<[RegisterMap; 4]> = OnceLock::new();
        let maps = MAPS.get_or_init(|| {
            BoardType::ALL.map(|t| RegisterMap::new(t.register_defs()).expect("built-in register map is valid"))
        });
        &maps[self as usize]
    }

    fn register_defs(self) -> Vec<RegisterDef> {
        use Access::{ReadOnly, ReadWrite};
        use Width::{Bits16, Bits32, Bits8};
        let reg = |name: String, offset, width, access, reset| RegisterDef { name, offset, width, access, reset };
        match self {
            BoardType::Vct6 => {
                let mut defs: Vec<_> = (0..vct6::COUNTERS)
                    .map(|n| reg(format!("COUNT{n}"), (n as u32) * 4, Bits32, ReadWrite, 0))
                    .collect();
                defs.push(reg("CTRL".into(), vct6::CTRL, Bits32, ReadWrite, 0x1));
                defs.push(reg("PERIOD".into(), vct6::PERIOD, Bits32, ReadWrite, 0));
                defs.push(reg("STATUS".into(), vct6::STATUS, Bits32, ReadWrite, 0));
                defs
            }
            BoardType::Adc8 => {
                let mut defs = Vec::new();
                for k in 0..adc8::CHANNELS {
                    defs.push(reg(format!("CH{k}"), adc8::ch(k), Bits16, ReadOnly, default_level(k)));
                }
                for k in 0..adc8::CHANNELS {
                    defs.push(reg(format!("MODE{k}"), adc8::mode(k), Bits8, ReadWrite, adc8::MODE_CONSTANT));
                }
                for k in 0..adc8::CHANNELS {
                    defs.push(reg(format!("LEVEL{k}"), adc8::level(k), Bits16, ReadWrite, default_level(k)));
                }
                defs
            }
            BoardType::Mot4 => {
                let mut defs = Vec::new();
                for n in 0..mot4::AXES {
                    defs.push(reg(format!("POS{n}"), mot4::pos(n), Bits32, ReadWrite, 0));
                }
                for n in 0..mot4::AXES {
                    defs.push(reg(format!("VEL{n}"), mot4::vel(n), Bits32, ReadWrite, 1));
                }
                defs.push(reg("CMD".into(), mot4::CMD, Bits8, ReadWrite, 0));
                defs
            }
            BoardType::Dio16 => vec![
                reg("DATA".into(), dio16::DATA, Bits16, ReadWrite, 0),
                reg("DIR".into(), dio16::DIR, Bits16, ReadWrite, 0),
            ],
        }
    }
}

fn default_level(k: usize) -> u32 {
    1000 * (k as u32 + 1)
}

impl fmt::Display for BoardType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoardType {
    type Err = HwError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BoardType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| HwError::UnknownBoardType(s.to_string()))
    }
}

const SINE_STEPS: usize = 64;

fn sine_table() -> &'static [i32; SINE_STEPS] {
    static TABLE: OnceLock<[i32; SINE_STEPS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        std::array::from_fn(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / SINE_STEPS as f64;
            (phase.sin() * 32767.0).round() as i32
        })
    })
}

/// Sample of an ADC waveform at clock `t`; always fits 16 bits.
pub fn waveform_sample(mode: u32, level: u32, t: Tick) -> u32 {
    match mode {
        adc8::MODE_RAMP => ((u64::from(level) * t) & 0xFFFF) as u32,
        adc8::MODE_SINE => {
            let amplitude = i64::from(level / 2);
            let s = i64::from(sine_table()[(t % SINE_STEPS as u64) as usize]);
            (32768 + amplitude * s / 32767) as u32
        }
        _ => level & 0xFFFF,
    }
}

/// One board in a slot: its type, register store and timer phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimBoard {
    board_type: BoardType,
    serial: String,
    values: Vec<u32>,
    /// Clock value at which PERIOD was last written; periodic interrupts fire at anchor + k*PERIOD.
    timer_anchor: Tick,
}

impl SimBoard {
    pub fn new(board_type: BoardType, serial: impl Into<String>) -> Self {
        let values = board_type.register_map().entries().iter().map(|d| d.reset).collect();
        SimBoard { board_type, serial: serial.into(), values, timer_anchor: 0 }
    }

    pub fn board_type(&self) -> BoardType {
        self.board_type
    }

    pub fn serial(&self) -> &str {
        &self.serial
    }

    pub fn registers(&self) -> &'static RegisterMap {
        self.board_type.register_map()
    }

    pub fn irq_lines(&self) -> u8 {
        self.board_type.irq_lines()
    }

    /// Current value of the register at `offset`, if mapped.
    pub fn peek(&self, offset: u32) -> Option<u32> {
        self.registers().index_of(offset).map(|i| self.values[i])
    }

    /// (name, value) for every register in map order.
    pub fn dump(&self) -> impl Iterator<Item = (&str, u32)> + '_ {
        self.registers().entries().iter().zip(&self.values).map(|(d, v)| (d.name.as_str(), *v))
    }

    pub(crate) fn value_at(&self, index: usize) -> u32 {
        self.values[index]
    }

    pub(crate) fn store(&mut self, index: usize, value: u32, now: Tick) {
        let def = &self.registers().entries()[index];
        self.values[index] = value & def.width.mask();
        match self.board_type {
            BoardType::Vct6 if def.offset == vct6::PERIOD => self.timer_anchor = now,
            BoardType::Adc8 => self.refresh_samples(now),
            _ => {}
        }
    }

    fn reg(&self, offset: u32) -> u32 {
        self.peek(offset).expect("offset in built-in map")
    }

    fn set(&mut self, offset: u32, value: u32) {
        let i = self.registers().index_of(offset).expect("offset in built-in map");
        let mask = self.registers().entries()[i].width.mask();
        self.values[i] = value & mask;
    }

    /// Advances the behavior model from `from` to `from + dt`.
    pub(crate) fn evolve(&mut self, from: Tick, dt: Tick) {
        match self.board_type.behavior() {
            Behavior::Counter => {
                let ctrl = self.reg(vct6::CTRL);
                let step = dt as u32; // counters wrap mod 2^32
                for n in 0..vct6::COUNTERS {
                    if ctrl & (1 << n) != 0 {
                        let off = (n as u32) * 4;
                        let v = self.reg(off).wrapping_add(step);
                        self.set(off, v);
                    }
                }
            }
            Behavior::WaveformSource => self.refresh_samples(from + dt),
            Behavior::MotorIntegrator => {
                let cmd = self.reg(mot4::CMD);
                for n in 0..mot4::AXES {
                    if cmd & (1 << n) != 0 {
                        let vel = self.reg(mot4::vel(n));
                        let v = self.reg(mot4::pos(n)).wrapping_add(vel.wrapping_mul(dt as u32));
                        self.set(mot4::pos(n), v);
                    }
                }
            }
            Behavior::Static => {}
        }
    }

    fn refresh_samples(&mut self, now: Tick) {
        for k in 0..adc8::CHANNELS {
            let v = waveform_sample(self.reg(adc8::mode(k)), self.reg(adc8::level(k)), now);
            self.set(adc8::ch(k), v);
        }
    }

    /// First periodic-interrupt time strictly after `now`, if the timer is running.
    pub(crate) fn next_fire_after(&self, now: Tick) -> Option<Tick> {
        if self.board_type != BoardType::Vct6 {
            return None;
        }
        let period = Tick::from(self.reg(vct6::PERIOD));
        if period == 0 {
            return None;
        }
        let anchor = self.timer_anchor;
        let elapsed = now.saturating_sub(anchor);
        Some(anchor + period * (elapsed / period + 1))
    }
}
