//! In-browser station for the static demo page in `www/`.
//!
//! Three operations: run a capture hook and return its records, pull a board
//! out of (or back into) a slot and show the change report, and evaluate a
//! typed read-program against a board. Everything crosses the boundary as
//! JSON strings so the page needs no bindings beyond `JSON.parse`.

use std::collections::BTreeMap;

use deskctl_core::busmap::BindingState;
use deskctl_core::driver::{BoardIo, IoWindow};
use deskctl_core::hardware::{adc8, Hotswap, SimBoard, SlotAddress, Tick, Topology, Width};
use deskctl_core::hook::{BufferMode, ChannelKey, HookConfig, Trigger};
use deskctl_core::program::{MicroOp, Program};
use deskctl_core::Station;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const ADC: SlotAddress = SlotAddress::new(0, 2);

fn error(code: &str, message: impl ToString) -> String {
    json!({ "error": { "code": code, "message": message.to_string() } }).to_string()
}

#[wasm_bindgen]
pub struct Demo {
    station: Station,
    pulled: BTreeMap<SlotAddress, SimBoard>,
}

impl Default for Demo {
    fn default() -> Self {
        Demo::new()
    }
}

#[wasm_bindgen]
impl Demo {
    /// desk1 with the first ADC channel playing a sine wave.
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        let mut station = Station::new(Topology::desk1());
        station.write_register(ADC, adc8::mode(0), Width::Bits8, adc8::MODE_SINE).expect("desk1 has an adc8 at 0/2");
        station.write_register(ADC, adc8::level(0), Width::Bits16, 1000).expect("desk1 has an adc8 at 0/2");
        Demo { station, pulled: BTreeMap::new() }
    }

    pub fn now(&self) -> f64 {
        self.station.now() as f64
    }

    /// Arms a timer hook on the counter, ADC channel 0 and motor axis 0, runs
    /// the clock for `ticks` and returns status plus records.
    pub fn capture(&mut self, period: u32, capacity: u32, circular: bool, delay: u32, ticks: u32) -> String {
        let channels = vec![ChannelKey::new("vct6", 1, 0), ChannelKey::new("adc8", 2, 0), ChannelKey::new("mot4", 3, 0)];
        let names: Vec<String> = channels.iter().map(ToString::to_string).collect();
        let cfg = HookConfig {
            channels,
            trigger: Trigger::Timer { period: Tick::from(period) },
            capacity: capacity as usize,
            mode: if circular { BufferMode::Circular } else { BufferMode::Linear },
            async_write: delay > 0,
            capture_delay: Tick::from(delay),
        };
        let st = &mut self.station;
        let id = match st.configure_hook(cfg) {
            Ok(id) => id,
            Err(e) => return error(e.code(), e),
        };
        if let Err(e) = st.arm_hook(id, false) {
            return error(e.code(), e);
        }
        st.advance_clock(Tick::from(ticks));
        // let an in-flight job land so the numbers add up
        let _ = st.disarm_hook(id);
        st.advance_clock(Tick::from(delay));
        let status = st.hook_status(id).expect("hook exists");
        let batch = st.read_records(id, 0).expect("hook exists");
        json!({ "hook": id, "channels": names, "status": status, "records": batch.records }).to_string()
    }

    /// Removes the board at `chassis/slot`, or puts the removed one back.
    pub fn toggle_board(&mut self, chassis: u16, slot: u16) -> String {
        let at = SlotAddress::new(chassis, slot);
        let action = match self.pulled.remove(&at) {
            Some(board) => Hotswap::Insert(at, board),
            None => match self.station.topology().board(at) {
                Some(b) => {
                    self.pulled.insert(at, b.clone());
                    Hotswap::Remove(at)
                }
                None => return error("empty-slot", format!("nothing at {at} to pull")),
            },
        };
        match self.station.hotswap(action) {
            Ok(report) => json!({
                "classification": format!("{:?}", report.classification).to_lowercase(),
                "report": report.render(),
                "bindings": self.bindings_value(),
            })
            .to_string(),
            Err(e) => {
                self.pulled.remove(&at);
                error(e.code(), e)
            }
        }
    }

    pub fn bindings(&self) -> String {
        self.bindings_value().to_string()
    }

    fn bindings_value(&self) -> Value {
        self.station
            .table()
            .bindings()
            .map(|b| {
                json!({
                    "logical": b.logical_id.0,
                    "type": b.board_type.as_str(),
                    "at": b.at.to_string(),
                    "bound": b.state == BindingState::Bound,
                })
            })
            .collect()
    }

    /// Runs a program against a scratch copy of the board at `chassis/slot`;
    /// WRITEs never reach the live station.
    pub fn eval_program(&self, chassis: u16, slot: u16, text: &str) -> String {
        let program = match parse_program(text) {
            Ok(p) => p,
            Err(e) => return error("parse", e),
        };
        let at = SlotAddress::new(chassis, slot);
        let Some(board) = self.station.topology().board(at) else {
            return error("empty-slot", format!("nothing at {at}"));
        };
        if let Err(e) = program.validate(board.registers()) {
            return error("invalid-program", e);
        }
        let mut scratch = self.station.topology().clone();
        match program.exec(&mut BoardIo::new(&mut scratch, IoWindow { at, base: 0 })) {
            Ok(v) => json!({ "value": v, "ops": program.len() }).to_string(),
            Err(e) => error(e.code(), e),
        }
    }
}

fn number(tok: &str) -> Result<u32, String> {
    let parsed = match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => tok.parse(),
    };
    parsed.map_err(|_| format!("bad number {tok:?}"))
}

fn width(tok: &str) -> Result<Width, String> {
    tok.parse().ok().and_then(Width::from_bits).ok_or_else(|| format!("bad width {tok:?}, use 8, 16 or 32"))
}

/// `read 0x0 16; and 0x8; shr 3; end`, one op per `;` or line.
pub fn parse_program(text: &str) -> Result<Program, String> {
    let mut ops = Vec::new();
    for stmt in text.split([';', '\n']).map(str::trim).filter(|s| !s.is_empty()) {
        let toks: Vec<&str> = stmt.split_whitespace().collect();
        let op = match (toks[0].to_ascii_lowercase().as_str(), &toks[1..]) {
            ("read", [o, w]) => MicroOp::Read { offset: number(o)?, width: width(w)? },
            ("and", [m]) => MicroOp::And { mask: number(m)? },
            ("shr", [n]) => MicroOp::Shr { n: u8::try_from(number(n)?).map_err(|_| "shift too large".to_string())? },
            ("write", [o, w, v]) => MicroOp::Write { offset: number(o)?, width: width(w)?, value: number(v)? },
            ("end", []) => MicroOp::End,
            _ => return Err(format!("cannot parse {stmt:?}")),
        };
        ops.push(op);
    }
    Program::new(ops).map_err(|e| e.to_string())
}
