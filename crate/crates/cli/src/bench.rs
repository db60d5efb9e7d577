//! Capture benchmark.
//!
//! The counter board raises a periodic interrupt every `period` ticks. A hook
//! on that interrupt captures a function-generator channel on the DIO board
//! (a complex channel: each capture writes the next waveform sample to DATA
//! and reads it back) plus the counter itself. Simulated time is paced
//! against the wall clock, one tick per millisecond, and every record's
//! trigger-to-completion latency is measured in wall time.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use deskctl_core::busmap::LogicalId;
use deskctl_core::driver::{AccessPlan, CallbackRef, ChannelDecl, Cost, DriverDescriptor, ValueKind};
use deskctl_core::hardware::{adc8, dio16, vct6, waveform_sample, BoardType, SlotAddress, Tick, Topology, Width};
use deskctl_core::hook::{BufferMode, ChannelKey, HookConfig, Trigger};
use deskctl_core::program::{MicroOp, Program};
use deskctl_core::Station;
use serde::Serialize;

const COUNTER: SlotAddress = SlotAddress::new(0, 1);
const COUNTER_LOGICAL: u32 = 1;
const DIO_LOGICAL: u32 = 4;

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub period: Tick,
    pub events: u64,
    /// Async capture with this simulated job duration.
    pub async_delay: Option<Tick>,
    /// Pace simulated time against the wall clock.
    pub realtime: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub period: Tick,
    pub events: u64,
    pub records: u64,
    pub overruns: u64,
    pub faults: u64,
    pub latency_p50_us: f64,
    pub latency_p99_us: f64,
    pub latency_max_us: f64,
    /// Largest deviation of the wall-clock spacing between consecutive
    /// triggers from the nominal period.
    pub jitter_max_us: f64,
    /// Every captured waveform sample matched its expected value.
    pub samples_ok: bool,
    pub wall_ms: u64,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "period={} events={} records={} overruns={} faults={}\n\
             latency_us p50={:.1} p99={:.1} max={:.1}\n\
             jitter_us max={:.1}\n\
             samples_ok={} wall_ms={}\n",
            self.period,
            self.events,
            self.records,
            self.overruns,
            self.faults,
            self.latency_p50_us,
            self.latency_p99_us,
            self.latency_max_us,
            self.jitter_max_us,
            self.samples_ok,
            self.wall_ms
        )
    }
}

/// Waveform the generator plays: one 16-bit sine sample per capture.
pub fn fgen_sample(index: u64) -> u32 {
    waveform_sample(adc8::MODE_SINE, 0xFFFF, index)
}

/// Function-generator driver on a DIO board: one complex channel.
pub fn fgen_driver() -> DriverDescriptor {
    let cursor = Arc::new(AtomicU64::new(0));
    let sample = CallbackRef::new("fgen/sample", move |io| {
        let value = fgen_sample(cursor.fetch_add(1, Ordering::Relaxed));
        let program = Program::new(vec![
            MicroOp::Write { offset: dio16::DATA, width: Width::Bits16, value },
            MicroOp::Read { offset: dio16::DATA, width: Width::Bits16 },
            MicroOp::End,
        ])
        .expect("fixed program shape");
        program.exec(io)
    });
    DriverDescriptor {
        name: "fgen".into(),
        board_type: BoardType::Dio16,
        channels: vec![ChannelDecl {
            index: 0,
            name: "sample".into(),
            kind: ValueKind::Unsigned,
            cost: Cost::Complex,
            access: AccessPlan::Callback(sample),
        }],
        commands: vec![],
        irq_ack: None,
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport, String> {
    if opts.period == 0 || opts.period > u64::from(u32::MAX) {
        return Err("period must be between 1 and 2^32-1 ticks".into());
    }
    let mut st = Station::new(Topology::desk1());
    let e = |e: deskctl_core::station::StationError| e.to_string();
    st.register_driver(fgen_driver()).map_err(e)?;
    st.detach("dio16", LogicalId(DIO_LOGICAL)).map_err(e)?;
    st.attach("fgen", LogicalId(DIO_LOGICAL)).map_err(e)?;
    let cfg = HookConfig {
        channels: vec![ChannelKey::new("fgen", DIO_LOGICAL, 0), ChannelKey::new("vct6", COUNTER_LOGICAL, 0)],
        trigger: Trigger::Interrupt { chassis: COUNTER.chassis, slot: COUNTER.slot, line: 0 },
        capacity: opts.events.max(1) as usize,
        mode: BufferMode::Linear,
        async_write: opts.async_delay.is_some(),
        capture_delay: opts.async_delay.unwrap_or(0),
    };
    let id = st.configure_hook(cfg).map_err(e)?;
    st.arm_hook(id, false).map_err(e)?;
    st.write_register(COUNTER, vct6::PERIOD, Width::Bits32, opts.period as u32).map_err(e)?;

    let end = opts.period * opts.events;
    let limit = end + opts.async_delay.unwrap_or(0);
    let start = Instant::now();
    let mut trigger_wall: HashMap<u64, Instant> = HashMap::new();
    let mut latencies = Vec::with_capacity(opts.events as usize);
    let mut jitter_us = 0f64;
    let mut last_trigger: Option<Instant> = None;
    let nominal_us = opts.period as f64 * 1000.0;
    let mut seen = 0u64;
    let mut next_seq = 1u64;
    let mut samples_ok = true;
    let mut captured = 0u64;
    while let Some(t) = st.next_event_at().filter(|&t| t <= limit) {
        if opts.realtime {
            let due = start + Duration::from_millis(t);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        let t0 = Instant::now();
        let done_triggering = st.now() >= end;
        if done_triggering {
            // stop the interrupt source so only pending completions remain
            st.write_register(COUNTER, vct6::PERIOD, Width::Bits32, 0).map_err(e)?;
        }
        st.step_until(limit);
        let status = st.hook_status(id).map_err(e)?;
        for seq in seen + 1..=status.events_seen {
            trigger_wall.insert(seq, t0);
            if let Some(prev) = last_trigger {
                let spacing = t0.duration_since(prev).as_secs_f64() * 1e6;
                jitter_us = jitter_us.max((spacing - nominal_us).abs());
            }
            last_trigger = Some(t0);
        }
        seen = status.events_seen;
        let done = Instant::now();
        for r in st.read_records(id, next_seq).map_err(e)?.records {
            if let Some(t) = trigger_wall.remove(&r.event_seq) {
                latencies.push(done.duration_since(t).as_secs_f64() * 1e6);
            }
            samples_ok &= r.values[0] == i64::from(fgen_sample(captured));
            captured += 1;
            next_seq = r.event_seq + 1;
        }
        if done_triggering && !status.capture_pending {
            break;
        }
    }
    let status = st.hook_status(id).map_err(e)?;
    latencies.sort_by(f64::total_cmp);
    Ok(BenchReport {
        period: opts.period,
        events: status.events_seen,
        records: status.records_total,
        overruns: status.overruns,
        faults: status.faults,
        latency_p50_us: percentile(&latencies, 50.0),
        latency_p99_us: percentile(&latencies, 99.0),
        latency_max_us: latencies.last().copied().unwrap_or(0.0),
        jitter_max_us: if opts.realtime { jitter_us } else { 0.0 },
        samples_ok,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sync_bench_captures_every_event() {
        let r = run_bench(&BenchOptions { period: 10, events: 50, async_delay: None, realtime: false }).unwrap();
        assert_eq!((r.events, r.records, r.overruns, r.faults), (50, 50, 0, 0));
        assert!(r.samples_ok);
        assert!(r.latency_p50_us > 0.0 && r.latency_p50_us <= r.latency_p99_us && r.latency_p99_us <= r.latency_max_us);
    }

    #[test]
    fn slow_async_capture_overruns() {
        let r = run_bench(&BenchOptions { period: 10, events: 40, async_delay: Some(15), realtime: false }).unwrap();
        assert_eq!((r.events, r.records, r.overruns), (40, 20, 20));
        assert!(r.samples_ok);
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!((percentile(&v, 50.0), percentile(&v, 99.0)), (50.0, 99.0));
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn zero_events_is_an_empty_report() {
        let r = run_bench(&BenchOptions { period: 10, events: 0, async_delay: None, realtime: true }).unwrap();
        assert_eq!((r.events, r.records, r.overruns), (0, 0, 0));
        assert_eq!(r.latency_max_us, 0.0);
    }
}
