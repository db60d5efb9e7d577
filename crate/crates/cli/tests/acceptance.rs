//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Expected values come from small independent models written here (bit
//! arithmetic, a discrete-event capture model, a local replay of value
//! changes), not from the code under test.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use deskctl_core::busmap::{BoardRef, Classification, LogicalId, PhysicalNumber};
use deskctl_core::driver::AccessPlan;
use deskctl_core::drivers;
use deskctl_core::hardware::{dio16, BoardType, Hotswap, SimBoard, SlotAddress, Tick, Topology, Width};
use deskctl_core::hook::{BufferMode, ChannelKey, HookConfig, Trigger};
use deskctl_core::program::BoardAccess;
use deskctl_core::propdb::{PropertyDb, PropertyKey};
use deskctl_core::{Payload, Station};
use deskctl_net::client::SubEvent;
use deskctl_net::server::{serve, ClockMode, ServerOptions};
use deskctl_net::Client;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const ADC: SlotAddress = SlotAddress::new(0, 2);
const DIO: SlotAddress = SlotAddress::new(1, 5);

fn timer_hook(channels: Vec<ChannelKey>, period: Tick, capacity: usize, mode: BufferMode) -> HookConfig {
    HookConfig { channels, trigger: Trigger::Timer { period }, capacity, mode, async_write: false, capture_delay: 0 }
}

fn hook_timer_cadence() -> Check {
    let started = Instant::now();
    let mut st = Station::new(Topology::desk1());
    let channels = vec![ChannelKey::new("vct6", 1, 0), ChannelKey::new("adc8", 2, 0), ChannelKey::new("mot4", 3, 0)];
    let id = st.configure_hook(timer_hook(channels, 10, 1000, BufferMode::Linear)).map_err(|e| e.to_string())?;
    st.arm_hook(id, false).map_err(|e| e.to_string())?;
    st.advance_clock(1000);
    let batch = st.read_records(id, 0).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure!(batch.records.len() == 100, "{} records", batch.records.len());
    ensure!(batch.records.iter().all(|r| r.values.len() == 3), "record without 3 values");
    let stamps: Vec<Tick> = batch.records.iter().map(|r| r.timestamp).collect();
    let expected: Vec<Tick> = (1..=100).map(|k| k * 10).collect();
    ensure!(stamps == expected, "timestamps {:?}..", &stamps[..stamps.len().min(5)]);
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("100 records x 3 values at 10..1000 in {elapsed:?}"))
}

fn linear_and_circular() -> Check {
    let run = |mode| -> Result<_, String> {
        let mut st = Station::new(Topology::desk1());
        let id = st
            .configure_hook(timer_hook(vec![ChannelKey::new("vct6", 1, 0)], 10, 50, mode))
            .map_err(|e| e.to_string())?;
        st.arm_hook(id, false).map_err(|e| e.to_string())?;
        st.advance_clock(1000);
        let status = st.hook_status(id).map_err(|e| e.to_string())?;
        let seqs: Vec<u64> = st.read_records(id, 0).map_err(|e| e.to_string())?.records.iter().map(|r| r.event_seq).collect();
        Ok((status, seqs))
    };
    let (lin, lin_seqs) = run(BufferMode::Linear)?;
    ensure!(lin.events_seen == 100, "linear saw {} events", lin.events_seen);
    ensure!(lin_seqs == (1..=50).collect::<Vec<_>>(), "linear kept {} records", lin_seqs.len());
    ensure!(lin.stopped_at_end && lin.ignored_after_stop == 50, "linear stop state {lin:?}");
    let (circ, circ_seqs) = run(BufferMode::Circular)?;
    ensure!(circ_seqs == (51..=100).collect::<Vec<_>>(), "circular kept {:?}..", circ_seqs.first());
    ensure!(circ.lowest_available == Some(51), "lowest_available {:?}", circ.lowest_available);
    Ok("linear 50 + 50 ignored, circular 51..100".into())
}

/// Register file holding one value at one offset.
struct OneRegister(u32, u32);

impl BoardAccess for OneRegister {
    fn read(&mut self, offset: u32, _: Width) -> Result<u32, deskctl_core::hardware::HwError> {
        Ok(if offset == self.0 { self.1 } else { 0 })
    }

    fn write(&mut self, _: u32, _: Width, _: u32) -> Result<(), deskctl_core::hardware::HwError> {
        Ok(())
    }
}

fn program_oracle() -> Check {
    let mut st = Station::new(Topology::desk1());
    let dio = LogicalId(4);
    for word in 0..=0xFFFFu32 {
        st.write_register(DIO, dio16::DATA, Width::Bits16, word).map_err(|e| e.to_string())?;
        for bit in 0..16usize {
            let got = st.read_channel("dio16", dio, 1 + bit).map_err(|e| e.to_string())?;
            ensure!(got == i64::from((word >> bit) & 1), "word {word:#06x} bit {bit}: {got}");
        }
    }
    let counter = drivers::vct6();
    let AccessPlan::Program(count0) = &counter.channels[0].access else {
        return Err("vct6 count0 is not a program".into());
    };
    let mut rng = StdRng::seed_from_u64(0x5eed);
    for _ in 0..100_000 {
        let v: u32 = rng.random();
        let got = count0.exec(&mut OneRegister(0, v)).map_err(|e| e.to_string())?;
        ensure!(got == v, "count {v:#x} read as {got:#x}");
    }
    Ok("65536 words x 16 bits, 100000 counts".into())
}

/// Independent model of asynchronous capture: a trigger that arrives while a
/// job is in flight is an overrun; a job finishing on a trigger tick frees
/// the hook for that trigger.
fn capture_model(period: Tick, delay: Tick, events: u64) -> (u64, u64) {
    let (mut busy_until, mut records, mut overruns) = (0, 0, 0);
    for k in 1..=events {
        let t = k * period;
        if t < busy_until {
            overruns += 1;
        } else {
            records += 1;
            busy_until = t + delay;
        }
    }
    (records, overruns)
}

fn async_overrun() -> Check {
    let mut st = Station::new(Topology::desk1());
    let mut cfg = timer_hook(vec![ChannelKey::new("vct6", 1, 0), ChannelKey::new("adc8", 2, 1)], 10, 1000, BufferMode::Linear);
    cfg.async_write = true;
    cfg.capture_delay = 15;
    let id = st.configure_hook(cfg).map_err(|e| e.to_string())?;
    st.arm_hook(id, false).map_err(|e| e.to_string())?;
    st.advance_clock(1000);
    st.disarm_hook(id).map_err(|e| e.to_string())?;
    st.advance_clock(20);
    let s = st.hook_status(id).map_err(|e| e.to_string())?;
    let (records, overruns) = capture_model(10, 15, 100);
    ensure!((s.events_seen, s.records_total, s.overruns) == (100, records, overruns), "status {s:?}");
    ensure!(records == 50 && overruns == 50, "model gave {records}/{overruns}");
    ensure!(s.events_seen == s.records_total + s.overruns, "accounting {s:?}");
    let batch = st.read_records(id, 0).map_err(|e| e.to_string())?;
    ensure!(batch.records.len() as u64 == records, "{} stored", batch.records.len());
    ensure!(batch.records.iter().all(|r| r.values.len() == 2), "incomplete record");
    Ok(format!("records {records}, overruns {overruns}"))
}

fn logical_stability() -> Check {
    let mut st = Station::new(Topology::desk1());
    let mot4 = st
        .table()
        .bindings()
        .find(|b| b.board_type == BoardType::Mot4)
        .map(|b| b.logical_id)
        .ok_or("no mot4 binding")?;
    let removed = st.hotswap(Hotswap::Remove(ADC)).map_err(|e| e.to_string())?;
    ensure!(removed.classification == Classification::NonTrivial, "removal was {:?}", removed.classification);
    ensure!(
        removed.missing.iter().any(|b| b.board_type == BoardType::Adc8 && b.at == ADC),
        "adc8 not reported missing"
    );
    let after = st.table().bindings().find(|b| b.board_type == BoardType::Mot4).map(|b| b.logical_id);
    ensure!(after == Some(mot4), "mot4 id moved to {after:?}");
    // boards are numbered in chassis/slot order; with 0/2 gone mot4 is second
    let phys = st.table().resolve(&BoardRef::Logical(mot4), st.topology().generation()).map_err(|e| e.to_string())?;
    ensure!(phys == PhysicalNumber(1), "mot4 resolved to {phys:?}");
    let back = st.hotswap(Hotswap::Insert(ADC, SimBoard::new(BoardType::Adc8, "ADC8-0107"))).map_err(|e| e.to_string())?;
    ensure!(back.classification == Classification::Trivial, "re-insert was {:?}", back.classification);
    Ok(format!("mot4 stays logical {mot4}, physical 1 while adc8 is out"))
}

#[derive(Clone, Debug)]
struct Cmd {
    device: &'static str,
    command: &'static str,
    payload: Payload,
}

fn random_commands(n: usize, seed: u64) -> Vec<Cmd> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let axis = rng.random_range(0..4);
            let (device, command, payload) = match rng.random_range(0..11) {
                0 => ("sim/motor/1", "Jog", Payload::IntList(vec![axis, rng.random_range(-50..50)])),
                1 => ("sim/motor/1", "Move", Payload::IntList(vec![axis, rng.random_range(-1000..1000)])),
                2 => ("sim/motor/1", "ReadPos", Payload::Int(axis)),
                3 => ("sim/motor/1", if rng.random() { "Start" } else { "Stop" }, Payload::Int(axis)),
                4 => ("sim/dio/1", "Write", Payload::Int(rng.random_range(0..0x1_0000))),
                5 => ("sim/counter/1", "SetPeriod", Payload::Int(rng.random_range(0..20))),
                6 => ("sim/counter/1", "Read", Payload::Int(rng.random_range(0..6))),
                7 => ("sim/adc/1", "ReadChannel", Payload::Int(rng.random_range(0..9))),
                8 => ("sys/station/1", "Advance", Payload::Int(rng.random_range(0..30))),
                9 => ("sim/motor/1", "State", Payload::None),
                _ => ("sim/motor/1", "Fly", Payload::None),
            };
            Cmd { device, command, payload }
        })
        .collect()
}

async fn frozen_server() -> Result<(deskctl_net::ServerHandle, Client), String> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let opts = ServerOptions { clock: ClockMode::Frozen, ..ServerOptions::default() };
    let h = serve(listener, Station::new(Topology::desk1()), Arc::new(PropertyDb::in_memory()), opts)
        .await
        .map_err(|e| e.to_string())?;
    let c = Client::connect(h.local_addr()).await.map_err(|e| e.to_string())?;
    Ok((h, c))
}

fn outcome(r: Result<Payload, deskctl_net::RemoteError>) -> Result<Payload, String> {
    r.map_err(|e| e.code)
}

async fn paradigms() -> Check {
    let (ha, a) = frozen_server().await?;
    let (hb, b) = frozen_server().await?;
    let mut sub = a.subscribe("sim/motor/1", "value:pos0").await.map_err(|e| e.to_string())?;
    let read_pos0 = || async { outcome(a.sync("sim/motor/1", "ReadPos", Payload::Int(0)).await) };
    // local replay: every distinct successive pos0 value is one event
    let mut expected = vec![read_pos0().await?];
    for (i, c) in random_commands(200, 42).into_iter().enumerate() {
        let ra = outcome(a.sync(c.device, c.command, c.payload.clone()).await);
        let rb = outcome(b.call_async(c.device, c.command, c.payload.clone()).await);
        ensure!(ra == rb, "command {i} {c:?}: sync {ra:?} vs async {rb:?}");
        let p = read_pos0().await?;
        if expected.last() != Some(&p) {
            expected.push(p);
        }
    }
    let mut got = Vec::new();
    while got.len() < expected.len() {
        match tokio::time::timeout(Duration::from_secs(5), sub.next()).await {
            Ok(Some(SubEvent::Event { seq, payload })) => {
                ensure!(seq == got.len() as u64 + 1, "event seq {seq} after {}", got.len());
                got.push(payload);
            }
            other => return Err(format!("subscription ended early: {other:?}")),
        }
    }
    tokio::time::sleep(Duration::from_millis(100)).await;
    ensure!(sub.try_next().is_none(), "extra events beyond {}", expected.len());
    ensure!(got == expected, "event payloads differ from the replay");
    drop((a, b));
    ha.shutdown().await;
    hb.shutdown().await;
    Ok(format!("200 commands agree; {} events = 1 + {} changes", got.len(), got.len() - 1))
}

async fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let src = PropertyDb::open(dir.path().join("src.db")).map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(7);
    for i in 0..100 {
        let key = PropertyKey::new(&format!("ns{}", rng.random_range(0..5)), &format!("p{i}")).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..4);
        let value = (0..n).map(|_| format!("v{}", rng.random_range(0..1_000_000))).collect();
        src.put(&key, value).map_err(|e| e.to_string())?;
    }
    let snap = dir.path().join("snap.txt");
    src.export_snapshot(&snap).map_err(|e| e.to_string())?;
    let dst = PropertyDb::open(dir.path().join("dst.db")).map_err(|e| e.to_string())?;
    dst.import_snapshot(&snap).map_err(|e| e.to_string())?;
    ensure!(src.len() == 100, "{} properties written", src.len());
    ensure!(dst.snapshot() == src.snapshot(), "imported map differs");

    // two servers register the same devices in turn; the second wins
    let path = dir.path().join("site.db");
    let mut last_port = 0;
    for name in ["alpha", "beta"] {
        let db = Arc::new(PropertyDb::open(&path).map_err(|e| e.to_string())?);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let opts = ServerOptions { name: name.into(), clock: ClockMode::Frozen, ..ServerOptions::default() };
        let h = serve(listener, Station::new(Topology::desk1()), db, opts).await.map_err(|e| e.to_string())?;
        last_port = h.local_addr().port();
        h.shutdown().await;
    }
    let reopened = PropertyDb::open(&path).map_err(|e| e.to_string())?;
    let entry = reopened.lookup_device("sim/motor/1").map_err(|e| e.to_string())?.ok_or("device not registered")?;
    ensure!(entry.server == "beta" && entry.port == last_port, "lookup gave {entry:?}");
    Ok("100 properties round-trip; registry keeps the last server".into())
}

fn bench() -> Check {
    let started = Instant::now();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = deskctl::run(["deskctl", "bench", "--period", "10", "--events", "100", "--json"], &mut out, &mut err);
    let elapsed = started.elapsed();
    ensure!(code == 0, "exit {code}: {}", String::from_utf8_lossy(&err));
    let r: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&out).map_err(|e| e.to_string())?;
    let int = |k: &str| r.get(k).and_then(|v| v.as_u64());
    let float = |k: &str| r.get(k).and_then(|v| v.as_f64()).unwrap_or(-1.0);
    ensure!((int("events"), int("records"), int("overruns")) == (Some(100), Some(100), Some(0)), "report {r:?}");
    let (p50, p99, max) = (float("latency_p50_us"), float("latency_p99_us"), float("latency_max_us"));
    ensure!(p50 > 0.0 && p50 <= p99 && p99 <= max, "latencies {p50} {p99} {max}");
    ensure!(r.get("samples_ok") == Some(&serde_json::Value::Bool(true)), "read-back mismatch");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("100/100/0, p50 {p50:.1} us, p99 {p99:.1} us, {elapsed:?}"))
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
    let checks: Vec<Criterion> = vec![
        ("hook timer cadence", Box::new(hook_timer_cadence)),
        ("linear and circular buffers", Box::new(linear_and_circular)),
        ("read programs match bit arithmetic", Box::new(program_oracle)),
        ("async capture overrun", Box::new(async_overrun)),
        ("logical ids survive hotswap", Box::new(logical_stability)),
        ("sync and async paradigms agree", Box::new(|| rt.block_on(paradigms()))),
        ("property snapshot and registry persistence", Box::new(|| rt.block_on(persistence()))),
        ("function generator bench", Box::new(bench)),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria pass", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
