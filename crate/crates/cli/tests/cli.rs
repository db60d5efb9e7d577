use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use deskctl_core::hardware::Topology;
use deskctl_core::propdb::PropertyDb;
use deskctl_core::Station;
use deskctl_net::server::{serve, ClockMode, ServerOptions};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn deskctl(args: &[&str]) -> Out {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("deskctl").chain(args.iter().copied());
    let code = deskctl::run(argv, &mut out, &mut err);
    Out { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

/// Frozen desk1 server on its own runtime, registered in `db` if given.
fn server(db: Option<&Path>) -> SocketAddr {
    let db = Arc::new(db.map_or_else(PropertyDb::in_memory, |p| PropertyDb::open(p).unwrap()));
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            let opts = ServerOptions { clock: ClockMode::Frozen, ..ServerOptions::default() };
            let h = serve(listener, Station::new(Topology::desk1()), db, opts).await.unwrap();
            tx.send(h.local_addr()).unwrap();
            h.wait().await;
        });
    });
    rx.recv().unwrap()
}

#[test]
fn unknown_command_exits_1_with_code() {
    let addr = server(None).to_string();
    let r = deskctl(&["exec", "sim/motor/1", "Fly", "--endpoint", &addr]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.starts_with("error: unknown-command"), "{}", r.stderr);
    assert_eq!(r.stderr.lines().count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(deskctl(&["frobnicate"]).code, 2);
    assert_eq!(deskctl(&["exec"]).code, 2);
    assert_eq!(deskctl(&["bench", "--period", "ten"]).code, 2);
    assert_eq!(deskctl(&["--help"]).code, 0);
}

#[test]
fn exec_sync_and_async() {
    let addr = server(None).to_string();
    let r = deskctl(&["exec", "sim/motor/1", "Jog", "0,25", "--endpoint", &addr]);
    assert_eq!((r.code, r.stdout.as_str()), (0, "25\n"));
    let r = deskctl(&["exec", "sim/motor/1", "ReadPos", "0", "--async", "--endpoint", &addr]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("ack ticket="));
    assert!(r.stdout.ends_with("\n25\n"), "{}", r.stdout);
    let r = deskctl(&["exec", "sim/dio/1", "Write", "70000", "--endpoint", &addr]);
    assert!(r.stderr.starts_with("error: bad-payload"), "{}", r.stderr);
}

#[test]
fn devices_are_found_through_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("site.db");
    let addr = server(Some(&db));
    let db = db.to_str().unwrap();
    let r = deskctl(&["db", "devices", "--db", db]);
    assert!(r.stdout.contains(&format!("sim/motor/1 {addr} deskctl")), "{}", r.stdout);
    let r = deskctl(&["exec", "sim/station/1", "Now", "--db", db]);
    assert!(r.stderr.starts_with("error: unknown-device"), "{}", r.stderr);
    let r = deskctl(&["exec", "sys/station/1", "Now", "--db", db]);
    assert_eq!(r.stdout, "0\n");
}

#[test]
fn listen_prints_numbered_events() {
    let addr = server(None).to_string();
    let a = addr.clone();
    let listener = std::thread::spawn(move || deskctl(&["listen", "sim/motor/1", "value:pos1", "--count", "3", "--endpoint", &a]));
    // the first event is the current value; each jog adds one
    std::thread::sleep(std::time::Duration::from_millis(300));
    for _ in 0..2 {
        assert_eq!(deskctl(&["exec", "sim/motor/1", "Jog", "1,5", "--endpoint", &addr]).code, 0);
    }
    let r = listener.join().unwrap();
    assert_eq!((r.code, r.stdout.as_str()), (0, "1 0\n2 5\n3 10\n"), "{}", r.stderr);
}

#[test]
fn topology_show_and_reconcile() {
    let r = deskctl(&["topology", "show"]);
    assert_eq!(r.code, 0);
    assert_eq!(
        r.stdout,
        "generation=0\n\
         physical=0 at=0/1 type=vct6 logical=1\n\
         physical=1 at=0/2 type=adc8 logical=2\n\
         physical=2 at=1/3 type=mot4 logical=3\n\
         physical=3 at=1/5 type=dio16 logical=4\n"
    );

    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("map.db");
    let db = db.to_str().unwrap();
    let first = deskctl(&["topology", "reconcile", "--db", db]);
    assert_eq!(first.code, 0);
    assert!(first.stdout.starts_with("classification="), "{}", first.stdout);
    let again = deskctl(&["topology", "reconcile", "--db", db]);
    assert_eq!(again.stdout, "classification=none\n");

    // a topology without the adc leaves logical 2 missing until forgotten
    let spec = dir.path().join("no-adc.json");
    let text = deskctl_core::hardware::DESK1.replace(r#""2": { "board_type": "adc8", "serial": "ADC8-0107" }"#, "");
    let text = text.replace(r#""VCT6-0001" },"#, r#""VCT6-0001" }"#);
    std::fs::write(&spec, text).unwrap();
    let spec = spec.to_str().unwrap();
    let r = deskctl(&["topology", "reconcile", "--spec", spec, "--db", db]);
    assert_eq!(r.stdout, "classification=non-trivial\nMISSING logical=2 type=adc8 at=0/2\n", "{}", r.stderr);
    let r = deskctl(&["topology", "show", "--spec", spec, "--db", db]);
    assert!(r.stdout.contains("physical=1 at=1/3 type=mot4 logical=3\n"), "{}", r.stdout);
    assert!(r.stdout.ends_with("missing logical=2 type=adc8 at=0/2\n"), "{}", r.stdout);
    let r = deskctl(&["topology", "forget", "2", "--spec", spec, "--db", db]);
    assert_eq!(r.stdout, "forgot logical=2 type=adc8 at=0/2\n", "{}", r.stderr);
    let r = deskctl(&["topology", "forget", "3", "--spec", spec, "--db", db]);
    assert_eq!(r.code, 1);
}

#[test]
fn db_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.db");
    let b = dir.path().join("b.db");
    let snap = dir.path().join("snap.txt");
    let (a, b, snap) = (a.to_str().unwrap(), b.to_str().unwrap(), snap.to_str().unwrap());
    assert_eq!(deskctl(&["db", "put", "motor:limits", "-100", "100", "--db", a]).code, 0);
    assert_eq!(deskctl(&["db", "put", "motor:name", "x stage", "--db", a]).code, 0);
    assert_eq!(deskctl(&["db", "get", "motor:limits", "--db", a]).stdout, "-100\n100\n");
    assert_eq!(deskctl(&["db", "list", "motor:", "--db", a]).stdout, "motor:limits\nmotor:name\n");
    assert_eq!(deskctl(&["db", "export", snap, "--db", a]).code, 0);
    assert_eq!(deskctl(&["db", "import", snap, "--db", b]).code, 0);
    assert_eq!(deskctl(&["db", "get", "motor:name", "--db", b]).stdout, "x stage\n");
    assert_eq!(deskctl(&["db", "delete", "motor:name", "--db", b]).code, 0);
    let r = deskctl(&["db", "get", "motor:name", "--db", b]);
    assert!(r.stderr.starts_with("error: not-found"), "{}", r.stderr);
    assert_eq!(deskctl(&["db", "get", "no-colon", "--db", b]).code, 1);
}

#[test]
fn hook_lifecycle_over_the_wire() {
    let addr = server(None).to_string();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hook.json");
    std::fs::write(
        &cfg,
        r#"{"channels":[{"driver":"vct6","logical":1,"channel":0},{"driver":"mot4","logical":3,"channel":0}],
            "trigger":{"timer":{"period":10}},"capacity":8,"mode":"circular"}"#,
    )
    .unwrap();
    let ep = ["--endpoint", addr.as_str()];
    let run = |args: &[&str]| deskctl(&[args, &ep[..]].concat());
    let r = run(&["hook", "config", cfg.to_str().unwrap()]);
    assert_eq!((r.code, r.stdout.as_str()), (0, "1\n"), "{}", r.stderr);
    assert_eq!(run(&["hook", "arm", "--id", "1"]).code, 0);
    assert_eq!(run(&["exec", "sim/motor/1", "Move", "0,7"]).code, 0);
    assert_eq!(run(&["exec", "sys/station/1", "Advance", "30"]).stdout, "30\n");
    let status = run(&["hook", "status", "--id", "1"]);
    let v: serde_json::Value = serde_json::from_str(&status.stdout).unwrap();
    assert_eq!(v["events_seen"], 3);
    let r = run(&["hook", "dump", "--id", "1"]);
    assert_eq!(r.stdout, "seq,timestamp,vct6/1/count0,mot4/3/pos0\n1,10,10,7\n2,20,20,7\n3,30,30,7\n");
    let out = dir.path().join("dump.csv");
    assert_eq!(run(&["hook", "dump", "--id", "1", "--from", "3", "--out", out.to_str().unwrap()]).code, 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "seq,timestamp,vct6/1/count0,mot4/3/pos0\n3,30,30,7\n");
    let r = run(&["hook", "trigger", "--id", "1"]);
    assert!(r.stderr.starts_with("error: not-software-triggered"), "{}", r.stderr);
    assert_eq!(run(&["hook", "disarm", "--id", "1"]).code, 0);
    let r = run(&["hook", "status", "--id", "9"]);
    assert!(r.stderr.starts_with("error: unknown-hook"), "{}", r.stderr);
}

#[test]
fn bench_reports_text_and_json() {
    let r = deskctl(&["bench", "--period", "10", "--events", "20", "--fast"]);
    assert_eq!(r.code, 0);
    assert!(r.stdout.starts_with("period=10 events=20 records=20 overruns=0 faults=0\n"), "{}", r.stdout);
    let r = deskctl(&["bench", "--period", "10", "--events", "100", "--async-delay", "15", "--fast", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!((v["events"].as_u64(), v["records"].as_u64(), v["overruns"].as_u64()), (Some(100), Some(50), Some(50)));
    let r = deskctl(&["bench", "--events", "0", "--fast"]);
    assert!(r.stdout.starts_with("period=10 events=0 records=0 overruns=0"), "{}", r.stdout);
    assert_eq!(deskctl(&["bench", "--period", "0"]).code, 1);
}
