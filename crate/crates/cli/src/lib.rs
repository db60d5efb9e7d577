//! `deskctl`: run a station server and talk to it.
//!
//! Exit status is 0 on success, 1 when an operation fails (the error code is
//! printed as `error: <code>: <message>` on stderr) and 2 on usage errors.

pub mod bench;

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use deskctl_core::busmap::{enumerate, BindingState, Classification, LogicalId, MappingTable};
use deskctl_core::hardware::{Tick, Topology};
use deskctl_core::hook::DEFAULT_MIN_TIMER_PERIOD;
use deskctl_core::propdb::{PropertyDb, PropertyKey};
use deskctl_core::station::STATION_DEVICE;
use deskctl_core::{Payload, Station};
use deskctl_net::client::SubEvent;
use deskctl_net::server::{serve, ClockMode, ServerOptions};
use deskctl_net::{gateway, Client};

pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7600";

#[derive(Parser, Debug)]
#[command(name = "deskctl", version, about = "Desk control station tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a device server for a topology.
    Serve(ServeArgs),
    /// Inspect the bus map of a topology.
    Topology {
        #[command(subcommand)]
        action: TopologyCmd,
    },
    /// Read and write the property database.
    Db {
        #[command(subcommand)]
        action: DbCmd,
    },
    /// Run one command on a device.
    Exec {
        device: String,
        command: String,
        /// Argument: an integer, a comma-separated integer list, JSON, or a string.
        arg: Option<String>,
        /// Use the asynchronous request/acknowledge/completion exchange.
        #[arg(long = "async")]
        asynchronous: bool,
        #[command(flatten)]
        remote: Remote,
    },
    /// Print events of a device: `state`, `value:<channel>` or `hook:<id>`.
    Listen {
        device: String,
        event: String,
        /// Stop after this many events.
        #[arg(long)]
        count: Option<u64>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Configure and drive capture hooks on a running server.
    Hook {
        #[command(subcommand)]
        action: HookCmd,
    },
    /// Interrupt-to-record latency benchmark on an in-process station.
    Bench {
        /// Interrupt period in ticks (1 tick = 1 ms).
        #[arg(long, default_value_t = 10)]
        period: Tick,
        #[arg(long, default_value_t = 1000)]
        events: u64,
        /// Capture asynchronously, each job taking this many ticks.
        #[arg(long)]
        async_delay: Option<Tick>,
        /// Do not pace simulated time against the wall clock.
        #[arg(long)]
        fast: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Topology JSON file; the built-in desk1 topology when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    endpoint: String,
    /// Property database file (bus map and device registry).
    #[arg(long)]
    db: Option<PathBuf>,
    /// Also serve the HTTP/WebSocket gateway on this address.
    #[arg(long)]
    http: Option<String>,
    /// Keep the clock still; it then only moves through sys/station/1 Advance.
    #[arg(long)]
    frozen: bool,
    #[arg(long, default_value = "deskctl")]
    name: String,
    #[arg(long, default_value_t = DEFAULT_MIN_TIMER_PERIOD)]
    min_period: Tick,
}

#[derive(Args, Debug)]
struct Remote {
    /// Server address; defaults to $DESKCTL_ENDPOINT or 127.0.0.1:7600.
    #[arg(long)]
    endpoint: Option<String>,
    /// Resolve the device through the registry in this database instead.
    #[arg(long)]
    db: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum TopologyCmd {
    /// Print the logical board table.
    Show(TopoArgs),
    /// Enumerate, reconcile against the saved table and print the change report.
    Reconcile(TopoArgs),
    /// Drop a missing logical binding.
    Forget {
        logical: u32,
        #[command(flatten)]
        topo: TopoArgs,
    },
}

#[derive(Args, Debug)]
struct TopoArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Load and save the mapping table here.
    #[arg(long)]
    db: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum DbCmd {
    Get { key: String, #[arg(long)] db: PathBuf },
    Put { key: String, #[arg(required = true, allow_negative_numbers = true)] values: Vec<String>, #[arg(long)] db: PathBuf },
    Delete { key: String, #[arg(long)] db: PathBuf },
    /// List keys, optionally under a prefix.
    List { prefix: Option<String>, #[arg(long)] db: PathBuf },
    Export { file: PathBuf, #[arg(long)] db: PathBuf },
    Import { file: PathBuf, #[arg(long)] db: PathBuf },
    /// Print the device registry.
    Devices { #[arg(long)] db: PathBuf },
}

#[derive(Subcommand, Debug)]
enum HookCmd {
    /// Configure a hook from a JSON file; prints its id.
    Config { file: PathBuf, #[command(flatten)] remote: Remote },
    Arm { #[arg(long)] id: u32, #[arg(long)] reset: bool, #[command(flatten)] remote: Remote },
    Disarm { #[arg(long)] id: u32, #[command(flatten)] remote: Remote },
    Status { #[arg(long)] id: u32, #[command(flatten)] remote: Remote },
    /// Software trigger.
    Trigger { #[arg(long)] id: u32, #[command(flatten)] remote: Remote },
    /// Write the buffer as CSV.
    Dump {
        #[arg(long)]
        id: u32,
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        remote: Remote,
    },
}

/// Failure of a subcommand: a stable code plus a human message.
#[derive(Debug)]
pub struct Failure {
    pub code: String,
    pub message: String,
}

impl Failure {
    fn new(code: &str, message: impl ToString) -> Self {
        Failure { code: code.to_string(), message: message.to_string() }
    }
}

impl From<deskctl_net::RemoteError> for Failure {
    fn from(e: deskctl_net::RemoteError) -> Self {
        Failure { code: e.code, message: e.message }
    }
}

impl From<deskctl_core::propdb::PropertyError> for Failure {
    fn from(e: deskctl_core::propdb::PropertyError) -> Self {
        Failure::new(e.code(), &e)
    }
}

impl From<deskctl_core::busmap::BusMapError> for Failure {
    fn from(e: deskctl_core::busmap::BusMapError) -> Self {
        Failure::new(e.code(), &e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("io", e)
    }
}

type Res = Result<(), Failure>;

/// Entry point shared by the binary and the tests.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            let _ = writeln!(err, "error: io: {e}");
            return 1;
        }
    };
    match rt.block_on(dispatch(cli.command, out)) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}: {}", f.code, f.message);
            1
        }
    }
}

fn load_topology(spec: Option<&Path>) -> Result<Topology, Failure> {
    match spec {
        None => Ok(Topology::desk1()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Topology::from_json(&text).map_err(|e| Failure::new(e.code(), e))
        }
    }
}

fn open_db(path: &Path) -> Result<PropertyDb, Failure> {
    Ok(PropertyDb::open(path)?)
}

async fn dispatch(cmd: Command, out: &mut dyn Write) -> Res {
    match cmd {
        Command::Serve(a) => serve_cmd(a, out).await,
        Command::Topology { action } => topology_cmd(action, out),
        Command::Db { action } => db_cmd(action, out),
        Command::Exec { device, command, arg, asynchronous, remote } => {
            let c = connect(&remote, &device).await?;
            let payload = parse_arg(arg.as_deref());
            let r = if asynchronous {
                let ticket = c.submit(&device, &command, payload).await?;
                writeln!(out, "ack ticket={}", ticket.ticket)?;
                ticket.wait().await?
            } else {
                c.sync(&device, &command, payload).await?
            };
            print_payload(out, &r)
        }
        Command::Listen { device, event, count, remote } => {
            let c = connect(&remote, &device).await?;
            let mut sub = c.subscribe(&device, &event).await?;
            let mut n = 0;
            while count.is_none_or(|c| n < c) {
                match sub.next().await {
                    Some(SubEvent::Event { seq, payload }) => {
                        writeln!(out, "{seq} {payload}")?;
                        out.flush()?;
                        n += 1;
                    }
                    Some(SubEvent::Closed { code }) => return Err(Failure::new(&code, "subscription closed by server")),
                    None => return Err(Failure::new("disconnected", "connection to server lost")),
                }
            }
            Ok(())
        }
        Command::Hook { action } => hook_cmd(action, out).await,
        Command::Bench { period, events, async_delay, fast, json } => {
            let opts = bench::BenchOptions { period, events, async_delay, realtime: !fast };
            let report = tokio::task::spawn_blocking(move || bench::run_bench(&opts))
                .await
                .map_err(|e| Failure::new("internal", e))?
                .map_err(|m| Failure::new("bad-argument", m))?;
            if json {
                writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes"))?;
            } else {
                out.write_all(report.render().as_bytes())?;
            }
            Ok(())
        }
    }
}

fn print_payload(out: &mut dyn Write, p: &Payload) -> Res {
    match p {
        Payload::None => {}
        Payload::Str(s) if s.ends_with('\n') => write!(out, "{s}")?,
        other => writeln!(out, "{other}")?,
    }
    Ok(())
}

/// `5` → Int, `1,2` → list, other JSON as is, anything else a string.
pub fn parse_arg(arg: Option<&str>) -> Payload {
    let Some(a) = arg else { return Payload::None };
    if a.contains(',') && !a.trim_start().starts_with(['[', '{', '"']) {
        let ints: Result<Vec<i64>, _> = a.split(',').map(|s| s.trim().parse()).collect();
        if let Ok(v) = ints {
            return Payload::IntList(v);
        }
    }
    serde_json::from_str(a).unwrap_or_else(|_| Payload::Str(a.to_string()))
}

async fn connect(remote: &Remote, device: &str) -> Result<Client, Failure> {
    let endpoint = match (&remote.endpoint, &remote.db) {
        (Some(e), _) => e.clone(),
        (None, Some(db)) => {
            let entry = open_db(db)?
                .lookup_device(device)?
                .ok_or_else(|| Failure::new("unknown-device", format!("{device} is not in the registry")))?;
            format!("{}:{}", entry.host, entry.port)
        }
        (None, None) => std::env::var("DESKCTL_ENDPOINT").unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string()),
    };
    let connect = Client::connect(endpoint.as_str());
    match tokio::time::timeout(Duration::from_secs(5), connect).await {
        Ok(Ok(c)) => Ok(c),
        Ok(Err(e)) => Err(Failure::new("connect-failed", format!("{endpoint}: {e}"))),
        Err(_) => Err(Failure::new("connect-failed", format!("{endpoint}: timed out"))),
    }
}

async fn serve_cmd(a: ServeArgs, out: &mut dyn Write) -> Res {
    let topology = load_topology(a.spec.as_deref())?;
    let db = Arc::new(match &a.db {
        Some(p) => open_db(p)?,
        None => PropertyDb::in_memory(),
    });
    let table = MappingTable::load(&db)?;
    let station = Station::from_parts(topology, table, a.min_period);
    station.table().save(&db)?;
    let addr: SocketAddr = a.endpoint.parse().map_err(|e| Failure::new("bad-argument", format!("endpoint: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let clock = if a.frozen { ClockMode::Frozen } else { ClockMode::Realtime { step_ms: 10 } };
    let opts = ServerOptions { name: a.name.clone(), clock, ..ServerOptions::default() };
    let handle = serve(listener, station, db.clone(), opts).await?;
    writeln!(out, "serving on {}", handle.local_addr())?;
    if let Some(http) = &a.http {
        let l = tokio::net::TcpListener::bind(http).await?;
        writeln!(out, "gateway on http://{}", l.local_addr()?)?;
        gateway::spawn(l, handle.local_addr(), db);
    }
    out.flush()?;
    handle.wait().await;
    Ok(())
}

fn render_class(c: Classification) -> &'static str {
    match c {
        Classification::None => "none",
        Classification::Trivial => "trivial",
        Classification::NonTrivial => "non-trivial",
    }
}

fn topology_cmd(action: TopologyCmd, out: &mut dyn Write) -> Res {
    let args = match &action {
        TopologyCmd::Show(a) | TopologyCmd::Reconcile(a) | TopologyCmd::Forget { topo: a, .. } => a,
    };
    let topology = load_topology(args.spec.as_deref())?;
    let db = args.db.as_deref().map(open_db).transpose()?;
    let mut table = match &db {
        Some(db) => MappingTable::load(db)?,
        None => MappingTable::new(),
    };
    let enumeration = enumerate(&topology);
    let report = table.reconcile(&enumeration);
    match action {
        TopologyCmd::Show(_) => {
            writeln!(out, "generation={}", enumeration.generation)?;
            for e in &enumeration.boards {
                let logical = table
                    .bindings()
                    .find(|b| b.at == e.at && b.state == BindingState::Bound)
                    .map(|b| b.logical_id.to_string())
                    .unwrap_or_else(|| "-".into());
                writeln!(out, "physical={} at={} type={} logical={logical}", e.physical.0, e.at, e.board_type)?;
            }
            for b in table.bindings().filter(|b| b.state == BindingState::Missing) {
                writeln!(out, "missing logical={} type={} at={}", b.logical_id, b.board_type, b.at)?;
            }
        }
        TopologyCmd::Forget { logical, .. } => {
            let b = table.forget(LogicalId(logical))?;
            writeln!(out, "forgot logical={} type={} at={}", b.logical_id, b.board_type, b.at)?;
        }
        TopologyCmd::Reconcile(_) => {
            writeln!(out, "classification={}", render_class(report.classification))?;
            write!(out, "{}", report.render())?;
        }
    }
    if let Some(db) = &db {
        table.save(db)?;
    }
    Ok(())
}

fn key(k: &str) -> Result<PropertyKey, Failure> {
    Ok(PropertyKey::parse(k)?)
}

fn db_cmd(action: DbCmd, out: &mut dyn Write) -> Res {
    match action {
        DbCmd::Get { key: k, db } => {
            let v = open_db(&db)?
                .get(&key(&k)?)
                .ok_or_else(|| Failure::new("not-found", format!("no property {k}")))?;
            writeln!(out, "{}", v.join("\n"))?;
        }
        DbCmd::Put { key: k, values, db } => open_db(&db)?.put(&key(&k)?, values)?,
        DbCmd::Delete { key: k, db } => open_db(&db)?.delete(&key(&k)?)?,
        DbCmd::List { prefix, db } => {
            for k in open_db(&db)?.keys_with_prefix(prefix.as_deref().unwrap_or("")) {
                writeln!(out, "{k}")?;
            }
        }
        DbCmd::Export { file, db } => open_db(&db)?.export_snapshot(&file)?,
        DbCmd::Import { file, db } => open_db(&db)?.import_snapshot(&file)?,
        DbCmd::Devices { db } => {
            for e in open_db(&db)?.registry() {
                writeln!(out, "{} {}:{} {}", e.device, e.host, e.port, e.server)?;
            }
        }
    }
    Ok(())
}

async fn hook_cmd(action: HookCmd, out: &mut dyn Write) -> Res {
    let (remote, command, payload, dump_to) = match action {
        HookCmd::Config { file, remote } => {
            let text = std::fs::read_to_string(&file)?;
            (remote, "HookConfig", Payload::Str(text), None)
        }
        HookCmd::Arm { id, reset, remote } => (remote, "HookArm", Payload::IntList(vec![id.into(), reset.into()]), None),
        HookCmd::Disarm { id, remote } => (remote, "HookDisarm", Payload::Int(id.into()), None),
        HookCmd::Status { id, remote } => (remote, "HookStatus", Payload::Int(id.into()), None),
        HookCmd::Trigger { id, remote } => (remote, "HookTrigger", Payload::Int(id.into()), None),
        HookCmd::Dump { id, from, out: file, remote } => {
            (remote, "HookDump", Payload::IntList(vec![id.into(), from as i64]), Some(file))
        }
    };
    let c = connect(&remote, STATION_DEVICE).await?;
    let r = c.sync(STATION_DEVICE, command, payload).await?;
    match (dump_to, &r) {
        (Some(Some(file)), Payload::Str(csv)) => std::fs::write(file, csv)?,
        (_, Payload::Json(v)) => writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json value"))?,
        _ => print_payload(out, &r)?,
    }
    Ok(())
}
