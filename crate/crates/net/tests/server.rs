use std::sync::Arc;
use std::time::Duration;

use deskctl_core::hardware::Topology;
use deskctl_core::propdb::PropertyDb;
use deskctl_core::{Payload, Station};
use deskctl_net::client::SubEvent;
use deskctl_net::server::{serve, ClockMode, ServerHandle, ServerOptions};
use deskctl_net::{gateway, Client};
use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;

async fn start(clock: ClockMode) -> ServerHandle {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let opts = ServerOptions { clock, ..ServerOptions::default() };
    serve(listener, Station::new(Topology::desk1()), Arc::new(PropertyDb::in_memory()), opts).await.unwrap()
}

async fn next_event(sub: &mut deskctl_net::client::Subscription) -> SubEvent {
    tokio::time::timeout(Duration::from_secs(5), sub.next()).await.expect("event in time").expect("open")
}

#[tokio::test]
async fn sync_async_and_errors() {
    let server = start(ClockMode::Frozen).await;
    let c = Client::connect(server.local_addr()).await.unwrap();
    assert_eq!(c.sync("sys/station/1", "Advance", Payload::Int(25)).await.unwrap(), Payload::Int(25));
    assert_eq!(c.sync("sim/counter/1", "Read", Payload::None).await.unwrap(), Payload::Int(25));
    let t = c.submit("sim/motor/1", "Jog", Payload::IntList(vec![2, 40])).await.unwrap();
    assert_eq!(t.wait().await.unwrap(), Payload::Int(40));
    let e = c.sync("sim/counter/1", "Launch", Payload::None).await.unwrap_err();
    assert_eq!(e.code, "unknown-command");
    let e = c.call_async("sim/none/1", "State", Payload::None).await.unwrap_err();
    assert_eq!(e.code, "unknown-device");
    let e = c.sync("sim/dio/1", "Write", Payload::Str("x".into())).await.unwrap_err();
    assert_eq!(e.code, "bad-payload");
    let d = c.describe("sim/motor/1").await.unwrap();
    assert!(d.to_string().contains("\"Jog\""));
    server.shutdown().await;
}

#[tokio::test]
async fn subscriptions_follow_changes() {
    let server = start(ClockMode::Frozen).await;
    let watcher = Client::connect(server.local_addr()).await.unwrap();
    let actor = Client::connect(server.local_addr()).await.unwrap();
    let mut sub = watcher.subscribe("sim/motor/1", "state").await.unwrap();
    assert_eq!(next_event(&mut sub).await, SubEvent::Event { seq: 1, payload: Payload::Str("ON".into()) });
    actor.sync("sim/motor/1", "Start", Payload::Int(0)).await.unwrap();
    actor.sync("sim/motor/1", "Start", Payload::Int(1)).await.unwrap();
    actor.sync("sim/motor/1", "Stop", Payload::Int(0)).await.unwrap();
    actor.sync("sim/motor/1", "Stop", Payload::Int(1)).await.unwrap();
    assert_eq!(next_event(&mut sub).await, SubEvent::Event { seq: 2, payload: Payload::Str("MOVING".into()) });
    assert_eq!(next_event(&mut sub).await, SubEvent::Event { seq: 3, payload: Payload::Str("ON".into()) });
    watcher.unsubscribe(sub.id).await.unwrap();
    assert_eq!(watcher.unsubscribe(sub.id).await.unwrap_err().code, "unknown-subscription");
    let e = watcher.subscribe("sim/motor/1", "value:pos9").await.err().unwrap();
    assert_eq!(e.code, "unknown-event");
    server.shutdown().await;
}

#[tokio::test]
async fn malformed_frames_keep_the_session() {
    let server = start(ClockMode::Frozen).await;
    let mut s = TcpStream::connect(server.local_addr()).await.unwrap();
    let mut send = async |body: &[u8]| {
        s.write_u32(body.len() as u32).await.unwrap();
        s.write_all(body).await.unwrap();
        let n = s.read_u32().await.unwrap();
        let mut buf = vec![0; n as usize];
        s.read_exact(&mut buf).await.unwrap();
        String::from_utf8(buf).unwrap()
    };
    let r = send(b"{not json").await;
    assert!(r.contains(r#""code":"bad-frame""#), "{r}");
    let r = send(br#"{"kind":"reply","id":3,"payload":null}"#).await;
    assert!(r.contains(r#""code":"bad-frame""#), "{r}");
    let r = send(br#"{"kind":"sync","id":4,"device":"sim/counter/1","command":"State"}"#).await;
    assert_eq!(r, r#"{"kind":"reply","id":4,"payload":"ON"}"#);
    server.shutdown().await;
}

#[tokio::test]
async fn realtime_clock_runs() {
    let server = start(ClockMode::Realtime { step_ms: 10 }).await;
    let c = Client::connect(server.local_addr()).await.unwrap();
    let mut sub = c.subscribe("sim/counter/1", "value:count0").await.unwrap();
    let first = next_event(&mut sub).await;
    let second = next_event(&mut sub).await;
    let (SubEvent::Event { payload: Payload::Int(a), .. }, SubEvent::Event { seq: 2, payload: Payload::Int(b) }) = (first, second) else {
        panic!("counter events expected")
    };
    assert!(b > a);
    server.shutdown().await;
}

#[tokio::test]
async fn gateway_lists_devices_and_bridges_websocket() {
    let server = start(ClockMode::Frozen).await;
    let http = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let http_addr = http.local_addr().unwrap();
    let gw = gateway::spawn(http, server.local_addr(), server.db());

    let mut s = TcpStream::connect(http_addr).await.unwrap();
    s.write_all(b"GET /devices HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let body = resp.split("\r\n\r\n").nth(1).unwrap();
    let list: serde_json::Value = serde_json::from_str(body).unwrap();
    let names: Vec<&str> = list.as_array().unwrap().iter().map(|e| e["device"].as_str().unwrap()).collect();
    assert_eq!(names, ["sim/adc/1", "sim/counter/1", "sim/dio/1", "sim/motor/1", "sys/station/1"]);
    assert_eq!(list[0]["port"], server.local_addr().port());

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{http_addr}/ws")).await.unwrap();
    let mut roundtrip = async |text: &str| {
        ws.send(Message::Text(text.into())).await.unwrap();
        loop {
            match ws.next().await.unwrap().unwrap() {
                Message::Text(t) => return t.to_string(),
                _ => continue,
            }
        }
    };
    let r = roundtrip("garbage").await;
    assert!(r.contains(r#""code":"bad-frame""#), "{r}");
    let r = roundtrip(r#"{"kind":"sync","id":1,"device":"sys/station/1","command":"Advance","payload":5}"#).await;
    assert_eq!(r, r#"{"kind":"reply","id":1,"payload":5}"#);
    let r = roundtrip(r#"{"kind":"subscribe","id":2,"device":"sim/counter/1","event":"value:count0"}"#).await;
    assert_eq!(r, r#"{"kind":"subscribed","id":2,"subscription":1}"#);
    gw.abort();
    server.shutdown().await;
}
