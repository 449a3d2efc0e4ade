use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use thorgrasp::sim::protocol::{Message, PROTO_VERSION};
use thorgrasp::sim::Scenario;
use thorgrasp_cli::serve::{ServeOptions, Server};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{connect, Message as WsMessage, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn start(port: u16) -> Server {
    let listener = TcpListener::bind(("127.0.0.1", port)).unwrap();
    Server::start(Scenario::random_grasp(3), listener, ServeOptions::default()).unwrap()
}

fn open(server: &Server) -> Client {
    connect(format!("ws://{}", server.local_addr())).unwrap().0
}

fn next(ws: &mut Client) -> Message {
    loop {
        match ws.read().unwrap() {
            WsMessage::Text(t) => return Message::parse(&t).unwrap(),
            _ => continue,
        }
    }
}

fn next_snapshot(ws: &mut Client) -> (u64, thorgrasp::sim::protocol::Snapshot) {
    loop {
        if let Message::Snapshot { tick, snapshot, .. } = next(ws) {
            return (tick, *snapshot);
        }
    }
}

fn send(ws: &mut Client, line: &str) {
    ws.send(WsMessage::Text(line.to_string())).unwrap();
}

#[test]
fn handshake_starts_with_a_full_snapshot() {
    let server = start(0);
    let mut ws = open(&server);
    let raw = loop {
        if let WsMessage::Text(t) = ws.read().unwrap() {
            break t;
        }
    };
    let v: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(v["type"], "snapshot");
    assert!(v["tick"].is_u64());
    assert_eq!(v["proto_version"], PROTO_VERSION);
    let Message::Snapshot { snapshot, .. } = Message::parse(&raw).unwrap() else { panic!("first message is not a snapshot") };
    assert_eq!(snapshot.objects.len(), 1);
    assert_eq!(snapshot.robot.q.len(), 7);
    assert!(snapshot.tracker.is_some() && snapshot.planner.is_some());
    server.shutdown();
}

#[test]
fn move_object_shows_up_within_three_snapshots() {
    let server = start(0);
    let mut ws = open(&server);
    send(&mut ws, r#"{"type":"command","proto_version":1,"tick":0,"client_tick":1,"command":{"kind":"pause"}}"#);
    // Let the pause land, then take a reference pose.
    let mut before = next_snapshot(&mut ws).1;
    for _ in 0..3 {
        before = next_snapshot(&mut ws).1;
    }
    assert!(before.paused);
    let x0 = before.objects[0].pose.position;
    send(&mut ws, r#"{"type":"command","proto_version":1,"tick":0,"client_tick":2,"command":{"kind":"move_object","index":0,"delta":[0.04,-0.02,0.0]}}"#);
    let moved = (0..3).map(|_| next_snapshot(&mut ws).1).any(|s| {
        let p = s.objects[0].pose.position;
        (p[0] - x0[0] - 0.04).abs() < 1e-9 && (p[1] - x0[1] + 0.02).abs() < 1e-9
    });
    assert!(moved);
    // Replaying the same client tag is a no-op.
    send(&mut ws, r#"{"type":"command","proto_version":1,"tick":0,"client_tick":2,"command":{"kind":"move_object","index":0,"delta":[0.04,-0.02,0.0]}}"#);
    for _ in 0..3 {
        let p = next_snapshot(&mut ws).1.objects[0].pose.position;
        assert!((p[0] - x0[0] - 0.04).abs() < 1e-9);
    }
    server.shutdown();
}

#[test]
fn malformed_commands_are_rejected_and_the_session_continues() {
    let server = start(0);
    let mut ws = open(&server);
    next_snapshot(&mut ws);
    for bad in [
        "not json",
        r#"{"type":"command","proto_version":9,"tick":0,"command":{"kind":"pause"}}"#,
        r#"{"type":"command","proto_version":1,"tick":0,"command":{"kind":"move_object","index":0,"delta":[2.0,0,0]}}"#,
        r#"{"type":"command","proto_version":1,"tick":0,"command":{"kind":"move_object","index":5}}"#,
    ] {
        send(&mut ws, bad);
        let err = loop {
            match next(&mut ws) {
                Message::Error { message, .. } => break message,
                _ => continue,
            }
        };
        assert!(!err.is_empty());
    }
    let (t1, _) = next_snapshot(&mut ws);
    let (t2, _) = next_snapshot(&mut ws);
    assert!(t2 >= t1);
    server.shutdown();
}

#[test]
fn reconnect_resumes_and_simulation_keeps_running() {
    let server = start(0);
    let mut ws = open(&server);
    let (t0, _) = next_snapshot(&mut ws);
    drop(ws);
    thread::sleep(Duration::from_millis(300));
    let mut ws = open(&server);
    let (t1, _) = next_snapshot(&mut ws);
    assert!(t1 > t0, "simulation stalled while no client was connected ({t0} -> {t1})");
    server.shutdown();
}

#[test]
fn client_reconnects_after_server_restart() {
    let server = start(0);
    let port = server.local_addr().port();
    let mut ws = open(&server);
    next_snapshot(&mut ws);
    server.shutdown();
    // The old connection ends once the server is gone.
    let closed = (0..200).any(|_| ws.read().is_err());
    assert!(closed);

    let restarted = thread::spawn(move || {
        thread::sleep(Duration::from_millis(500));
        start(port)
    });
    let began = Instant::now();
    let mut backoff = Duration::from_millis(50);
    let mut ws = loop {
        match connect(format!("ws://127.0.0.1:{port}")) {
            Ok((ws, _)) => break ws,
            Err(_) => {
                assert!(began.elapsed() < Duration::from_secs(5), "no reconnect within 5 s");
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_millis(800));
            }
        }
    };
    next_snapshot(&mut ws);
    assert!(began.elapsed() < Duration::from_secs(5));
    restarted.join().unwrap().shutdown();
}
