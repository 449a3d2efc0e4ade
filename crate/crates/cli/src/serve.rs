//! Live session: the simulator runs in real time on its own thread and
//! streams snapshots to any number of WebSocket clients.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use thorgrasp::sim::protocol::{Command, Message, PROTO_VERSION};
use thorgrasp::sim::{Scenario, Simulation};
use tungstenite::Message as WsMessage;

#[derive(Clone, Copy, Debug)]
pub struct ServeOptions {
    pub tick_hz: f64,
    /// Snapshot rate, measured in wall-clock time.
    pub snapshot_hz: f64,
    /// Per-client queue length; the oldest line is dropped when full.
    pub queue_len: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            tick_hz: 50.0,
            snapshot_hz: 25.0,
            queue_len: 32,
        }
    }
}

/// Bounded per-client send queue.
struct Outbox {
    lines: Mutex<VecDeque<String>>,
    cap: usize,
    open: AtomicBool,
}

impl Outbox {
    fn new(cap: usize) -> Self {
        Self {
            lines: Mutex::new(VecDeque::with_capacity(cap)),
            cap,
            open: AtomicBool::new(true),
        }
    }

    fn push(&self, line: String) {
        let mut q = self.lines.lock().unwrap();
        if q.len() >= self.cap {
            q.pop_front();
        }
        q.push_back(line);
    }

    fn take(&self) -> Vec<String> {
        self.lines.lock().unwrap().drain(..).collect()
    }
}

struct Hub {
    clients: Mutex<Vec<Arc<Outbox>>>,
    latest: Mutex<String>,
    tick: AtomicU64,
    stop: AtomicBool,
}

impl Hub {
    fn broadcast(&self, line: &str) {
        let mut clients = self.clients.lock().unwrap();
        clients.retain(|c| c.open.load(Ordering::Relaxed));
        for c in clients.iter() {
            c.push(line.to_string());
        }
    }

    /// Registers a client whose first queued line is the latest snapshot.
    fn subscribe(&self, cap: usize) -> Arc<Outbox> {
        let outbox = Arc::new(Outbox::new(cap));
        let mut clients = self.clients.lock().unwrap();
        outbox.push(self.latest.lock().unwrap().clone());
        clients.push(outbox.clone());
        outbox
    }
}

struct Request {
    command: Command,
    client_tick: Option<u64>,
    reply: Arc<Outbox>,
}

pub struct Server {
    addr: SocketAddr,
    hub: Arc<Hub>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    /// Starts the simulator and the accept loop on `listener`.
    pub fn start(scenario: Scenario, listener: TcpListener, options: ServeOptions) -> Result<Server> {
        let addr = listener.local_addr()?;
        let sim = Simulation::new(scenario).context("building the simulation")?;
        let hub = Arc::new(Hub {
            clients: Mutex::new(Vec::new()),
            latest: Mutex::new(snapshot_line(&sim)),
            tick: AtomicU64::new(sim.tick()),
            stop: AtomicBool::new(false),
        });
        let (tx, rx) = mpsc::channel();
        listener.set_nonblocking(true)?;
        let sim_hub = hub.clone();
        let sim_thread = thread::Builder::new().name("simulator".into()).spawn(move || simulate(sim, rx, sim_hub, options))?;
        let cast_hub = hub.clone();
        let cast_thread = thread::Builder::new().name("broadcast".into()).spawn(move || broadcast(cast_hub, options))?;
        let accept_hub = hub.clone();
        let accept_thread = thread::Builder::new().name("accept".into()).spawn(move || accept(listener, tx, accept_hub, options))?;
        Ok(Server {
            addr,
            hub,
            threads: vec![sim_thread, cast_thread, accept_thread],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops every thread and closes client connections.
    pub fn shutdown(mut self) {
        self.hub.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the process is terminated.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn snapshot_line(sim: &Simulation) -> String {
    Message::Snapshot {
        proto_version: PROTO_VERSION,
        tick: sim.tick(),
        snapshot: Box::new(sim.snapshot()),
    }
    .to_line()
}

fn simulate(mut sim: Simulation, rx: Receiver<Request>, hub: Arc<Hub>, options: ServeOptions) {
    let period = Duration::from_secs_f64(1.0 / options.tick_hz);
    let mut next = Instant::now();
    let mut halted = false;
    while !hub.stop.load(Ordering::Relaxed) {
        // Commands are drained once per tick; this thread is the only writer.
        while let Ok(req) = rx.try_recv() {
            if let Err(e) = sim.apply_command(&req.command, req.client_tick) {
                req.reply.push(Message::error(sim.tick(), e.to_string()).to_line());
            }
            if matches!(req.command, Command::Reset) {
                halted = false;
            }
        }
        if !halted && !sim.is_paused() && !sim.finished() {
            if let Err(e) = sim.step() {
                // Invariant violations freeze the session; clients still get snapshots and can reset.
                hub.broadcast(&Message::error(sim.tick(), e.to_string()).to_line());
                halted = true;
            }
        }
        hub.tick.store(sim.tick(), Ordering::Relaxed);
        *hub.latest.lock().unwrap() = snapshot_line(&sim);
        next += period;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            // Running behind: do not try to catch up with a burst.
            next = now;
        }
    }
}

/// Sends the latest published snapshot at a fixed wall-clock rate, so the
/// stream rate does not depend on how long a simulation tick takes.
fn broadcast(hub: Arc<Hub>, options: ServeOptions) {
    let period = Duration::from_secs_f64(1.0 / options.snapshot_hz);
    let mut next = Instant::now();
    while !hub.stop.load(Ordering::Relaxed) {
        let line = hub.latest.lock().unwrap().clone();
        hub.broadcast(&line);
        next += period;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    }
}

fn accept(listener: TcpListener, tx: Sender<Request>, hub: Arc<Hub>, options: ServeOptions) {
    let mut clients = Vec::new();
    while !hub.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let (tx, hub) = (tx.clone(), hub.clone());
                if let Ok(h) = thread::Builder::new().name("client".into()).spawn(move || {
                    let _ = client(stream, tx, hub, options);
                }) {
                    clients.push(h);
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
        clients.retain(|h| !h.is_finished());
    }
    for h in clients {
        let _ = h.join();
    }
}

fn client(stream: TcpStream, tx: Sender<Request>, hub: Arc<Hub>, options: ServeOptions) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    let mut ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("handshake: {e}"))?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    let outbox = hub.subscribe(options.queue_len);
    let result = (|| -> Result<()> {
        loop {
            if hub.stop.load(Ordering::Relaxed) {
                let _ = ws.close(None);
                let _ = ws.flush();
                return Ok(());
            }
            match ws.read() {
                Ok(WsMessage::Text(text)) => handle_line(&text, &tx, &hub, &outbox),
                Ok(WsMessage::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
            for line in outbox.take() {
                ws.send(WsMessage::Text(line))?;
            }
        }
    })();
    outbox.open.store(false, Ordering::Relaxed);
    result
}

fn handle_line(text: &str, tx: &Sender<Request>, hub: &Hub, outbox: &Arc<Outbox>) {
    let tick = hub.tick.load(Ordering::Relaxed);
    // One JSON object per line; a frame may carry several.
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let reply = match Message::parse(line) {
            Ok(Message::Command { command, client_tick, .. }) => match command.check() {
                Ok(()) => {
                    let _ = tx.send(Request { command, client_tick, reply: outbox.clone() });
                    continue;
                }
                Err(e) => e,
            },
            Ok(other) => format!("expected a command, got {}", kind(&other)),
            Err(e) => format!("malformed message: {e}"),
        };
        outbox.push(Message::error(tick, reply).to_line());
    }
}

fn kind(m: &Message) -> &'static str {
    match m {
        Message::Snapshot { .. } => "snapshot",
        Message::Command { .. } => "command",
        Message::Error { .. } => "error",
    }
}

/// Binds `port` on all interfaces and serves until the process exits.
pub fn serve(scenario: Scenario, port: u16) -> Result<()> {
    let listener = TcpListener::bind(("0.0.0.0", port)).with_context(|| format!("binding port {port}"))?;
    let server = Server::start(scenario, listener, ServeOptions::default())?;
    eprintln!("serving on ws://{}", server.local_addr());
    server.wait();
    Ok(())
}
