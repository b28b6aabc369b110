//! WebSocket front end and the fixed-rate control thread.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use tokio::sync::{broadcast, mpsc as tmpsc, oneshot};
use tower_http::services::ServeDir;
use vader_harvest::{ArmId, HarvestScene};

use crate::autonomy::{joints, AutonomyDriver, AutonomySetup, AutonomyStatus};
use crate::control::{AutonomyFeed, AutonomyRequest, Command, ConnId, ControlCore, ControlLoopConfig, Event, Joints, Source};
use crate::protocol::{ProtocolError, SeqGuard, TeleopMessage, DOF};
use crate::TeleopError;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub control: ControlLoopConfig,
    /// Directory served over HTTP at `/` (the operator console's assets).
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8765)),
            control: ControlLoopConfig::default(),
            static_dir: None,
        }
    }
}

/// The simulated arms the server drives.
#[derive(Debug, Clone)]
pub struct SimHandle {
    pub initial: [Joints; 2],
    pub autonomy: Option<AutonomySetup>,
}

impl SimHandle {
    /// Both arms at home, no executive.
    pub fn idle(scene: &HarvestScene) -> Result<Self, TeleopError> {
        Ok(Self {
            initial: home(scene)?,
            autonomy: None,
        })
    }

    /// Both arms at home, driven by an autonomous harvest until an operator takes over.
    pub fn harvest(setup: AutonomySetup) -> Result<Self, TeleopError> {
        Ok(Self {
            initial: home(&setup.scene)?,
            autonomy: Some(setup),
        })
    }
}

fn home(scene: &HarvestScene) -> Result<[Joints; 2], TeleopError> {
    let mut out = [[0.0; DOF]; 2];
    for arm in ArmId::BOTH {
        let q = scene.home(arm);
        if q.len() != DOF {
            return Err(TeleopError::InvalidConfig(format!("{arm} has {} joints, the protocol carries {DOF}", q.len())));
        }
        out[arm.index()] = joints(q);
    }
    Ok(out)
}

/// Loop health counters.
#[derive(Debug, Default)]
pub struct LoopStats {
    pub ticks: AtomicU64,
    /// Ticks dropped because the loop fell more than a period behind.
    pub skipped: AtomicU64,
    pub max_lateness_us: AtomicU64,
}

#[derive(Debug, Clone, Serialize)]
struct ArmStatus {
    arm: ArmId,
    q: Joints,
    source: Source,
}

#[derive(Debug, Clone, Serialize)]
struct StatusBody {
    ticks: u64,
    skipped: u64,
    uptime_s: f64,
    estop: bool,
    arms: Vec<ArmStatus>,
}

struct Shared {
    epoch: Instant,
    mailbox: [Mutex<Option<Command>>; 2],
    events: Mutex<mpsc::Sender<Event>>,
    telemetry: broadcast::Sender<Arc<str>>,
    replies: Mutex<HashMap<ConnId, tmpsc::UnboundedSender<String>>>,
    next_conn: AtomicU64,
    stats: Arc<LoopStats>,
    snapshot: Mutex<StatusBody>,
}

impl Shared {
    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    fn send_event(&self, ev: Event) {
        let _ = self.events.lock().expect("event lock").send(ev);
    }
}

pub struct TeleopServer {
    addr: SocketAddr,
    stats: Arc<LoopStats>,
    stop: Arc<AtomicBool>,
    http_stop: Option<oneshot::Sender<()>>,
    threads: Vec<JoinHandle<()>>,
    autonomy: Option<AutonomyDriver>,
}

impl TeleopServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &LoopStats {
        &self.stats
    }

    pub fn ticks(&self) -> u64 {
        self.stats.ticks.load(Ordering::Relaxed)
    }

    pub fn autonomy_status(&self) -> Option<AutonomyStatus> {
        self.autonomy.as_ref().map(|a| a.status.lock().expect("status lock").clone())
    }

    /// Blocks until the HTTP side stops; used by the CLI.
    pub fn wait(mut self) {
        if let Some(http) = self.threads.pop() {
            let _ = http.join();
        }
        self.shutdown();
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(tx) = self.http_stop.take() {
            let _ = tx.send(());
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(a) = self.autonomy.take() {
            a.join();
        }
    }
}

/// Binds the socket, starts the control loop and the message server.
pub fn serve(cfg: ServerConfig, sim: SimHandle) -> Result<TeleopServer, TeleopError> {
    cfg.control.validate().map_err(TeleopError::InvalidConfig)?;
    let listener = std::net::TcpListener::bind(cfg.bind).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => TeleopError::PortInUse(cfg.bind.port()),
        _ => TeleopError::Io(e),
    })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let (ev_tx, ev_rx) = mpsc::channel();
    let (feed_tx, feed_rx) = mpsc::channel();
    let (req_tx, req_rx) = mpsc::channel();
    let (telemetry, _) = broadcast::channel(1024);
    let stats = Arc::new(LoopStats::default());
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(Shared {
        epoch: Instant::now(),
        mailbox: [Mutex::new(None), Mutex::new(None)],
        events: Mutex::new(ev_tx),
        telemetry,
        replies: Mutex::new(HashMap::new()),
        next_conn: AtomicU64::new(1),
        stats: stats.clone(),
        snapshot: Mutex::new(StatusBody {
            ticks: 0,
            skipped: 0,
            uptime_s: 0.0,
            estop: false,
            arms: Vec::new(),
        }),
    });

    let autonomy = match sim.autonomy {
        Some(setup) => Some(AutonomyDriver::spawn(setup, req_rx, feed_tx).map_err(|e| TeleopError::InvalidConfig(e.to_string()))?),
        None => None,
    };
    let core = ControlCore::new(cfg.control, sim.initial, autonomy.is_some());

    let mut threads = Vec::new();
    {
        let shared = shared.clone();
        let stop = stop.clone();
        let period = cfg.control.period();
        threads.push(
            std::thread::Builder::new()
                .name("control".into())
                .spawn(move || control_loop(core, period, shared, ev_rx, feed_rx, req_tx, stop))?,
        );
    }

    let (http_stop, http_rx) = oneshot::channel::<()>();
    let mut app = Router::new()
        .route("/ws", get(ws_handler))
        .route("/status", get(status_handler))
        .with_state(shared.clone());
    if let Some(dir) = &cfg.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    threads.push(std::thread::Builder::new().name("teleop-http".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("register listener");
            let server = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = http_rx.await;
            });
            if let Err(e) = server.await {
                log::error!("teleop server stopped: {e}");
            }
        });
    })?);
    log::info!("teleop server listening on {addr}");
    Ok(TeleopServer {
        addr,
        stats,
        stop,
        http_stop: Some(http_stop),
        threads,
        autonomy,
    })
}

fn control_loop(
    mut core: ControlCore,
    period: Duration,
    shared: Arc<Shared>,
    events: mpsc::Receiver<Event>,
    feed: mpsc::Receiver<AutonomyFeed>,
    requests: mpsc::Sender<AutonomyRequest>,
    stop: Arc<AtomicBool>,
) {
    let start = Instant::now();
    let mut k: u64 = 0;
    while !stop.load(Ordering::Relaxed) {
        k += 1;
        let deadline = start + period.mul_f64(k as f64);
        let now = Instant::now();
        if now < deadline {
            std::thread::sleep(deadline - now);
        } else {
            let late = now - deadline;
            shared.stats.max_lateness_us.fetch_max(late.as_micros() as u64, Ordering::Relaxed);
            if late > period {
                // drop missed ticks rather than bursting to catch up
                let behind = (late.as_secs_f64() / period.as_secs_f64()) as u64;
                shared.stats.skipped.fetch_add(behind, Ordering::Relaxed);
                k += behind;
            }
        }
        for msg in feed.try_iter() {
            core.feed(msg);
        }
        let evs: Vec<Event> = events.try_iter().collect();
        let cmds = [0, 1].map(|i| shared.mailbox[i].lock().expect("mailbox lock").clone());
        let out = core.tick(shared.now_us(), evs, [cmds[0].as_ref(), cmds[1].as_ref()]);
        for r in out.requests {
            let _ = requests.send(r);
        }
        if !out.replies.is_empty() {
            let replies = shared.replies.lock().expect("reply lock");
            for (conn, msg) in out.replies {
                if let Some(tx) = replies.get(&conn) {
                    let _ = tx.send(msg.to_json());
                }
            }
        }
        for s in &out.states {
            // never blocks; slow subscribers lag and skip
            let _ = shared.telemetry.send(Arc::from(s.to_json()));
        }
        let ticks = shared.stats.ticks.fetch_add(1, Ordering::Relaxed) + 1;
        if let Ok(mut snap) = shared.snapshot.try_lock() {
            snap.ticks = ticks;
            snap.skipped = shared.stats.skipped.load(Ordering::Relaxed);
            snap.uptime_s = start.elapsed().as_secs_f64();
            snap.estop = core.estopped();
            snap.arms = ArmId::BOTH
                .iter()
                .map(|&arm| ArmStatus {
                    arm,
                    q: *core.q(arm),
                    source: core.source(arm),
                })
                .collect();
        }
    }
}

async fn status_handler(State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    let body = shared.snapshot.lock().expect("snapshot lock").clone();
    Json(body)
}

async fn ws_handler(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, shared))
}

async fn connection(mut socket: WebSocket, shared: Arc<Shared>) {
    let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let (reply_tx, mut reply_rx) = tmpsc::unbounded_channel();
    shared.replies.lock().expect("reply lock").insert(conn, reply_tx);
    let mut telemetry = shared.telemetry.subscribe();
    let mut seq = SeqGuard::default();
    log::debug!("connection {conn} opened");
    loop {
        let outgoing: String = tokio::select! {
            biased;
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => match handle_message(&shared, conn, &mut seq, text.as_str()) {
                    Some(reply) => reply.to_json(),
                    None => continue,
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
            Some(reply) = reply_rx.recv() => reply,
            state = telemetry.recv() => match state {
                Ok(s) => s.to_string(),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            },
        };
        if socket.send(Message::Text(outgoing.into())).await.is_err() {
            break;
        }
    }
    shared.replies.lock().expect("reply lock").remove(&conn);
    shared.send_event(Event::Disconnected(conn));
    log::debug!("connection {conn} closed");
}

/// Ingests one client message; returns an immediate reply if there is one.
fn handle_message(shared: &Shared, conn: ConnId, seq: &mut SeqGuard, text: &str) -> Option<TeleopMessage> {
    let reply_err = |e: ProtocolError| Some(TeleopMessage::Error { message: e.to_string() });
    let msg = match TeleopMessage::from_json(text) {
        Ok(m) => m,
        Err(e) => return reply_err(e),
    };
    match msg {
        TeleopMessage::Ping { nonce } => Some(TeleopMessage::Pong {
            nonce,
            t_server_us: shared.now_us(),
        }),
        TeleopMessage::JointCommand { arm, q, seq: n, .. } => {
            if let Err(e) = seq.accept(n) {
                return reply_err(e);
            }
            // client timestamps are never trusted; staleness is judged on receipt time
            *shared.mailbox[arm.index()].lock().expect("mailbox lock") = Some(Command {
                conn,
                q,
                received_us: shared.now_us(),
            });
            None
        }
        TeleopMessage::Takeover { arm } => {
            shared.send_event(Event::Takeover { arm, conn });
            None
        }
        TeleopMessage::Release { arm } => {
            shared.send_event(Event::Release { arm, conn });
            None
        }
        TeleopMessage::Estop => {
            shared.send_event(Event::Estop);
            None
        }
        TeleopMessage::StateUpdate { .. } => reply_err(ProtocolError::ServerOnly("state")),
        TeleopMessage::Pong { .. } => reply_err(ProtocolError::ServerOnly("pong")),
        TeleopMessage::Error { .. } => reply_err(ProtocolError::ServerOnly("error")),
    }
}
