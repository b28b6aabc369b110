use std::net::SocketAddr;
use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use vader_harvest::batch::make_ideal_trial;
use vader_harvest::executive::{ExecConfig, HarvestState};
use vader_harvest::sim::NoiseModel;
use vader_harvest::{ArmId, HarvestScene};
use vader_teleop::autonomy::AutonomySetup;
use vader_teleop::{serve, ServerConfig, SimHandle, TeleopError, TeleopMessage, TeleopServer};

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn start(sim: SimHandle) -> TeleopServer {
    let cfg = ServerConfig {
        bind: SocketAddr::from(([127, 0, 0, 1], 0)),
        ..ServerConfig::default()
    };
    serve(cfg, sim).unwrap()
}

fn idle() -> TeleopServer {
    start(SimHandle::idle(&HarvestScene::default_cell()).unwrap())
}

async fn connect(addr: SocketAddr) -> Socket {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn send(ws: &mut Socket, m: &TeleopMessage) {
    ws.send(Message::text(m.to_json())).await.unwrap();
}

/// Next message matching `pred`, skipping telemetry and other traffic.
async fn expect<F: Fn(&TeleopMessage) -> bool>(ws: &mut Socket, pred: F) -> TeleopMessage {
    tokio::time::timeout(Duration::from_secs(5), async {
        loop {
            if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
                let m = TeleopMessage::from_json(t.as_str()).unwrap();
                if pred(&m) {
                    return m;
                }
            }
        }
    })
    .await
    .expect("message within 5 s")
}

async fn state_of(ws: &mut Socket, arm: ArmId) -> [f64; 7] {
    match expect(ws, |m| matches!(m, TeleopMessage::StateUpdate { arm: a, .. } if *a == arm)).await {
        TeleopMessage::StateUpdate { q, .. } => q,
        _ => unreachable!(),
    }
}

async fn http_get(addr: SocketAddr, path: &str) -> String {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(format!("GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").as_bytes())
        .await
        .unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).await.unwrap();
    body
}

#[tokio::test(flavor = "multi_thread", worker_threads = 1)]
async fn ping_is_answered_and_loop_keeps_rate() {
    let server = idle();
    let mut ws = connect(server.addr()).await;
    let mut rtts = Vec::new();
    for nonce in 0..200 {
        let t = Instant::now();
        send(&mut ws, &TeleopMessage::Ping { nonce }).await;
        expect(&mut ws, |m| matches!(m, TeleopMessage::Pong { nonce: n, .. } if *n == nonce)).await;
        rtts.push(t.elapsed());
    }
    rtts.sort();
    assert!(rtts[197] < Duration::from_millis(30), "p99 {:?}", rtts[197]);

    let t0 = Instant::now();
    let n0 = server.ticks();
    tokio::time::sleep(Duration::from_secs(2)).await;
    let rate = (server.ticks() - n0) as f64 / t0.elapsed().as_secs_f64();
    assert!((95.0..=105.0).contains(&rate), "{rate} Hz");
    server.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 1)]
async fn operator_jogs_a_joint_and_releases() {
    let server = idle();
    let mut ws = connect(server.addr()).await;
    let start = state_of(&mut ws, ArmId::Gripper).await;
    send(&mut ws, &TeleopMessage::Takeover { arm: ArmId::Gripper }).await;
    let mut target = start;
    target[3] += 0.1;
    let t0 = Instant::now();
    let mut seq = 0;
    let mut last = start;
    while last != target {
        seq += 1;
        send(&mut ws, &TeleopMessage::JointCommand { arm: ArmId::Gripper, q: target, seq, t_client_us: 0 }).await;
        tokio::time::sleep(Duration::from_millis(25)).await;
        last = state_of(&mut ws, ArmId::Gripper).await;
        assert!(t0.elapsed() < Duration::from_secs(2), "no convergence, at {last:?}");
    }
    // the cutter was never taken over and holds still
    assert_eq!(state_of(&mut ws, ArmId::Cutter).await, HarvestScene::default_cell().home(ArmId::Cutter).as_slice());

    // sequence numbers must increase
    send(&mut ws, &TeleopMessage::JointCommand { arm: ArmId::Gripper, q: start, seq, t_client_us: 0 }).await;
    expect(&mut ws, |m| matches!(m, TeleopMessage::Error { .. })).await;

    let status = http_get(server.addr(), "/status").await;
    assert!(status.contains(r#""source":{"operator":"#), "{status}");
    send(&mut ws, &TeleopMessage::Release { arm: ArmId::Gripper }).await;
    tokio::time::sleep(Duration::from_millis(100)).await;
    let status = http_get(server.addr(), "/status").await;
    assert!(!status.contains("operator"), "{status}");
    server.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 1)]
async fn second_operator_is_refused_and_estop_freezes() {
    let server = idle();
    let mut a = connect(server.addr()).await;
    let mut b = connect(server.addr()).await;
    send(&mut a, &TeleopMessage::Takeover { arm: ArmId::Cutter }).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    send(&mut b, &TeleopMessage::Takeover { arm: ArmId::Cutter }).await;
    expect(&mut b, |m| matches!(m, TeleopMessage::Error { .. })).await;

    send(&mut b, &TeleopMessage::Estop).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    let mut far = state_of(&mut a, ArmId::Cutter).await;
    far[0] += 1.0;
    for seq in 1..20 {
        send(&mut a, &TeleopMessage::JointCommand { arm: ArmId::Cutter, q: far, seq, t_client_us: 0 }).await;
    }
    let frozen = state_of(&mut a, ArmId::Cutter).await;
    for _ in 0..30 {
        assert_eq!(state_of(&mut a, ArmId::Cutter).await, frozen);
    }
    server.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 1)]
async fn dropped_operator_freezes_the_arm() {
    let server = idle();
    let mut a = connect(server.addr()).await;
    send(&mut a, &TeleopMessage::Takeover { arm: ArmId::Gripper }).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    a.close(None).await.unwrap();
    drop(a);
    tokio::time::sleep(Duration::from_millis(100)).await;
    let status = http_get(server.addr(), "/status").await;
    assert!(status.contains(r#""arm":"gripper","q":"#) && status.contains(r#""source":"frozen""#), "{status}");
    server.shutdown();
}

#[test]
fn busy_port_is_reported() {
    let server = idle();
    let cfg = ServerConfig {
        bind: server.addr(),
        ..ServerConfig::default()
    };
    let again = serve(cfg, SimHandle::idle(&HarvestScene::default_cell()).unwrap());
    assert!(matches!(again, Err(TeleopError::PortInUse(p)) if p == server.addr().port()));
    server.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 1)]
async fn release_hands_the_live_configuration_back_to_the_executive() {
    let scene = HarvestScene::default_cell();
    let sim = make_ideal_trial(&scene, 9);
    let cfg = ExecConfig {
        noise: NoiseModel::zero(),
        ..ExecConfig::default()
    };
    let server = start(SimHandle::harvest(AutonomySetup { scene: scene.clone(), sim, cfg }).unwrap());
    let mut ws = connect(server.addr()).await;
    send(&mut ws, &TeleopMessage::Takeover { arm: ArmId::Gripper }).await;
    // control passes at the next waypoint boundary and the executive pauses between stages
    let t0 = Instant::now();
    while server.autonomy_status().unwrap().state != HarvestState::Paused {
        assert!(t0.elapsed() < Duration::from_secs(60), "executive never paused");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let paused_motions = server.autonomy_status().unwrap().motions;
    let mut target = state_of(&mut ws, ArmId::Gripper).await;
    target[0] += 0.05;
    let mut seq = 0;
    loop {
        seq += 1;
        send(&mut ws, &TeleopMessage::JointCommand { arm: ArmId::Gripper, q: target, seq, t_client_us: 0 }).await;
        tokio::time::sleep(Duration::from_millis(25)).await;
        if state_of(&mut ws, ArmId::Gripper).await == target {
            break;
        }
        assert!(t0.elapsed() < Duration::from_secs(90));
    }
    send(&mut ws, &TeleopMessage::Release { arm: ArmId::Gripper }).await;
    let t1 = Instant::now();
    loop {
        let s = server.autonomy_status().unwrap();
        if s.motions > paused_motions && s.state != HarvestState::Paused && s.last_motion_start[ArmId::Gripper.index()] == Some(target) {
            break;
        }
        assert!(t1.elapsed() < Duration::from_secs(60), "no replan from the live configuration: {s:?}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    server.shutdown();
}
