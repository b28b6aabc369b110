//! Runs the harvest executive on its own thread and streams its motions to the control loop.

use std::sync::mpsc::{Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use vader_core::kinematics::JointConfig;
use vader_harvest::executive::{detect, ExecConfig, Executive, HarvestState, Outcome};
use vader_harvest::sim::SimScene;
use vader_harvest::{ArmId, HarvestError, HarvestScene};

use crate::control::{AutonomyFeed, AutonomyRequest, Joints, Segment};

/// Everything needed to run one autonomous harvest.
#[derive(Debug, Clone)]
pub struct AutonomySetup {
    pub scene: HarvestScene,
    pub sim: SimScene,
    pub cfg: ExecConfig,
}

/// Snapshot of the executive for observers.
#[derive(Debug, Clone, PartialEq)]
pub struct AutonomyStatus {
    pub state: HarvestState,
    pub clock: f64,
    pub outcome: Option<Outcome>,
    /// First waypoint of the most recent motion of each arm.
    pub last_motion_start: [Option<Joints>; 2],
    pub motions: usize,
}

pub fn joints(q: &JointConfig) -> Joints {
    let mut j = [0.0; crate::protocol::DOF];
    j.copy_from_slice(q.as_slice());
    j
}

pub fn config(j: &Joints) -> JointConfig {
    JointConfig::from_column_slice(j)
}

pub struct AutonomyDriver {
    pub status: Arc<Mutex<AutonomyStatus>>,
    handle: JoinHandle<()>,
}

impl AutonomyDriver {
    /// Starts the executive thread. It exits when `requests` disconnects.
    pub fn spawn(
        setup: AutonomySetup,
        requests: Receiver<AutonomyRequest>,
        feed: Sender<AutonomyFeed>,
    ) -> Result<Self, HarvestError> {
        setup.scene.validate()?;
        let status = Arc::new(Mutex::new(AutonomyStatus {
            state: HarvestState::Home,
            clock: 0.0,
            outcome: None,
            last_motion_start: [None, None],
            motions: 0,
        }));
        let shared = status.clone();
        let handle = std::thread::Builder::new()
            .name("autonomy".into())
            .spawn(move || drive(setup, requests, feed, shared))
            .expect("spawn autonomy thread");
        Ok(Self { status, handle })
    }

    pub fn join(self) {
        let _ = self.handle.join();
    }
}

fn drive(setup: AutonomySetup, requests: Receiver<AutonomyRequest>, feed: Sender<AutonomyFeed>, status: Arc<Mutex<AutonomyStatus>>) {
    let AutonomySetup { scene, sim, cfg } = setup;
    let detections = detect(&sim, &cfg.noise, sim.seed);
    let mut ex = match Executive::new(&scene, &sim, detections, cfg, sim.seed) {
        Ok(ex) => ex,
        Err(e) => {
            log::error!("autonomy disabled: {e}");
            let _ = feed.send(AutonomyFeed::Finished);
            return;
        }
    };
    let mut held = [false; 2];
    let mut live: [Option<JointConfig>; 2] = [None, None];
    let mut estopped = false;
    let mut sent = 0;
    for req in requests {
        match req {
            AutonomyRequest::Advance => {}
            AutonomyRequest::Pause(arm) => {
                held[arm.index()] = true;
                ex.pause();
                publish(&ex, &status);
                continue;
            }
            AutonomyRequest::Resume(arm, q) => {
                held[arm.index()] = false;
                if let Some(q) = q {
                    live[arm.index()] = Some(config(&q));
                }
                if held.iter().any(|h| *h) || estopped {
                    continue;
                }
                ex.resume_all(std::mem::take(&mut live));
            }
            AutonomyRequest::Estop => {
                estopped = true;
                ex.pause();
                publish(&ex, &status);
                continue;
            }
        }
        if estopped || ex.state() == HarvestState::Paused {
            continue;
        }
        let t0 = ex.clock();
        // stages without motion (target selection, perception) run back to back
        while !ex.state().is_terminal() && ex.state() != HarvestState::Paused && ex.log().motions.len() == sent {
            ex.step();
        }
        let segments: Vec<Segment> = ex.log().motions[sent..]
            .iter()
            .map(|m| Segment {
                arm: m.arm,
                start: m.start - t0,
                speed: m.joint_speed,
                waypoints: m.waypoints.iter().map(joints).collect(),
            })
            .collect();
        sent = ex.log().motions.len();
        publish(&ex, &status);
        let done = ex.state().is_terminal();
        let ok = feed.send(AutonomyFeed::Batch(segments)).is_ok()
            && feed.send(AutonomyFeed::Attached(ex.holding())).is_ok()
            && (!done || feed.send(AutonomyFeed::Finished).is_ok());
        if !ok {
            break;
        }
    }
}

fn publish(ex: &Executive, status: &Mutex<AutonomyStatus>) {
    let log = ex.log();
    let mut s = status.lock().expect("status lock");
    s.state = ex.state();
    s.clock = ex.clock();
    s.outcome = ex.state().is_terminal().then_some(log.outcome);
    s.motions = log.motions.len();
    for arm in ArmId::BOTH {
        if let Some(m) = log.motions.iter().rev().find(|m| m.arm == arm) {
            s.last_motion_start[arm.index()] = m.waypoints.first().map(joints);
        }
    }
}
