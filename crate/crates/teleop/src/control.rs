//! Fixed-rate control core: per-arm arbitration, command smoothing and autonomy playback.
//!
//! Everything here is driven by explicit timestamps so the loop is testable without threads.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vader_harvest::ArmId;

use crate::protocol::{TeleopMessage, DOF};

pub type Joints = [f64; DOF];
pub type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlLoopConfig {
    pub rate_hz: f64,
    /// Expected operator command rate; informational, the loop accepts any rate.
    pub command_rate_hz: f64,
    /// Largest change of any joint in one tick (rad).
    pub max_step: f64,
    /// Operator commands older than this are ignored.
    pub stale_timeout_ms: u64,
}

impl Default for ControlLoopConfig {
    fn default() -> Self {
        Self {
            rate_hz: 100.0,
            command_rate_hz: 40.0,
            max_step: 0.02,
            stale_timeout_ms: 250,
        }
    }
}

impl ControlLoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err("rate_hz must be positive".into());
        }
        if !(self.max_step.is_finite() && self.max_step > 0.0) {
            return Err("max_step must be positive".into());
        }
        if !(self.command_rate_hz.is_finite() && self.command_rate_hz > 0.0) {
            return Err("command_rate_hz must be positive".into());
        }
        Ok(())
    }

    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.rate_hz)
    }
}

/// Moves each joint toward `target` by at most `max_step`, landing exactly on it when close.
pub fn step_toward(q: &mut Joints, target: &Joints, max_step: f64) -> bool {
    for (v, t) in q.iter_mut().zip(target) {
        let d = t - *v;
        if d.abs() <= max_step {
            *v = *t;
        } else {
            *v += max_step.copysign(d);
        }
    }
    q == target
}

/// Who drives an arm on a given tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Autonomy,
    Operator(ConnId),
    /// Held in place: after an e-stop or when the operator's connection dropped.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Takeover { arm: ArmId, conn: ConnId },
    Release { arm: ArmId, conn: ConnId },
    Estop,
    Disconnected(ConnId),
}

/// Latest operator command for an arm (single-slot mailbox, last writer wins).
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub conn: ConnId,
    pub q: Joints,
    pub received_us: u64,
}

/// One planned motion of the autonomous executive.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub arm: ArmId,
    /// Start time relative to the batch the segment arrived in (s).
    pub start: f64,
    /// Joint speed limit along the segment (rad/s, max-norm).
    pub speed: f64,
    pub waypoints: Vec<Joints>,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).abs()).fold(0.0, f64::max))
            .sum::<f64>()
            / self.speed
    }
}

/// Messages from the autonomy driver to the control loop.
#[derive(Debug, Clone, PartialEq)]
pub enum AutonomyFeed {
    Batch(Vec<Segment>),
    Attached(bool),
    /// The executive reached a terminal state.
    Finished,
}

/// Requests from the control loop to the autonomy driver.
#[derive(Debug, Clone, PartialEq)]
pub enum AutonomyRequest {
    /// Playback caught up; run the next stage.
    Advance,
    Pause(ArmId),
    /// Replan from this configuration, or from the executive's own one when `None`.
    Resume(ArmId, Option<Joints>),
    Estop,
}

#[derive(Debug, Clone)]
struct Playing {
    start: f64,
    speed: f64,
    waypoints: VecDeque<Joints>,
}

#[derive(Debug, Clone)]
struct ArmSlot {
    q: Joints,
    source: Source,
    pending_takeover: Option<ConnId>,
    queue: VecDeque<Playing>,
}

impl ArmSlot {
    /// Playing a motion that has started, so a takeover has to wait for the next waypoint.
    fn mid_waypoint(&self, now: f64) -> bool {
        self.queue.front().is_some_and(|p| p.start <= now && !p.waypoints.is_empty())
    }
}

/// Output of one tick.
#[derive(Debug, Default)]
pub struct TickOutput {
    pub states: Vec<TeleopMessage>,
    pub replies: Vec<(ConnId, TeleopMessage)>,
    pub requests: Vec<AutonomyRequest>,
    /// Source that moved each arm on this tick.
    pub sources: [Option<Source>; 2],
}

pub struct ControlCore {
    cfg: ControlLoopConfig,
    arms: [ArmSlot; 2],
    estop: bool,
    attached: bool,
    seq: u64,
    /// Playback clock of autonomous segments (s).
    auto_time: f64,
    awaiting: bool,
    autonomy_done: bool,
}

impl ControlCore {
    /// `autonomy` false means no executive is attached and idle arms just hold.
    pub fn new(cfg: ControlLoopConfig, initial: [Joints; 2], autonomy: bool) -> Self {
        let slot = |q| ArmSlot {
            q,
            source: Source::Autonomy,
            pending_takeover: None,
            queue: VecDeque::new(),
        };
        Self {
            cfg,
            arms: [slot(initial[0]), slot(initial[1])],
            estop: false,
            attached: false,
            seq: 0,
            auto_time: 0.0,
            awaiting: false,
            autonomy_done: !autonomy,
        }
    }

    pub fn q(&self, arm: ArmId) -> &Joints {
        &self.arms[arm.index()].q
    }

    pub fn source(&self, arm: ArmId) -> Source {
        self.arms[arm.index()].source
    }

    pub fn estopped(&self) -> bool {
        self.estop
    }

    pub fn autonomy_idle(&self) -> bool {
        self.arms.iter().all(|a| a.queue.is_empty())
    }

    pub fn feed(&mut self, msg: AutonomyFeed) {
        match msg {
            AutonomyFeed::Batch(segments) => {
                self.awaiting = false;
                if self.estop {
                    return;
                }
                // a batch never overlaps motion still queued from the previous one
                let t0 = self
                    .arms
                    .iter()
                    .flat_map(|a| a.queue.iter().map(|p| p.start + playing_duration(p)))
                    .fold(self.auto_time, f64::max);
                for s in segments {
                    let slot = &mut self.arms[s.arm.index()];
                    if slot.source != Source::Autonomy {
                        continue;
                    }
                    slot.queue.push_back(Playing {
                        start: t0 + s.start,
                        speed: s.speed,
                        waypoints: s.waypoints.into(),
                    });
                }
            }
            AutonomyFeed::Attached(a) => self.attached = a,
            AutonomyFeed::Finished => {
                self.awaiting = false;
                self.autonomy_done = true;
            }
        }
    }

    fn take_control(&mut self, arm: ArmId, conn: ConnId) {
        let slot = &mut self.arms[arm.index()];
        slot.source = Source::Operator(conn);
        slot.pending_takeover = None;
        slot.queue.clear();
    }

    fn handle(&mut self, ev: Event, out: &mut TickOutput) {
        match ev {
            Event::Takeover { arm, conn } => {
                let now = self.auto_time;
                let slot = &mut self.arms[arm.index()];
                if self.estop {
                    out.replies.push((conn, error("e-stop is latched")));
                    return;
                }
                match slot.source {
                    Source::Operator(c) if c == conn => {}
                    Source::Operator(_) => out.replies.push((conn, error(format!("{arm} is held by another operator")))),
                    Source::Autonomy if slot.pending_takeover.is_some_and(|c| c != conn) => {
                        out.replies.push((conn, error(format!("{arm} is held by another operator"))))
                    }
                    Source::Autonomy => {
                        out.requests.push(AutonomyRequest::Pause(arm));
                        if slot.mid_waypoint(now) {
                            slot.pending_takeover = Some(conn);
                        } else {
                            self.take_control(arm, conn);
                        }
                    }
                    Source::Frozen => self.take_control(arm, conn),
                }
            }
            Event::Release { arm, conn } => {
                let slot = &mut self.arms[arm.index()];
                if slot.pending_takeover == Some(conn) {
                    slot.pending_takeover = None;
                    out.requests.push(AutonomyRequest::Resume(arm, None));
                } else if slot.source == Source::Operator(conn) {
                    slot.source = Source::Autonomy;
                    out.requests.push(AutonomyRequest::Resume(arm, Some(slot.q)));
                } else {
                    out.replies.push((conn, error(format!("{arm} is not held by this connection"))));
                }
            }
            Event::Estop => {
                if !self.estop {
                    self.estop = true;
                    for slot in &mut self.arms {
                        slot.source = Source::Frozen;
                        slot.pending_takeover = None;
                        slot.queue.clear();
                    }
                    out.requests.push(AutonomyRequest::Estop);
                }
            }
            Event::Disconnected(conn) => {
                for arm in ArmId::BOTH {
                    let slot = &mut self.arms[arm.index()];
                    if slot.source == Source::Operator(conn) {
                        slot.source = Source::Frozen;
                    }
                    if slot.pending_takeover == Some(conn) {
                        slot.pending_takeover = None;
                        out.requests.push(AutonomyRequest::Resume(arm, None));
                    }
                }
            }
        }
    }

    /// One control tick at server time `now_us`.
    pub fn tick(&mut self, now_us: u64, events: Vec<Event>, commands: [Option<&Command>; 2]) -> TickOutput {
        let mut out = TickOutput::default();
        for ev in events {
            self.handle(ev, &mut out);
        }
        let dt = 1.0 / self.cfg.rate_hz;
        let stale_us = self.cfg.stale_timeout_ms * 1000;
        for arm in ArmId::BOTH {
            let i = arm.index();
            let max_step = self.cfg.max_step;
            let now = self.auto_time;
            let slot = &mut self.arms[i];
            match slot.source {
                Source::Autonomy => {
                    let mut boundary = !slot.mid_waypoint(now);
                    if let Some(p) = slot.queue.front_mut().filter(|p| p.start <= now) {
                        while p.waypoints.len() > 1 && p.waypoints.front() == Some(&slot.q) {
                            p.waypoints.pop_front();
                            boundary = true;
                        }
                        let handing_over = boundary && slot.pending_takeover.is_some();
                        if let Some(w) = p.waypoints.front().filter(|_| !handing_over) {
                            if step_toward(&mut slot.q, w, max_step.min(p.speed * dt)) {
                                p.waypoints.pop_front();
                                boundary = true;
                            }
                            out.sources[i] = Some(Source::Autonomy);
                        }
                        if p.waypoints.is_empty() {
                            slot.queue.pop_front();
                        }
                    }
                    if let Some(conn) = slot.pending_takeover.filter(|_| boundary) {
                        self.take_control(arm, conn);
                    }
                }
                Source::Operator(conn) => {
                    let fresh = commands[i].filter(|c| c.conn == conn && now_us.saturating_sub(c.received_us) <= stale_us);
                    if let Some(c) = fresh {
                        step_toward(&mut slot.q, &c.q, max_step);
                        out.sources[i] = Some(Source::Operator(conn));
                    }
                }
                Source::Frozen => {}
            }
        }
        if !self.estop {
            self.auto_time += dt;
            if !self.awaiting && !self.autonomy_done && self.autonomy_idle() {
                self.awaiting = true;
                out.requests.push(AutonomyRequest::Advance);
            }
        }
        for arm in ArmId::BOTH {
            self.seq += 1;
            out.states.push(TeleopMessage::StateUpdate {
                arm,
                q: self.arms[arm.index()].q,
                attached: arm == ArmId::Gripper && self.attached,
                seq: self.seq,
                t_server_us: now_us,
            });
        }
        out
    }
}

fn playing_duration(p: &Playing) -> f64 {
    Segment {
        arm: ArmId::Gripper,
        start: 0.0,
        speed: p.speed,
        waypoints: p.waypoints.iter().copied().collect(),
    }
    .duration()
}

fn error(message: impl Into<String>) -> TeleopMessage {
    TeleopMessage::Error { message: message.into() }
}
