//! Harvest state machine coordinating the gripper and cutter arms.

use nalgebra::Rotation3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::Cell;

use serde::{Deserialize, Serialize};
use vader_core::collision::{in_collision, CollisionBody};
use vader_core::error::PlanError;
use vader_core::geometry::{PointCloud, RigidTransform, Vec3};
use vader_core::grasp::{generate_candidates, select_grasp, GraspConfig, GraspPolicy, Tool};
use vader_core::kinematics::{inverse_kinematics, IkConfig, JointConfig, KinematicChain};
use vader_core::planning::{
    plan_cartesian, plan_rrt_star, CartesianConfig, PlannerConfig, PlanningScene, Trajectory,
};
use vader_core::pose::{coarse_pose, final_pose, fit_superellipsoid, FitConfig, PoseEstimate, Stage};
use vader_core::superellipsoid::Superellipsoid;

use crate::sim::{blade_segment, render_partial_cloud, NoiseModel, PepperAttachment, PepperTruth, SimScene};
use crate::world::{look_along, ArmId, HarvestScene};
use crate::HarvestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    CutterOffset,
    StorageTimeout,
    GraspFailure,
    PoseOutOfWorkspace,
    NoFeasibleGrasp,
    PlanningFailure,
}

impl FailureReason {
    pub const ALL: [FailureReason; 6] = [
        FailureReason::CutterOffset,
        FailureReason::StorageTimeout,
        FailureReason::GraspFailure,
        FailureReason::PoseOutOfWorkspace,
        FailureReason::NoFeasibleGrasp,
        FailureReason::PlanningFailure,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "reason")]
pub enum HarvestState {
    Home,
    MoveToPreGrasp,
    FinePoseAcquisition,
    MoveToGrasp,
    GraspAndCut,
    Retract,
    MoveToStorage,
    Done,
    /// Operator has taken over an arm; autonomy resumes where it stopped.
    Paused,
    Failed(FailureReason),
}

impl HarvestState {
    pub fn all() -> Vec<HarvestState> {
        let mut v = vec![
            HarvestState::Home,
            HarvestState::MoveToPreGrasp,
            HarvestState::FinePoseAcquisition,
            HarvestState::MoveToGrasp,
            HarvestState::GraspAndCut,
            HarvestState::Retract,
            HarvestState::MoveToStorage,
            HarvestState::Done,
            HarvestState::Paused,
        ];
        v.extend(FailureReason::ALL.map(HarvestState::Failed));
        v
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, HarvestState::Done | HarvestState::Failed(_))
    }

    /// Stage that follows on success.
    pub fn next(&self) -> Option<HarvestState> {
        use HarvestState::*;
        Some(match self {
            Home => MoveToPreGrasp,
            MoveToPreGrasp => FinePoseAcquisition,
            FinePoseAcquisition => MoveToGrasp,
            MoveToGrasp => GraspAndCut,
            GraspAndCut => Retract,
            Retract => MoveToStorage,
            MoveToStorage => Done,
            Done | Paused | Failed(_) => return None,
        })
    }

    pub fn can_transition(&self, to: &HarvestState) -> bool {
        use HarvestState::*;
        match (self, to) {
            (Done | Failed(_), _) => false,
            (Paused, Paused) => false,
            (Paused, s) => !s.is_terminal() || matches!(s, Failed(_)),
            (_, Paused) => true,
            (_, Failed(_)) => true,
            (from, to) => from.next() == Some(*to),
        }
    }

    pub fn name(&self) -> &'static str {
        use HarvestState::*;
        match self {
            Home => "home",
            MoveToPreGrasp => "move_to_pre_grasp",
            FinePoseAcquisition => "fine_pose_acquisition",
            MoveToGrasp => "move_to_grasp",
            GraspAndCut => "grasp_and_cut",
            Retract => "retract",
            MoveToStorage => "move_to_storage",
            Done => "done",
            Paused => "paused",
            Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub detected: Vec<PoseEstimate>,
    pub reachable: Vec<usize>,
    pub chosen: usize,
}

/// Keeps reachable detections and picks the one nearest the workspace center, lower index on ties.
pub fn select_target<F>(detections: &[PoseEstimate], center: &Vec3, reachable: F) -> Option<TargetSelection>
where
    F: Fn(&PoseEstimate) -> bool,
{
    let ok: Vec<usize> = (0..detections.len()).filter(|&i| reachable(&detections[i])).collect();
    let chosen = ok.iter().copied().min_by(|&a, &b| {
        let da = (detections[a].center() - center).norm();
        let db = (detections[b].center() - center).norm();
        da.total_cmp(&db).then(a.cmp(&b))
    })?;
    Some(TargetSelection {
        detected: detections.to_vec(),
        reachable: ok,
        chosen,
    })
}

/// Horizontal unit vector from the fruit toward `arm`'s standoff.
pub fn approach_direction(arm: ArmId, yaw: f64) -> Vec3 {
    Vec3::new(arm.side() * yaw.sin(), -yaw.cos(), 0.0)
}

/// Standoff poses for perception: `standoff` from the fruit along each arm's approach
/// direction, cutter raised by `vertical`; both look at the fruit center.
pub fn pregrasp_poses(
    center: &Vec3,
    scene: &HarvestScene,
    standoff: f64,
    vertical: f64,
) -> (RigidTransform, RigidTransform) {
    let pose = |arm: ArmId, lift: f64| {
        let p = center + approach_direction(arm, scene.arm(arm).approach_yaw) * standoff + Vec3::z() * lift;
        look_along(p, center - p)
    };
    (pose(ArmId::Gripper, 0.0), pose(ArmId::Cutter, vertical))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingModel {
    /// Execution speed of the fastest-moving joint (rad/s).
    pub joint_speed: f64,
    pub rrt_overhead_s: f64,
    pub rrt_s_per_iteration: f64,
    pub cartesian_s: f64,
    pub perception_s: f64,
    pub grasp_s: f64,
    pub cut_s: f64,
    pub release_s: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            joint_speed: 0.8,
            rrt_overhead_s: 0.2,
            rrt_s_per_iteration: 0.001,
            cartesian_s: 0.3,
            perception_s: 1.5,
            grasp_s: 1.0,
            cut_s: 0.8,
            release_s: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecConfig {
    pub planner: PlannerConfig,
    pub cartesian: CartesianConfig,
    pub ik: IkConfig,
    pub grasp: GraspConfig,
    pub fit: FitConfig,
    pub noise: NoiseModel,
    pub timing: TimingModel,
    /// Overlap planning of one arm with execution of the other.
    pub parallel: bool,
    /// RRT* tries per query before the stage fails.
    pub plan_attempts: usize,
    pub standoff: f64,
    /// Cutter pre-grasp height above the gripper's.
    pub cutter_vertical_offset: f64,
    /// Planning budget (s) of the storage move; `None` uses the planner budget.
    pub storage_budget_s: Option<f64>,
    pub cut_tolerance: f64,
    pub blade_half_length: f64,
    /// Largest tool-to-fruit-center offset that still grasps.
    pub grasp_tolerance: f64,
    /// Fine estimates farther than this outside the workspace box are rejected.
    pub workspace_margin: f64,
    /// Surface samples per rendered view.
    pub render_samples: usize,
    /// Fallback cross-section radius for coarse detections without a shape.
    pub nominal_radius: f64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            cartesian: CartesianConfig::default(),
            ik: IkConfig::default(),
            grasp: GraspConfig::default(),
            fit: FitConfig::default(),
            noise: NoiseModel::default(),
            timing: TimingModel::default(),
            parallel: true,
            plan_attempts: 2,
            standoff: 0.20,
            cutter_vertical_offset: 0.05,
            storage_budget_s: None,
            cut_tolerance: PepperAttachment::DEFAULT_THRESHOLD,
            blade_half_length: 0.015,
            grasp_tolerance: 0.02,
            workspace_margin: 0.03,
            render_samples: 700,
            nominal_radius: 0.045,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Plan,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub arm: ArmId,
    pub kind: IntervalKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub intervals: Vec<Interval>,
    pub start: f64,
    pub end: f64,
}

/// Simulated-clock schedule of two plan/execute pairs.
///
/// Parallel: B plans while A executes; B executes as soon as it is planned when
/// `concurrent` (wall set or disjoint sweeps), else after A finishes.
/// Sequential: plan A, execute A, plan B, execute B. `exec_b = None` means B's plan failed.
pub fn schedule(
    t0: f64,
    arms: (ArmId, ArmId),
    a: (f64, f64),
    b: (f64, Option<f64>),
    parallel: bool,
    concurrent: bool,
) -> ScheduleTrace {
    let (pa, ea) = a;
    let (pb, eb) = b;
    let iv = |arm, kind, start: f64, len: f64| Interval {
        arm,
        kind,
        start,
        end: start + len,
    };
    let a_exec = t0 + pa;
    let a_end = a_exec + ea;
    let b_plan = if parallel { a_exec } else { a_end };
    let mut intervals = vec![
        iv(arms.0, IntervalKind::Plan, t0, pa),
        iv(arms.0, IntervalKind::Execute, a_exec, ea),
        iv(arms.1, IntervalKind::Plan, b_plan, pb),
    ];
    let mut end = a_end.max(b_plan + pb);
    if let Some(eb) = eb {
        let ready = b_plan + pb;
        let start = if parallel && concurrent { ready } else { ready.max(a_end) };
        intervals.push(iv(arms.1, IntervalKind::Execute, start, eb));
        end = end.max(start + eb);
    }
    ScheduleTrace {
        intervals,
        start: t0,
        end,
    }
}

/// One executed trajectory on the simulated clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub arm: ArmId,
    pub start: f64,
    pub joint_speed: f64,
    pub waypoints: Vec<JointConfig>,
    /// Division wall x position while this motion ran.
    pub wall: Option<f64>,
}

impl MotionRecord {
    pub fn duration(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (&w[1] - &w[0]).amax() / self.joint_speed)
            .sum()
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration()
    }

    pub fn state_at(&self, t: f64) -> JointConfig {
        let traj = Trajectory {
            waypoints: self.waypoints.clone(),
            cost: 0.0,
            stats: Default::default(),
        };
        traj.state_at(t - self.start, self.joint_speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestLog {
    pub seed: u64,
    pub outcome: Outcome,
    pub failure: Option<FailureReason>,
    pub failure_detail: Option<String>,
    pub stages: Vec<StageTime>,
    pub total_time: f64,
    pub target: Option<usize>,
    pub truth_center: Option<Vec3>,
    pub fine_center: Option<Vec3>,
    pub detached: bool,
    pub stored: bool,
    pub cut_miss_distance: Option<f64>,
    pub states: Vec<HarvestState>,
    pub schedules: Vec<ScheduleTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub motions: Vec<MotionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
struct StageFailure {
    reason: FailureReason,
    detail: String,
}

fn fail(reason: FailureReason, detail: impl Into<String>) -> StageFailure {
    StageFailure {
        reason,
        detail: detail.into(),
    }
}

/// Host timing is left out so logs stay reproducible.
fn plan_detail(e: &PlanError) -> String {
    match e {
        PlanError::NoPathFound { iterations, .. } => format!("no path found within {iterations} iterations"),
        e => e.to_string(),
    }
}

fn plan_failure(e: PlanError) -> StageFailure {
    fail(FailureReason::PlanningFailure, plan_detail(&e))
}

/// A planned motion and its simulated planning time.
#[derive(Debug, Clone)]
pub struct Planned {
    pub waypoints: Vec<JointConfig>,
    pub plan_time: f64,
}

impl Planned {
    fn push(&mut self, t: &Trajectory) {
        let skip = usize::from(!self.waypoints.is_empty());
        self.waypoints.extend(t.waypoints.iter().skip(skip).cloned());
    }

    fn of(t: &Trajectory) -> Self {
        Self {
            waypoints: t.waypoints.clone(),
            plan_time: 0.0,
        }
    }

    fn end(&self) -> &JointConfig {
        self.waypoints.last().expect("planned motion has waypoints")
    }
}

/// Inputs a planning callback sees: its arm's chain and start, and the scene with the other
/// arm already added as obstacles.
pub struct PlanContext<'a> {
    pub arm: ArmId,
    pub chain: &'a KinematicChain,
    pub start: &'a JointConfig,
    pub scene: PlanningScene,
    pub timing: &'a TimingModel,
    pub seed: u64,
    /// RRT* tries per query.
    pub attempts: usize,
    spent: Cell<f64>,
}

impl PlanContext<'_> {
    /// RRT* with up to `attempts` differently seeded tries; every try is charged to the clock.
    pub fn rrt(&self, goal: &JointConfig, cfg: &PlannerConfig, from: &JointConfig) -> Result<Trajectory, PlanError> {
        // the budget is simulated time, so results do not depend on the host's speed
        let affordable = ((cfg.time_budget_s - self.timing.rrt_overhead_s) / self.timing.rrt_s_per_iteration).floor();
        let mut last = None;
        for k in 0..self.attempts.max(1) {
            let cfg = PlannerConfig {
                seed: splitmix(self.seed.wrapping_add(k as u64)),
                max_iterations: cfg.max_iterations.min(affordable.max(0.0) as usize),
                time_budget_s: f64::MAX,
                ..*cfg
            };
            let r = plan_rrt_star(&self.scene, self.chain, from, goal, &cfg);
            let iterations = match &r {
                Ok(t) => t.stats.iterations,
                Err(PlanError::NoPathFound { iterations, .. }) => *iterations,
                Err(_) => 0,
            };
            self.charge(self.timing.rrt_overhead_s + iterations as f64 * self.timing.rrt_s_per_iteration);
            match r {
                Err(PlanError::NoPathFound { iterations, .. }) if iterations > 0 => last = Some(r),
                _ => return r,
            }
        }
        last.expect("at least one attempt")
    }

    pub fn cartesian(&self, from: &JointConfig, target: &RigidTransform, cfg: &CartesianConfig) -> Result<Trajectory, PlanError> {
        self.charge(self.timing.cartesian_s);
        plan_cartesian(&self.scene, self.chain, from, target, cfg)
    }

    fn charge(&self, t: f64) {
        self.spent.set(self.spent.get() + t);
    }

    /// Simulated planning time used so far, failed attempts included.
    pub fn spent(&self) -> f64 {
        self.spent.get()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Collision-free IK solution closest to `seed_q` over `attempts` differently seeded solves.
pub fn collision_free_ik(
    chain: &KinematicChain,
    scene: &PlanningScene,
    target: &RigidTransform,
    seed_q: &JointConfig,
    ik: &IkConfig,
    attempts: u64,
) -> Option<JointConfig> {
    (0..attempts)
        .filter_map(|k| {
            let cfg = IkConfig {
                seed: ik.seed.wrapping_add(k * 7919),
                ..*ik
            };
            let mut q = inverse_kinematics(chain, target, seed_q, &cfg).ok()?;
            chain.wrap_toward(&mut q, seed_q);
            scene.config_valid(chain, &q).then_some(q)
        })
        .min_by(|a, b| (a - seed_q).norm().total_cmp(&(b - seed_q).norm()))
}

/// Whether two motions could never touch, whatever their relative timing.
pub fn sweeps_disjoint(
    ca: &KinematicChain,
    a: &[JointConfig],
    cb: &KinematicChain,
    b: &[JointConfig],
    resolution: f64,
) -> bool {
    let dense = |w: &[JointConfig]| {
        Trajectory {
            waypoints: w.to_vec(),
            cost: 0.0,
            stats: Default::default(),
        }
        .densified(resolution)
    };
    let ba: Vec<Vec<CollisionBody>> = dense(a).iter().map(|q| ca.link_bodies(q)).collect();
    let bb: Vec<Vec<CollisionBody>> = dense(b).iter().map(|q| cb.link_bodies(q)).collect();
    ba.iter().all(|x| bb.iter().all(|y| !in_collision(x, y)))
}

/// Everything the executive holds between stages.
pub struct Executive<'a> {
    pub scene: &'a HarvestScene,
    pub cfg: ExecConfig,
    chains: [KinematicChain; 2],
    sim: &'a SimScene,
    detections: Vec<PoseEstimate>,
    rng: ChaCha8Rng,
    seed: u64,
    plan_counter: u64,
    q: [JointConfig; 2],
    clock: f64,
    stage_start: f64,
    state: HarvestState,
    paused_from: Option<HarvestState>,
    wall: Option<f64>,
    target: Option<usize>,
    fine: Option<(PoseEstimate, Superellipsoid)>,
    approach: [Option<RigidTransform>; 2],
    attachment: PepperAttachment,
    /// Fruit pose in the gripper tool frame once grasped.
    held: Option<RigidTransform>,
    log: HarvestLog,
}

impl<'a> Executive<'a> {
    pub fn new(
        scene: &'a HarvestScene,
        sim: &'a SimScene,
        detections: Vec<PoseEstimate>,
        cfg: ExecConfig,
        seed: u64,
    ) -> Result<Self, HarvestError> {
        scene.validate()?;
        cfg.noise.validate()?;
        let chains = scene.chains()?;
        let q = [scene.home(ArmId::Gripper).clone(), scene.home(ArmId::Cutter).clone()];
        Ok(Self {
            scene,
            chains,
            sim,
            detections,
            rng: ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xa11ce)),
            seed,
            plan_counter: 0,
            q,
            clock: 0.0,
            stage_start: 0.0,
            state: HarvestState::Home,
            paused_from: None,
            wall: None,
            target: None,
            fine: None,
            approach: [None, None],
            attachment: PepperAttachment::new(cfg.cut_tolerance),
            held: None,
            cfg,
            log: HarvestLog {
                seed,
                outcome: Outcome::Failed,
                failure: None,
                failure_detail: None,
                stages: Vec::new(),
                total_time: 0.0,
                target: None,
                truth_center: None,
                fine_center: None,
                detached: false,
                stored: false,
                cut_miss_distance: None,
                states: vec![HarvestState::Home],
                schedules: Vec::new(),
                motions: Vec::new(),
            },
        })
    }

    pub fn state(&self) -> HarvestState {
        self.state
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn config(&self, arm: ArmId) -> &JointConfig {
        &self.q[arm.index()]
    }

    pub fn chain(&self, arm: ArmId) -> &KinematicChain {
        &self.chains[arm.index()]
    }

    pub fn log(&self) -> &HarvestLog {
        &self.log
    }

    /// Whether the gripper currently carries a detached fruit.
    pub fn holding(&self) -> bool {
        self.held.is_some()
    }

    fn transition(&mut self, to: HarvestState) {
        debug_assert!(self.state.can_transition(&to), "{:?} -> {:?}", self.state, to);
        self.state = to;
        self.log.states.push(to);
    }

    /// Operator takeover: autonomy stops at the current stage boundary.
    pub fn pause(&mut self) {
        if !self.state.is_terminal() && self.state != HarvestState::Paused {
            self.paused_from = Some(self.state);
            self.transition(HarvestState::Paused);
        }
    }

    /// Operator release: the stage restarts and plans from the arm's live configuration.
    pub fn resume(&mut self, arm: ArmId, live: JointConfig) {
        let mut both = [None, None];
        both[arm.index()] = Some(live);
        self.resume_all(both);
    }

    /// Release of several arms at once; `None` keeps the executive's own configuration.
    pub fn resume_all(&mut self, live: [Option<JointConfig>; 2]) {
        if let Some(s) = self.paused_from.take() {
            for (q, l) in self.q.iter_mut().zip(live) {
                if let Some(l) = l {
                    *q = l;
                }
            }
            self.transition(s);
        }
    }

    fn next_seed(&mut self) -> u64 {
        self.plan_counter += 1;
        splitmix(self.seed.wrapping_mul(1_000_003).wrapping_add(self.plan_counter))
    }

    fn planning_scene(&self) -> PlanningScene {
        let mut s = self.scene.planning_scene();
        s.bodies.extend_from_slice(&self.sim.foliage);
        if let Some(x) = self.wall {
            s.set_division_wall(x);
        }
        s
    }

    fn scene_with(&self, other: ArmId, q_other: &JointConfig) -> PlanningScene {
        self.planning_scene()
            .with_obstacles(&self.chains[other.index()].link_bodies(q_other))
    }

    fn record(&mut self, arm: ArmId, start: f64, waypoints: Vec<JointConfig>) {
        self.log.motions.push(MotionRecord {
            arm,
            start,
            joint_speed: self.cfg.timing.joint_speed,
            waypoints,
            wall: self.wall,
        });
    }

    fn exec_time(&self, p: &Planned) -> f64 {
        p.waypoints
            .windows(2)
            .map(|w| (&w[1] - &w[0]).amax() / self.cfg.timing.joint_speed)
            .sum()
    }

    /// Plans A against B's current state, then B against A's target while A executes.
    pub fn parallel_plan_execute<FA, FB, E>(&mut self, a: ArmId, plan_a: FA, plan_b: FB) -> Result<ScheduleTrace, E>
    where
        FA: FnOnce(&PlanContext) -> Result<Planned, E>,
        FB: FnOnce(&PlanContext) -> Result<Planned, E>,
    {
        let b = a.other();
        let t0 = self.clock;
        let seed_a = self.next_seed();
        let seed_b = self.next_seed();
        let timing = self.cfg.timing;
        let ctx_a = PlanContext {
            arm: a,
            chain: &self.chains[a.index()],
            start: &self.q[a.index()],
            scene: self.scene_with(b, &self.q[b.index()]),
            timing: &timing,
            seed: seed_a,
            attempts: self.cfg.plan_attempts,
            spent: Cell::new(0.0),
        };
        let pa = match plan_a(&ctx_a) {
            Ok(p) => Planned {
                plan_time: ctx_a.spent(),
                ..p
            },
            Err(e) => {
                self.clock += ctx_a.spent();
                return Err(e);
            }
        };
        let ea = self.exec_time(&pa);
        let ctx_b = PlanContext {
            arm: b,
            chain: &self.chains[b.index()],
            start: &self.q[b.index()],
            scene: self.scene_with(a, pa.end()),
            timing: &timing,
            seed: seed_b,
            attempts: self.cfg.plan_attempts,
            spent: Cell::new(0.0),
        };
        let pb = plan_b(&ctx_b);
        let pb_time = ctx_b.spent();
        let eb = pb.as_ref().ok().map(|p| self.exec_time(p));
        let concurrent = pb.as_ref().is_ok_and(|p| {
            self.wall.is_some()
                || sweeps_disjoint(
                    &self.chains[a.index()],
                    &pa.waypoints,
                    &self.chains[b.index()],
                    &p.waypoints,
                    0.05,
                )
        });
        let trace = schedule(t0, (a, b), (pa.plan_time, ea), (pb_time, eb), self.cfg.parallel, concurrent);
        let a_exec = trace.intervals[1].start;
        self.record(a, a_exec, pa.waypoints.clone());
        self.q[a.index()] = pa.end().clone();
        self.clock = trace.end;
        self.log.schedules.push(trace.clone());
        let pb = pb?;
        let b_exec = trace.intervals[3].start;
        self.q[b.index()] = pb.end().clone();
        self.record(b, b_exec, pb.waypoints);
        Ok(trace)
    }

    /// Plans and executes a single arm motion.
    fn single_motion<F>(&mut self, arm: ArmId, plan: F) -> Result<(), StageFailure>
    where
        F: FnOnce(&PlanContext) -> Result<Planned, StageFailure>,
    {
        let seed = self.next_seed();
        let timing = self.cfg.timing;
        let ctx = PlanContext {
            arm,
            chain: &self.chains[arm.index()],
            start: &self.q[arm.index()],
            scene: self.scene_with(arm.other(), &self.q[arm.other().index()]),
            timing: &timing,
            seed,
            attempts: self.cfg.plan_attempts,
            spent: Cell::new(0.0),
        };
        let p = plan(&ctx);
        let plan_time = ctx.spent();
        let p = match p {
            Ok(p) => p,
            Err(e) => {
                self.clock += plan_time;
                return Err(e);
            }
        };
        let start = self.clock + plan_time;
        self.log.schedules.push(ScheduleTrace {
            intervals: vec![
                Interval {
                    arm,
                    kind: IntervalKind::Plan,
                    start: self.clock,
                    end: start,
                },
                Interval {
                    arm,
                    kind: IntervalKind::Execute,
                    start,
                    end: start + self.exec_time(&p),
                },
            ],
            start: self.clock,
            end: start + self.exec_time(&p),
        });
        self.clock = start + self.exec_time(&p);
        self.q[arm.index()] = p.end().clone();
        self.record(arm, start, p.waypoints);
        Ok(())
    }

    fn truth(&self) -> Option<&PepperTruth> {
        self.target.and_then(|i| self.sim.peppers.get(i))
    }

    /// IK reachability of the gripper circle and the cutter circle around `pose`.
    pub fn reachable(&self, pose: &PoseEstimate) -> bool {
        let (a, b, c) = match &pose.shape {
            Some(s) => (s.a, s.b, s.c),
            None => (self.cfg.nominal_radius, self.cfg.nominal_radius, self.cfg.nominal_radius),
        };
        let scene = self.planning_scene();
        let n = self.cfg.grasp.candidates;
        let ok = |circle: Result<_, _>, arm: ArmId, tool: Tool| {
            circle.is_ok_and(|circle| {
                let s = scene.with_obstacles(&self.chains[arm.other().index()].link_bodies(&self.q[arm.other().index()]));
                generate_candidates(&circle, n, tool, &self.chains[arm.index()], &s, &self.q[arm.index()], &self.cfg.ik)
                    .iter()
                    .any(|c| c.feasible)
            })
        };
        let t = &pose.transform;
        ok(self.cfg.grasp.gripper_circle(t, a, b), ArmId::Gripper, Tool::Gripper)
            && ok(self.cfg.grasp.cutter_circle(t, c), ArmId::Cutter, Tool::Cutter)
    }

    /// Runs one stage. Terminal states are returned unchanged.
    pub fn step(&mut self) -> HarvestState {
        let result = match self.state {
            HarvestState::Home => self.stage_home(),
            HarvestState::MoveToPreGrasp => self.stage_pregrasp(),
            HarvestState::FinePoseAcquisition => self.stage_fine_pose(),
            HarvestState::MoveToGrasp => self.stage_move_to_grasp(),
            HarvestState::GraspAndCut => self.stage_grasp_and_cut(),
            HarvestState::Retract => self.stage_retract(),
            HarvestState::MoveToStorage => self.stage_storage(),
            s @ (HarvestState::Done | HarvestState::Paused | HarvestState::Failed(_)) => return s,
        };
        self.close_stage(self.state.name());
        match result {
            Ok(()) => {
                let next = self.state.next().expect("active state has a successor");
                self.transition(next);
                if next == HarvestState::Done {
                    self.log.outcome = Outcome::Done;
                }
            }
            Err(f) => {
                log::info!("trial {} failed: {:?} ({})", self.seed, f.reason, f.detail);
                self.abort();
                self.close_stage("abort");
                self.log.failure = Some(f.reason);
                self.log.failure_detail = Some(f.detail);
                self.transition(HarvestState::Failed(f.reason));
            }
        }
        self.log.total_time = self.clock;
        self.state
    }

    fn close_stage(&mut self, name: &str) {
        self.log.stages.push(StageTime {
            stage: name.to_string(),
            seconds: self.clock - self.stage_start,
        });
        self.stage_start = self.clock;
    }

    /// Runs until `Done` or `Failed`, then returns the log.
    pub fn run(mut self) -> HarvestLog {
        while !self.state.is_terminal() && self.state != HarvestState::Paused {
            self.step();
        }
        self.log
    }

    pub fn into_log(self) -> HarvestLog {
        self.log
    }

    fn stage_home(&mut self) -> Result<(), StageFailure> {
        let center = self.scene.workspace_center();
        let sel = select_target(&self.detections, &center, |d| self.reachable(d))
            .ok_or_else(|| fail(FailureReason::NoFeasibleGrasp, "no reachable detection"))?;
        self.target = Some(sel.chosen);
        self.log.target = Some(sel.chosen);
        self.log.truth_center = self.truth().map(|t| t.center());
        Ok(())
    }

    fn stage_pregrasp(&mut self) -> Result<(), StageFailure> {
        let target = self.detections[self.target.expect("target selected")].center();
        self.wall = Some(target.x);
        let (g_pose, c_pose) = pregrasp_poses(&target, self.scene, self.cfg.standoff, self.cfg.cutter_vertical_offset);
        let cfg = self.cfg;
        let goal = |ctx: &PlanContext, pose: &RigidTransform| {
            collision_free_ik(ctx.chain, &ctx.scene, pose, ctx.start, &cfg.ik, 4)
                .ok_or_else(|| fail(FailureReason::PlanningFailure, format!("{} pre-grasp has no IK", ctx.arm)))
        };
        let rrt = |ctx: &PlanContext, pose: &RigidTransform| -> Result<Planned, StageFailure> {
            let q_goal = goal(ctx, pose)?;
            let t = ctx.rrt(&q_goal, &cfg.planner, ctx.start).map_err(plan_failure)?;
            Ok(Planned::of(&t))
        };
        self.parallel_plan_execute(ArmId::Gripper, |c| rrt(c, &g_pose), |c| rrt(c, &c_pose))?;
        Ok(())
    }

    fn camera(&self, arm: ArmId) -> RigidTransform {
        self.chains[arm.index()]
            .forward_kinematics(&self.q[arm.index()])
            .compose(&self.scene.arm(arm).camera_offset)
    }

    fn stage_fine_pose(&mut self) -> Result<(), StageFailure> {
        let pose_fail = |d: String| fail(FailureReason::PoseOutOfWorkspace, d);
        self.clock += self.cfg.timing.perception_s;
        let truth = *self.truth().ok_or_else(|| pose_fail("no ground truth for target".into()))?;
        let mut fruit = PointCloud::new("world", Vec::new());
        let mut stem = PointCloud::new("world", Vec::new());
        for arm in ArmId::BOTH {
            let cam = self.camera(arm);
            if let Ok((f, s)) = render_partial_cloud(
                &truth,
                &cam,
                &self.scene.intrinsics,
                self.cfg.noise.sigma_p,
                &self.sim.foliage,
                self.cfg.render_samples,
                &mut self.rng,
            ) {
                fruit.extend(&f);
                stem.extend(&s);
            }
        }
        if fruit.len() < self.cfg.fit.min_points || stem.is_empty() {
            return Err(pose_fail(format!("{} fruit / {} stem points visible", fruit.len(), stem.len())));
        }
        let coarse = coarse_pose(&fruit, &stem).map_err(|e| pose_fail(e.to_string()))?;
        let shape = fit_superellipsoid(&fruit, &coarse, &self.cfg.fit).map_err(|e| pose_fail(e.to_string()))?;
        let mut fine = final_pose(&stem, &shape).map_err(|e| pose_fail(e.to_string()))?;

        let n = self.cfg.noise;
        let gauss = |s: f64, rng: &mut ChaCha8Rng| if s > 0.0 { Normal::new(0.0, s).expect("positive sigma").sample(rng) } else { 0.0 };
        let dt = Vec3::new(gauss(n.sigma_t_fine, &mut self.rng), gauss(n.sigma_t_fine, &mut self.rng), gauss(n.sigma_t_fine, &mut self.rng));
        let tilt = Rotation3::from_scaled_axis(Vec3::new(gauss(n.sigma_rot, &mut self.rng), gauss(n.sigma_rot, &mut self.rng), 0.0));
        fine.transform = RigidTransform::new(tilt * fine.transform.rotation, fine.transform.translation + dt);
        self.log.fine_center = Some(fine.center());
        if !self.scene.workspace.inflated(self.cfg.workspace_margin).contains(&fine.center()) {
            return Err(pose_fail("fine estimate outside the workspace".into()));
        }
        self.fine = Some((fine, shape));
        Ok(())
    }

    fn stage_move_to_grasp(&mut self) -> Result<(), StageFailure> {
        self.wall = None;
        let (fine, shape) = self.fine.expect("fine pose acquired");
        let cfg = self.cfg;
        let t = fine.transform;
        let g_circle = cfg
            .grasp
            .gripper_circle(&t, shape.a, shape.b)
            .map_err(|e| fail(FailureReason::NoFeasibleGrasp, e.to_string()))?;
        let c_circle = cfg
            .grasp
            .cutter_circle(&t, shape.c)
            .map_err(|e| fail(FailureReason::NoFeasibleGrasp, e.to_string()))?;
        let (mut g_app, mut c_app) = (None, None);
        let trace = self.parallel_plan_execute(
            ArmId::Gripper,
            |ctx| grasp_motion(ctx, &g_circle, Tool::Gripper, &cfg, &mut g_app),
            |ctx| grasp_motion(ctx, &c_circle, Tool::Cutter, &cfg, &mut c_app),
        );
        self.approach = [g_app, c_app];
        trace.map(|_| ())
    }

    fn stage_grasp_and_cut(&mut self) -> Result<(), StageFailure> {
        let truth = *self.truth().expect("target selected");
        let tool = self.chains[0].forward_kinematics(&self.q[0]);
        let offset = (truth.center() - tool.translation).norm();
        self.clock += self.cfg.timing.grasp_s;
        if offset > self.cfg.grasp_tolerance {
            return Err(fail(FailureReason::GraspFailure, format!("tool {:.1} mm from fruit center", offset * 1e3)));
        }
        self.held = Some(tool.inverse().compose(&truth.shape.pose()));
        let blade = blade_segment(&self.chains[1].forward_kinematics(&self.q[1]), self.cfg.blade_half_length);
        self.clock += self.cfg.timing.cut_s;
        let cut = self.attachment.apply_cut(&truth, &blade);
        self.log.cut_miss_distance = Some(cut.miss_distance);
        self.log.detached = !self.attachment.attached;
        if !cut.detached {
            return Err(fail(FailureReason::CutterOffset, format!("blade missed the peduncle by {:.1} mm", cut.miss_distance * 1e3)));
        }
        Ok(())
    }

    fn stage_retract(&mut self) -> Result<(), StageFailure> {
        let cfg = self.cfg;
        let [g, c] = self.approach;
        let back = |ctx: &PlanContext, pose: Option<RigidTransform>| -> Result<Planned, StageFailure> {
            let pose = pose.expect("approach pose recorded");
            let t = ctx.cartesian(ctx.start, &pose, &cfg.cartesian).map_err(plan_failure)?;
            Ok(Planned::of(&t))
        };
        self.parallel_plan_execute(ArmId::Cutter, |ctx| back(ctx, c), |ctx| back(ctx, g))?;
        Ok(())
    }

    fn stage_storage(&mut self) -> Result<(), StageFailure> {
        let cfg = self.cfg;
        let home_c = self.scene.home(ArmId::Cutter).clone();
        let storage = self.scene.storage.clone();
        let storage_cfg = PlannerConfig {
            time_budget_s: cfg.storage_budget_s.unwrap_or(cfg.planner.time_budget_s),
            ..cfg.planner
        };
        self.parallel_plan_execute(
            ArmId::Cutter,
            |ctx| {
                let t = ctx.rrt(&home_c, &cfg.planner, ctx.start).map_err(plan_failure)?;
                Ok(Planned::of(&t))
            },
            |ctx| {
                let t = ctx.rrt(&storage, &storage_cfg, ctx.start).map_err(|e| match e {
                    PlanError::NoPathFound { .. } => fail(FailureReason::StorageTimeout, plan_detail(&e)),
                    e => plan_failure(e),
                })?;
                Ok(Planned::of(&t))
            },
        )?;
        let tool = self.chains[0].forward_kinematics(&self.q[0]);
        let fruit = tool.compose(&self.held.take().expect("fruit held"));
        self.clock += cfg.timing.release_s;
        self.log.stored = self.scene.drop_volume.contains(&fruit.translation);
        if !self.log.stored {
            return Err(fail(FailureReason::StorageTimeout, "fruit released outside the bin"));
        }
        let home_g = self.scene.home(ArmId::Gripper).clone();
        self.single_motion(ArmId::Gripper, |ctx| {
            let t = ctx.rrt(&home_g, &cfg.planner, ctx.start).map_err(plan_failure)?;
            Ok(Planned::of(&t))
        })
    }

    /// Clears the wall and sends both arms home; failures here are logged, not raised.
    fn abort(&mut self) {
        self.wall = None;
        let cfg = self.cfg;
        for arm in ArmId::BOTH {
            let home = self.scene.home(arm).clone();
            if self.q[arm.index()] == home {
                continue;
            }
            let r = self.single_motion(arm, |ctx| {
                let t = ctx.rrt(&home, &cfg.planner, ctx.start).map_err(plan_failure)?;
                Ok(Planned::of(&t))
            });
            if let Err(e) = r {
                log::warn!("{arm} could not return home: {}", e.detail);
            }
        }
    }
}

/// Picks a circle candidate (closest configuration by default), moves there, then inserts
/// along the approach axis to the circle center.
fn grasp_motion(
    ctx: &PlanContext,
    circle: &vader_core::grasp::GraspCircle,
    tool: Tool,
    cfg: &ExecConfig,
    approach: &mut Option<RigidTransform>,
) -> Result<Planned, StageFailure> {
    let cands = generate_candidates(circle, cfg.grasp.candidates, tool, ctx.chain, &ctx.scene, ctx.start, &cfg.ik);
    let policy: GraspPolicy = cfg.grasp.policy;
    let mut ranked: Vec<_> = cands.iter().filter(|c| c.feasible).collect();
    if ranked.is_empty() {
        return Err(fail(FailureReason::NoFeasibleGrasp, format!("no feasible {tool:?} candidate")));
    }
    // the policy's choice first, then the rest by joint distance as fallbacks
    let first = select_grasp(&cands, ctx.start, policy).map_err(|e| fail(FailureReason::NoFeasibleGrasp, e.to_string()))?;
    ranked.sort_by(|a, b| {
        let key = |c: &&vader_core::grasp::GraspCandidate| (c.index != first.index, c.joint_distance_sq(ctx.start).unwrap_or(f64::INFINITY));
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.index.cmp(&b.index))
    });
    let mut last = None;
    for cand in ranked.iter().take(3) {
        let q_app = cand.ik.as_ref().expect("feasible candidate has IK");
        let inserted = RigidTransform::new(cand.pose.rotation, circle.center);
        let attempt = (|| {
            let t1 = ctx.rrt(q_app, &cfg.planner, ctx.start)?;
            let t2 = ctx.cartesian(q_app, &inserted, &cfg.cartesian)?;
            let mut p = Planned::of(&t1);
            p.push(&t2);
            Ok::<_, PlanError>(p)
        })();
        match attempt {
            Ok(p) => {
                *approach = Some(cand.pose);
                return Ok(p);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(plan_failure(last.expect("at least one candidate tried")))
}

/// Coarse detections: ground truth with coarse translation and tilt noise.
pub fn detect(sim: &SimScene, noise: &NoiseModel, seed: u64) -> Vec<PoseEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xdec0de));
    let gauss = |s: f64, rng: &mut ChaCha8Rng| if s > 0.0 { Normal::new(0.0, s).expect("positive sigma").sample(rng) } else { 0.0 };
    sim.peppers
        .iter()
        .map(|p| {
            let dt = Vec3::new(gauss(noise.sigma_t_coarse, &mut rng), gauss(noise.sigma_t_coarse, &mut rng), gauss(noise.sigma_t_coarse, &mut rng));
            let tilt = Rotation3::from_scaled_axis(Vec3::new(gauss(noise.sigma_rot, &mut rng), gauss(noise.sigma_rot, &mut rng), 0.0));
            let truth = p.shape.pose();
            PoseEstimate {
                transform: RigidTransform::new(tilt * truth.rotation, truth.translation + dt),
                stage: Stage::Coarse,
                shape: None,
            }
        })
        .collect()
}

/// One complete harvest attempt on the simulated cell.
pub fn run_harvest(
    scene: &HarvestScene,
    sim: &SimScene,
    detections: Vec<PoseEstimate>,
    cfg: &ExecConfig,
) -> Result<HarvestLog, HarvestError> {
    Ok(Executive::new(scene, sim, detections, *cfg, sim.seed)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose_at(p: Vec3) -> PoseEstimate {
        PoseEstimate {
            transform: RigidTransform::from_translation(p),
            stage: Stage::Coarse,
            shape: None,
        }
    }

    #[test]
    fn transition_table_is_exhaustive_and_closed() {
        use HarvestState::*;
        let all = HarvestState::all();
        for from in &all {
            for to in &all {
                let allowed = from.can_transition(to);
                let expected = match (from, to) {
                    (Done | Failed(_), _) => false,
                    (Paused, Paused) => false,
                    (Paused, Done) => false,
                    (Paused, _) => true,
                    (_, Paused | Failed(_)) => true,
                    _ => from.next() == Some(*to),
                };
                assert_eq!(allowed, expected, "{from:?} -> {to:?}");
            }
        }
        let mut s = Home;
        let mut path = vec![s];
        while let Some(n) = s.next() {
            assert!(s.can_transition(&n));
            s = n;
            path.push(s);
        }
        assert_eq!(path.len(), 8);
        assert_eq!(s, Done);
    }

    #[test]
    fn select_target_examples() {
        let c = Vec3::zeros();
        let d = [0.3, 0.05, 0.2].map(|x| pose_at(Vec3::new(x, 0.0, 0.0)));
        assert_eq!(select_target(&d, &c, |_| true).unwrap().chosen, 1);
        let far = [pose_at(Vec3::new(10.0, 0.0, 0.0))];
        assert!(select_target(&far, &c, |p| p.center().norm() < 1.0).is_none());
        assert!(select_target(&[], &c, |_| true).is_none());
        let tie = [0.1, -0.1].map(|x| pose_at(Vec3::new(x, 0.0, 0.0)));
        assert_eq!(select_target(&tie, &c, |_| true).unwrap().chosen, 0);
    }

    #[test]
    fn pregrasp_standoff_and_equivariance() {
        let scene = HarvestScene::default_cell();
        let c = scene.workspace_center();
        let (g, k) = pregrasp_poses(&c, &scene, 0.2, 0.05);
        assert!(((g.translation - c).norm() - 0.2).abs() < 1e-12);
        assert!((k.translation.z - c.z - 0.05).abs() < 1e-12);
        for p in [&g, &k] {
            let z = p.rotation * Vec3::z();
            assert!((z - (c - p.translation).normalize()).norm() < 1e-12);
        }
        assert!(g.translation.x < c.x && k.translation.x > c.x);
        let shift = Vec3::new(0.13, -0.02, 0.04);
        let (g2, k2) = pregrasp_poses(&(c + shift), &scene, 0.2, 0.05);
        assert!((g2.translation - g.translation - shift).norm() < 1e-12);
        assert!((k2.translation - k.translation - shift).norm() < 1e-12);
        assert!((g2.rotation.matrix() - g.rotation.matrix()).amax() < 1e-12);
    }

    #[test]
    fn overlap_arithmetic() {
        let arms = (ArmId::Gripper, ArmId::Cutter);
        let par = schedule(0.0, arms, (2.0, 3.0), (2.0, Some(3.0)), true, false);
        let seq = schedule(0.0, arms, (2.0, 3.0), (2.0, Some(3.0)), false, false);
        assert!(par.end <= 8.0 + 1e-12);
        assert_eq!(seq.end, 10.0);
        assert!(par.intervals[2].start <= par.intervals[1].start);
        let walled = schedule(0.0, arms, (2.0, 3.0), (2.0, Some(3.0)), true, true);
        assert_eq!(walled.end, 7.0);
        // B fails to plan: A's motion still completes
        let failed = schedule(0.0, arms, (2.0, 3.0), (0.5, None), true, false);
        assert_eq!(failed.intervals.len(), 3);
        assert_eq!(failed.end, 5.0);
    }
}
