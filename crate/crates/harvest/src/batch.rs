//! Seeded batch of randomized harvest trials and post-hoc safety checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vader_core::collision::in_collision;
use vader_core::kinematics::{JointConfig, KinematicChain};
use vader_core::planning::{DivisionWall, Trajectory};

use crate::executive::{detect, run_harvest, ExecConfig, FailureReason, HarvestLog, MotionRecord, Outcome};
use crate::sim::{randomize_pepper, NoiseModel, PepperTruth, SimScene};
use crate::world::{ArmId, HarvestScene};
use crate::HarvestError;

/// Success rate of the original simulation study, reported next to ours for reference.
pub const REFERENCE_SUCCESS_RATE: f64 = 0.923;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub trials: usize,
    /// Trial `i` uses seed `base_seed + i`.
    pub base_seed: u64,
    /// Half-width of the horizontal band around the workspace center (m).
    pub center_band: f64,
    pub histogram_bins: usize,
    pub exec: ExecConfig,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            base_seed: 0,
            center_band: 0.10,
            histogram_bins: 11,
            exec: ExecConfig::default(),
        }
    }
}

/// One randomized pepper in an otherwise empty scene.
pub fn make_trial(scene: &HarvestScene, seed: u64) -> SimScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SimScene {
        peppers: vec![randomize_pepper(&scene.workspace, &mut rng)],
        foliage: Vec::new(),
        workspace: scene.workspace,
        seed,
    }
}

/// An upright pepper at the workspace center; shape still drawn from `seed`.
pub fn make_ideal_trial(scene: &HarvestScene, seed: u64) -> SimScene {
    let mut sim = make_trial(scene, seed);
    let shape = sim.peppers[0]
        .shape
        .with_pose(&vader_core::geometry::RigidTransform::from_translation(scene.workspace_center()));
    sim.peppers[0] = PepperTruth::new(shape);
    sim
}

pub fn run_trial(scene: &HarvestScene, sim: &SimScene, cfg: &ExecConfig) -> Result<HarvestLog, HarvestError> {
    let detections = detect(sim, &cfg.noise, sim.seed);
    run_harvest(scene, sim, detections, cfg)
}

/// Zero-noise run on [`make_ideal_trial`].
pub fn run_ideal_trial(scene: &HarvestScene, cfg: &ExecConfig, seed: u64) -> Result<HarvestLog, HarvestError> {
    let cfg = ExecConfig {
        noise: NoiseModel::zero(),
        ..*cfg
    };
    run_trial(scene, &make_ideal_trial(scene, seed), &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub x: f64,
    pub outcome: Outcome,
    pub failure: Option<FailureReason>,
    pub total_time: f64,
    pub in_center_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub x_min: f64,
    pub x_max: f64,
    pub trials: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
}

impl BandStats {
    fn of<'a>(it: impl Iterator<Item = &'a TrialSummary>) -> Self {
        let (mut trials, mut successes) = (0, 0);
        for t in it {
            trials += 1;
            successes += usize::from(t.outcome == Outcome::Done);
        }
        Self {
            trials,
            successes,
            rate: if trials > 0 { successes as f64 / trials as f64 } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub schema: u32,
    pub config: BatchConfig,
    pub success_rate: f64,
    pub reference_success_rate: f64,
    pub failures: BTreeMap<FailureReason, usize>,
    pub center_band: BandStats,
    pub outside_band: BandStats,
    pub histogram: Vec<HistogramBin>,
    /// Mean simulated seconds per stage over successful trials.
    pub mean_stage_times: BTreeMap<String, f64>,
    pub mean_cycle_time: Option<f64>,
    pub trials: Vec<TrialSummary>,
}

impl BatchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Success-vs-x histogram as CSV.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("x_min,x_max,trials,successes,rate\n");
        for b in &self.histogram {
            let rate = if b.trials > 0 { b.successes as f64 / b.trials as f64 } else { 0.0 };
            let _ = writeln!(s, "{:.4},{:.4},{},{},{:.4}", b.x_min, b.x_max, b.trials, b.successes, rate);
        }
        s
    }
}

/// Runs every trial (logs are kept, motions included) and summarizes them.
pub fn run_batch_with_logs(scene: &HarvestScene, cfg: &BatchConfig) -> Result<(BatchReport, Vec<HarvestLog>), HarvestError> {
    let seeds: Vec<u64> = (0..cfg.trials as u64).map(|i| cfg.base_seed.wrapping_add(i)).collect();
    let runs: Vec<(SimScene, HarvestLog)> = seeds
        .par_iter()
        .map(|&seed| {
            let sim = make_trial(scene, seed);
            let log = run_trial(scene, &sim, &cfg.exec)?;
            log::info!("trial {seed}: {:?} {:?}", log.outcome, log.failure);
            Ok((sim, log))
        })
        .collect::<Result<_, HarvestError>>()?;
    let center = scene.workspace_center().x;
    let trials: Vec<TrialSummary> = runs
        .iter()
        .map(|(sim, log)| {
            let x = sim.peppers[0].center().x;
            TrialSummary {
                seed: sim.seed,
                x,
                outcome: log.outcome,
                failure: log.failure,
                total_time: log.total_time,
                in_center_band: (x - center).abs() <= cfg.center_band,
            }
        })
        .collect();
    let logs: Vec<HarvestLog> = runs.into_iter().map(|(_, l)| l).collect();

    let mut failures = BTreeMap::new();
    for t in &trials {
        if let Some(f) = t.failure {
            *failures.entry(f).or_insert(0) += 1;
        }
    }
    let bins = cfg.histogram_bins.max(1);
    let (lo, hi) = (scene.workspace.min.x, scene.workspace.max.x);
    let width = (hi - lo) / bins as f64;
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            x_min: lo + i as f64 * width,
            x_max: lo + (i + 1) as f64 * width,
            trials: 0,
            successes: 0,
        })
        .collect();
    for t in &trials {
        let i = (((t.x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        histogram[i].trials += 1;
        histogram[i].successes += usize::from(t.outcome == Outcome::Done);
    }

    let done: Vec<&HarvestLog> = logs.iter().filter(|l| l.outcome == Outcome::Done).collect();
    let mut mean_stage_times = BTreeMap::new();
    for l in &done {
        for s in &l.stages {
            *mean_stage_times.entry(s.stage.clone()).or_insert(0.0) += s.seconds / done.len() as f64;
        }
    }
    let mean_cycle_time = (!done.is_empty()).then(|| done.iter().map(|l| l.total_time).sum::<f64>() / done.len() as f64);
    let all = BandStats::of(trials.iter());
    let report = BatchReport {
        schema: 1,
        config: *cfg,
        success_rate: all.rate,
        reference_success_rate: REFERENCE_SUCCESS_RATE,
        failures,
        center_band: BandStats::of(trials.iter().filter(|t| t.in_center_band)),
        outside_band: BandStats::of(trials.iter().filter(|t| !t.in_center_band)),
        histogram,
        mean_stage_times,
        mean_cycle_time,
        trials,
    };
    Ok((report, logs))
}

pub fn run_batch(scene: &HarvestScene, cfg: &BatchConfig) -> Result<BatchReport, HarvestError> {
    run_batch_with_logs(scene, cfg).map(|(r, _)| r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Sampled tool-path steps that pass through the wall face.
    pub wall_crossings: usize,
    /// Time samples at which the two arms' bodies overlap.
    pub arm_collisions: usize,
    pub samples: usize,
    /// Motions executed with the wall in place.
    pub walled_motions: usize,
}

struct Timeline {
    home: JointConfig,
    motions: Vec<(f64, f64, Trajectory)>,
    speed: f64,
}

impl Timeline {
    fn new(home: &JointConfig, records: &[&MotionRecord]) -> Self {
        let speed = records.first().map_or(1.0, |r| r.joint_speed);
        Self {
            home: home.clone(),
            motions: records
                .iter()
                .map(|r| {
                    let t = Trajectory {
                        waypoints: r.waypoints.clone(),
                        cost: 0.0,
                        stats: Default::default(),
                    };
                    (r.start, r.end(), t)
                })
                .collect(),
            speed,
        }
    }

    fn at(&self, t: f64) -> JointConfig {
        match self.motions.iter().rev().find(|(s, _, _)| *s <= t) {
            None => self.home.clone(),
            Some((s, e, traj)) if t < *e => traj.state_at(t - s, self.speed),
            Some((_, _, traj)) => traj.end().clone(),
        }
    }
}

fn bare(chain: &KinematicChain) -> KinematicChain {
    KinematicChain {
        margin: 0.0,
        ..chain.clone()
    }
}

/// Re-checks a finished run: tool paths of walled motions against the wall face (sampled at
/// `resolution` rad), and both arms' un-inflated bodies against each other every `dt` seconds.
pub fn verify_safety(scene: &HarvestScene, log: &HarvestLog, resolution: f64, dt: f64) -> Result<SafetyReport, HarvestError> {
    let chains = scene.chains()?;
    let mut report = SafetyReport::default();
    for m in &log.motions {
        let Some(x) = m.wall else { continue };
        report.walled_motions += 1;
        let wall = DivisionWall::new(x, &scene.wall);
        let chain = &chains[m.arm.index()];
        let traj = Trajectory {
            waypoints: m.waypoints.clone(),
            cost: 0.0,
            stats: Default::default(),
        };
        let ee: Vec<_> = traj
            .densified(resolution)
            .iter()
            .map(|q| chain.forward_kinematics(q).translation)
            .collect();
        report.wall_crossings += ee.windows(2).filter(|w| wall.crossed_by(&w[0], &w[1], &scene.wall)).count();
    }
    let lines: Vec<Timeline> = ArmId::BOTH
        .iter()
        .map(|&arm| {
            let recs: Vec<&MotionRecord> = log.motions.iter().filter(|m| m.arm == arm).collect();
            Timeline::new(scene.home(arm), &recs)
        })
        .collect();
    let bodies = [bare(&chains[0]), bare(&chains[1])];
    let end = log.motions.iter().map(MotionRecord::end).fold(0.0, f64::max);
    let steps = (end / dt).ceil() as usize;
    for k in 0..=steps {
        let t = (k as f64 * dt).min(end);
        let a = bodies[0].link_bodies(&lines[0].at(t));
        let b = bodies[1].link_bodies(&lines[1].at(t));
        report.samples += 1;
        report.arm_collisions += usize::from(in_collision(&a, &b));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trials_are_seeded() {
        let scene = HarvestScene::default_cell();
        assert_eq!(make_trial(&scene, 4), make_trial(&scene, 4));
        assert_ne!(make_trial(&scene, 4), make_trial(&scene, 5));
        let ideal = make_ideal_trial(&scene, 4);
        assert!((ideal.peppers[0].center() - scene.workspace_center()).norm() < 1e-12);
        assert!(ideal.peppers[0].tilt() < 1e-12);
    }

    #[test]
    fn timeline_holds_between_motions() {
        let q = |v: f64| JointConfig::from_element(2, v);
        let rec = MotionRecord {
            arm: ArmId::Gripper,
            start: 1.0,
            joint_speed: 1.0,
            waypoints: vec![q(0.0), q(1.0)],
            wall: None,
        };
        let line = Timeline::new(&q(-1.0), &[&rec]);
        assert_eq!(line.at(0.5), q(-1.0));
        assert!((line.at(1.5)[0] - 0.5).abs() < 1e-12);
        assert_eq!(line.at(5.0), q(1.0));
    }
}
