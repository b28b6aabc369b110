//! Subcommand bodies. Each writes its artifact (with the run manifest embedded) and logs a
//! one-line summary on stderr.

use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;

use nalgebra::Matrix3;
use serde::Serialize;
use serde_json::Value;
use vader_core::cloud_io;
use vader_core::geometry::{Rotation, RigidTransform, Vec3};
use vader_core::grasp::{generate_candidates, select_grasp, Tool};
use vader_core::kinematics::JointConfig;
use vader_core::planning::plan_rrt_star;
use vader_core::pose::{coarse_pose, final_pose, fit_superellipsoid_report, FitSummary};
use vader_harvest::batch::{make_trial, run_batch, run_trial, BatchConfig};
use vader_harvest::executive::{HarvestLog, Outcome};
use vader_harvest::{ArmId, HarvestScene};
use vader_teleop::autonomy::{joints, AutonomySetup};
use vader_teleop::{ServerConfig, SimHandle, TeleopMessage};

use crate::config::Config;
use crate::{BatchArgs, CliError, FitArgs, HarvestArgs, PlanArgs, PlanGraspArgs, RunManifest, ServeArgs};

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Domain(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(CliError::domain)
        }
    }
}

/// The body as a JSON object with the manifest and config hash added.
fn artifact<T: Serialize>(manifest: &RunManifest, body: &T) -> String {
    let mut v = serde_json::to_value(body).expect("artifact serializes");
    if let Value::Object(m) = &mut v {
        m.insert("config_hash".into(), Value::String(manifest.config_hash.clone()));
        m.insert("manifest".into(), serde_json::to_value(manifest).expect("manifest serializes"));
    }
    serde_json::to_string_pretty(&v).expect("artifact serializes")
}

fn announce(manifest: &RunManifest) {
    eprintln!("{}", serde_json::json!({ "manifest": manifest }));
}

pub fn load_scene(cfg: &Config) -> Result<HarvestScene, CliError> {
    let scene = match &cfg.scene {
        None => HarvestScene::default_cell(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Domain(format!("cannot read scene {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("scene {}: {e}", p.display())))?
        }
    };
    scene.validate().map_err(CliError::domain)?;
    Ok(scene)
}

fn parse_joints(s: &str, dof: usize) -> Result<JointConfig, CliError> {
    let v: Result<Vec<f64>, _> = s.split(',').map(|x| x.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if v.len() == dof && v.iter().all(|x| x.is_finite()) => Ok(JointConfig::from_vec(v)),
        Ok(v) => Err(CliError::Usage(format!("expected {dof} finite joint angles, got {}", v.len()))),
        Err(e) => Err(CliError::Usage(format!("bad joint list `{s}`: {e}"))),
    }
}

#[derive(Serialize)]
struct FitOutput {
    fit: FitSummary,
    coarse_center: [f64; 3],
    iterations: usize,
    initial_cost: f64,
    final_cost: f64,
}

pub fn fit(cfg: &Config, a: &FitArgs) -> Result<(), CliError> {
    let manifest = RunManifest::new("fit", None, cfg);
    announce(&manifest);
    let fruit = cloud_io::load(&a.fruit, "camera").map_err(CliError::domain)?;
    let stem = cloud_io::load(&a.peduncle, "camera").map_err(CliError::domain)?;
    let coarse = coarse_pose(&fruit, &stem).map_err(|e| CliError::Domain(format!("{e} ({e:?})")))?;
    let rep = fit_superellipsoid_report(&fruit, &coarse, &cfg.exec.fit).map_err(|e| CliError::Domain(format!("{e} ({e:?})")))?;
    let fine = final_pose(&stem, &rep.shape).map_err(|e| CliError::Domain(format!("{e} ({e:?})")))?;
    let out = FitOutput {
        fit: FitSummary::new(&rep.shape, &fine),
        coarse_center: coarse.center().into(),
        iterations: rep.iterations,
        initial_cost: rep.initial_cost,
        final_cost: rep.final_cost,
    };
    log::info!("fit: {} iterations, cost {:.3e}", rep.iterations, rep.final_cost);
    write_output(a.out.as_deref(), &artifact(&manifest, &out))
}

pub fn plan_grasp(cfg: &Config, a: &PlanGraspArgs) -> Result<(), CliError> {
    let manifest = RunManifest::new("plan-grasp", None, cfg);
    announce(&manifest);
    let text = std::fs::read_to_string(&a.fit).map_err(|e| CliError::Domain(format!("cannot read {}: {e}", a.fit.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(CliError::domain)?;
    let s: FitSummary = serde_json::from_value(v.get("fit").cloned().unwrap_or(v)).map_err(CliError::domain)?;
    let pose = RigidTransform::new(Rotation::from_matrix(&Matrix3::from_row_slice(&s.r)), Vec3::from(s.t));
    let scene = load_scene(cfg)?;
    let arm: ArmId = a.arm.into();
    let chain = scene.chain(arm).map_err(CliError::domain)?;
    let g = &cfg.exec.grasp;
    let (circle, tool) = match arm {
        ArmId::Gripper => (g.gripper_circle(&pose, s.a, s.b), Tool::Gripper),
        ArmId::Cutter => (g.cutter_circle(&pose, s.c), Tool::Cutter),
    };
    let circle = circle.map_err(CliError::domain)?;
    let home = scene.home(arm);
    let candidates = generate_candidates(&circle, g.candidates, tool, &chain, &scene.planning_scene(), home, &cfg.exec.ik);
    let chosen = select_grasp(&candidates, home, g.policy).ok().cloned();
    let out = serde_json::json!({
        "arm": arm,
        "circle": circle,
        "policy": g.policy,
        "candidates": candidates,
        "chosen": chosen,
    });
    write_output(a.out.as_deref(), &artifact(&manifest, &out))?;
    match chosen {
        Some(c) => {
            log::info!("chose candidate {} of {}", c.index, candidates.len());
            Ok(())
        }
        None => Err(CliError::Domain("no feasible grasp candidate".into())),
    }
}

pub fn plan(cfg: &Config, a: &PlanArgs) -> Result<(), CliError> {
    let manifest = RunManifest::new("plan", Some(cfg.exec.planner.seed), cfg);
    announce(&manifest);
    let scene = load_scene(cfg)?;
    let arm: ArmId = a.arm.into();
    let chain = scene.chain(arm).map_err(CliError::domain)?;
    let start = match &a.start {
        Some(s) => parse_joints(s, chain.dof())?,
        None => scene.home(arm).clone(),
    };
    let goal = parse_joints(&a.goal, chain.dof())?;
    let mut ps = scene.planning_scene();
    if let Some(x) = a.wall {
        ps.set_division_wall(x);
    }
    let t = plan_rrt_star(&ps, &chain, &start, &goal, &cfg.exec.planner).map_err(CliError::domain)?;
    let out = serde_json::json!({
        "arm": arm,
        "trajectory": t,
        "joint_length": t.joint_length(),
        "task_length": t.task_length(&chain),
    });
    log::info!("plan: {} waypoints, cost {:.3}", t.waypoints.len(), t.cost);
    write_output(a.out.as_deref(), &artifact(&manifest, &out))
}

/// Arm states sampled at the control rate over the log's timeline, as teleop `state` messages.
pub fn state_events(scene: &HarvestScene, log: &HarvestLog, rate_hz: f64) -> Vec<TeleopMessage> {
    let mut carry = None;
    let mut t = 0.0;
    for s in &log.stages {
        t += s.seconds;
        match s.stage.as_str() {
            "grasp_and_cut" if log.detached => carry = Some((t, f64::INFINITY)),
            "move_to_storage" => {
                if let Some((from, _)) = carry {
                    carry = Some((from, t));
                }
            }
            _ => {}
        }
    }
    let n = (log.total_time * rate_hz).floor() as u64;
    let mut seq = 0;
    let mut out = Vec::new();
    for k in 0..=n {
        let t = k as f64 / rate_hz;
        for arm in ArmId::BOTH {
            let q = log
                .motions
                .iter()
                .rfind(|m| m.arm == arm && m.start <= t)
                .map(|m| m.state_at(t))
                .unwrap_or_else(|| scene.home(arm).clone());
            seq += 1;
            out.push(TeleopMessage::StateUpdate {
                arm,
                q: joints(&q),
                attached: arm == ArmId::Gripper && carry.is_some_and(|(a, b)| a <= t && t < b),
                seq,
                t_server_us: (t * 1e6).round() as u64,
            });
        }
    }
    out
}

pub fn harvest(cfg: &Config, a: &HarvestArgs) -> Result<(), CliError> {
    let manifest = RunManifest::new("harvest", Some(a.seed), cfg);
    announce(&manifest);
    let scene = load_scene(cfg)?;
    let sim = make_trial(&scene, a.seed);
    let log = run_trial(&scene, &sim, &cfg.exec).map_err(CliError::domain)?;
    match log.outcome {
        Outcome::Done => log::info!("harvest {}: done in {:.2} s", a.seed, log.total_time),
        Outcome::Failed => log::info!("harvest {}: failed with {:?}", a.seed, log.failure),
    }
    if let Some(p) = &a.trajectory {
        let body = serde_json::json!({ "motions": log.motions });
        write_output(Some(p), &artifact(&manifest, &body))?;
    }
    if let Some(p) = &a.events {
        let mut text = String::new();
        for m in state_events(&scene, &log, cfg.control.rate_hz) {
            text.push_str(&m.to_json());
            text.push('\n');
        }
        std::fs::write(p, text).map_err(|e| CliError::Domain(format!("cannot write {}: {e}", p.display())))?;
    }
    write_output(a.out.as_deref(), &artifact(&manifest, &log))
}

pub fn batch(cfg: &Config, a: &BatchArgs) -> Result<(), CliError> {
    let manifest = RunManifest::new("batch", Some(cfg.batch.base_seed), cfg);
    announce(&manifest);
    let scene = load_scene(cfg)?;
    let bc = BatchConfig {
        trials: cfg.batch.trials,
        base_seed: cfg.batch.base_seed,
        center_band: cfg.batch.center_band,
        histogram_bins: cfg.batch.histogram_bins,
        exec: cfg.exec,
    };
    let report = run_batch(&scene, &bc).map_err(CliError::domain)?;
    eprintln!(
        "success {:.1}% (reference {:.1}%), center band {}/{}, outside {}/{}",
        100.0 * report.success_rate,
        100.0 * report.reference_success_rate,
        report.center_band.successes,
        report.center_band.trials,
        report.outside_band.successes,
        report.outside_band.trials
    );
    if let Some(p) = &a.hist {
        let csv = format!("# config_hash={}\n{}", manifest.config_hash, report.histogram_csv());
        write_output(Some(p), &csv)?;
    }
    write_output(a.out.as_deref(), &artifact(&manifest, &report))
}

pub fn serve(cfg: &Config, a: &ServeArgs) -> Result<(), CliError> {
    let manifest = RunManifest::new("serve", a.harvest_seed, cfg);
    announce(&manifest);
    let scene = load_scene(cfg)?;
    let sim = match a.harvest_seed {
        Some(seed) => SimHandle::harvest(AutonomySetup {
            sim: make_trial(&scene, seed),
            scene,
            cfg: cfg.exec,
        }),
        None => SimHandle::idle(&scene),
    }
    .map_err(CliError::domain)?;
    let bind: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let server = vader_teleop::serve(
        ServerConfig {
            bind,
            control: cfg.control,
            static_dir: a.static_dir.clone(),
        },
        sim,
    )
    .map_err(CliError::domain)?;
    eprintln!("listening on ws://{}/ws at {} Hz", server.addr(), cfg.control.rate_hz);
    server.wait();
    Ok(())
}
