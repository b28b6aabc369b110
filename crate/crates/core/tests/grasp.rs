use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vader_core::collision::CollisionBody;
use vader_core::geometry::{rotation_to_vector, Rotation, RigidTransform, Vec3};
use vader_core::grasp::{
    generate_candidates, generate_candidates_with, select_grasp, GraspCandidate, GraspCircle, GraspPolicy, Tool,
};
use vader_core::kinematics::{inverse_kinematics, IkConfig, JointConfig, KinematicChain};
use vader_core::planning::PlanningScene;

fn arm() -> KinematicChain {
    KinematicChain::default_arm().with_base(RigidTransform::new(
        Rotation::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2),
        Vec3::zeros(),
    ))
}

fn seed_config() -> JointConfig {
    DVector::from_column_slice(&[0.0, -0.5, 0.0, 1.0, 0.0, 1.5, 0.0])
}

fn facing_base(circle: &GraspCircle, theta: f64, base: &Vec3) -> bool {
    (circle.point(theta) - circle.center).dot(&(base - circle.center)) > 0.0
}

#[test]
fn candidate_points_lie_on_the_circle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let center = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
        let Ok(circle) = GraspCircle::new(center, axis, rng.random_range(0.02..0.2)) else {
            continue;
        };
        let cands = generate_candidates_with(&circle, 16, Tool::Gripper, |_, _| None);
        assert_eq!(cands.len(), 16);
        for c in &cands {
            let v = c.pose.translation - circle.center;
            assert!((v.norm() - circle.radius).abs() < 1e-9);
            assert!(v.dot(&circle.axis).abs() < 1e-9);
        }
    }
}

#[test]
fn reachable_fruit_has_a_feasible_candidate_facing_the_arm() {
    let chain = arm();
    let base = chain.base.translation;
    let free = PlanningScene::new(Vec::new());
    let ik = IkConfig::default();
    let circle = GraspCircle::new(Vec3::new(0.0, 0.45, 0.35), Vec3::z(), 0.075).unwrap();

    // exhaustive oracle over a fine grid
    let fine = generate_candidates(&circle, 360, Tool::Gripper, &chain, &free, &seed_config(), &ik);
    let facing_feasible = fine.iter().filter(|c| c.feasible && facing_base(&circle, c.theta, &base)).count();
    assert!(facing_feasible > 0, "the oracle finds no feasible facing candidate");

    let coarse = generate_candidates(&circle, 16, Tool::Gripper, &chain, &free, &seed_config(), &ik);
    for (i, c) in coarse.iter().enumerate() {
        assert_eq!(c.index, i);
        assert!((c.theta - TAU * i as f64 / 16.0).abs() < 1e-15);
    }
    assert!(coarse.iter().any(|c| c.feasible && facing_base(&circle, c.theta, &base)));

    let chosen = select_grasp(&coarse, &seed_config(), GraspPolicy::ClosestConfig).unwrap();
    let reached = chain.forward_kinematics(chosen.ik.as_ref().unwrap());
    let (dt, dr) = reached.distance_to(&chosen.pose);
    assert!(dt <= ik.pos_tol && dr <= ik.rot_tol, "{dt} {dr}");
}

#[test]
fn enclosed_fruit_has_no_feasible_candidate() {
    let chain = arm();
    let center = Vec3::new(0.0, 0.45, 0.35);
    let scene = PlanningScene::new(vec![CollisionBody::aabb(center, Vec3::repeat(0.2))]);
    let circle = GraspCircle::new(center, Vec3::z(), 0.075).unwrap();
    let cands = generate_candidates(&circle, 16, Tool::Gripper, &chain, &scene, &seed_config(), &IkConfig::default());
    assert!(cands.iter().all(|c| !c.feasible));
    assert!(select_grasp(&cands, &seed_config(), GraspPolicy::ClosestConfig).is_err());
}

fn brute_force_closest(cands: &[GraspCandidate], q: &JointConfig) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in cands {
        if !c.feasible {
            continue;
        }
        let ik = c.ik.as_ref().unwrap();
        let mut d = 0.0;
        for k in 0..q.len() {
            d += (ik[k] - q[k]) * (ik[k] - q[k]);
        }
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((c.index, d));
        }
    }
    best.map(|(i, _)| i)
}

#[test]
fn closest_config_matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let circle = GraspCircle::new(
            Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(0.3..0.6), rng.random_range(0.2..0.5)),
            Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 1.0),
            rng.random_range(0.05..0.1),
        )
        .unwrap();
        let dof = 7;
        let table: Vec<Option<JointConfig>> = (0..16)
            .map(|_| {
                rng.random_bool(0.6)
                    .then(|| DVector::from_fn(dof, |_, _| rng.random_range(-3.0..3.0)))
            })
            .collect();
        let q = DVector::from_fn(dof, |_, _| rng.random_range(-3.0..3.0));
        let cands = generate_candidates_with(&circle, 16, Tool::Gripper, |i, _| table[i].clone());
        let chosen = select_grasp(&cands, &q, GraspPolicy::ClosestConfig).ok().map(|c| c.index);
        assert_eq!(chosen, brute_force_closest(&cands, &q));
        let first = select_grasp(&cands, &q, GraspPolicy::FirstFeasible).ok().map(|c| c.index);
        assert_eq!(first, table.iter().position(Option::is_some));
    }
}

/// Stand-in IK that always succeeds: the pose's coordinates in the arm base frame.
fn pose_coordinates(base: &RigidTransform, pose: &RigidTransform) -> JointConfig {
    let local = base.inverse().compose(pose);
    let r = rotation_to_vector(&local.rotation);
    DVector::from_column_slice(&[local.translation.x, local.translation.y, local.translation.z, r.x, r.y, r.z])
}

#[test]
fn selection_moves_with_the_scene() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = RigidTransform::from_translation(Vec3::new(-0.25, 0.0, 0.0));
    let current = RigidTransform::new(
        Rotation::from_axis_angle(&Vec3::y_axis(), 0.3),
        Vec3::new(-0.3, 0.2, 0.4),
    );
    for _ in 0..20 {
        // rigid motions that keep the vertical, since the circle basis is built from world up
        let g = RigidTransform::new(
            Rotation::from_axis_angle(&Vec3::z_axis(), rng.random_range(-3.0..3.0)),
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)),
        );
        let axis = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 1.0);
        let center = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(0.3..0.6), rng.random_range(0.2..0.5));
        let pick = |g: &RigidTransform| {
            let circle = GraspCircle::new(g.transform_point(&center), g.transform_vector(&axis), 0.07).unwrap();
            let b = g.compose(&base);
            let q = pose_coordinates(&b, &g.compose(&current));
            let cands = generate_candidates_with(&circle, 16, Tool::Gripper, |_, pose| Some(pose_coordinates(&b, pose)));
            select_grasp(&cands, &q, GraspPolicy::ClosestConfig).unwrap().clone()
        };
        let plain = pick(&RigidTransform::identity());
        let moved = pick(&g);
        assert_eq!(plain.index, moved.index);
        let expected = g.compose(&plain.pose);
        let (dt, dr) = expected.distance_to(&moved.pose);
        assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
    }
}

#[test]
fn candidates_are_deterministic_with_per_index_seeds() {
    let chain = arm();
    let free = PlanningScene::new(Vec::new());
    let circle = GraspCircle::new(Vec3::new(0.1, 0.45, 0.3), Vec3::z(), 0.075).unwrap();
    let a = generate_candidates(&circle, 16, Tool::Cutter, &chain, &free, &seed_config(), &IkConfig::default());
    let b = generate_candidates(&circle, 16, Tool::Cutter, &chain, &free, &seed_config(), &IkConfig::default());
    assert_eq!(a, b);
    for c in a.iter().filter(|c| c.feasible) {
        let q = c.ik.as_ref().unwrap();
        let direct = inverse_kinematics(&chain, &c.pose, &seed_config(), &IkConfig { seed: IkConfig::default().seed + c.index as u64, ..IkConfig::default() }).unwrap();
        assert_eq!(q, &direct);
    }
}
