use std::f64::consts::FRAC_PI_2;

use nalgebra::DVector;
use proptest::prelude::*;
use vader_core::collision::{in_collision, CollisionBody};
use vader_core::geometry::{Rotation, RigidTransform, Vec3};
use vader_core::kinematics::{JointConfig, KinematicChain};
use vader_core::planning::{
    motion_cost, plan_cartesian, plan_rrt_star, CartesianConfig, DivisionWall, PlannerConfig, PlanningScene, Trajectory,
    WallSpec,
};

fn q(v: &[f64]) -> JointConfig {
    DVector::from_column_slice(v)
}

fn planar2() -> KinematicChain {
    KinematicChain::from_json(
        r#"{"joints":[{"axis":[0,0,1],"origin":{},"limits":[-3,3]},
                      {"axis":[0,0,1],"origin":{"t":[0.5,0,0]},"limits":[-3,3]}],
            "ee_offset":{"t":[0.5,0,0]},"link_radii":[0.02,0.02,0.02],"margin":0.0}"#,
    )
    .unwrap()
}

/// Independent re-check: every state at `resolution` against every body, no scene helpers.
fn dense_clear(chain: &KinematicChain, t: &Trajectory, bodies: &[CollisionBody], resolution: f64) -> bool {
    t.waypoints.windows(2).all(|w| {
        let n = ((&w[1] - &w[0]).amax() / resolution).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let s = k as f64 / n as f64;
            let qs = &w[0] + (&w[1] - &w[0]) * s;
            !in_collision(&chain.link_bodies(&qs), bodies)
        })
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A box behind the base blocks the short way round, so the arm must swing the long way
/// across the front.
fn wrap_around_scene() -> (PlanningScene, JointConfig, JointConfig) {
    let blocker = CollisionBody::aabb(Vec3::new(-0.75, 0.0, 0.0), Vec3::new(0.2, 0.1, 0.5));
    (PlanningScene::new(vec![blocker]), q(&[-2.5, 0.3]), q(&[2.5, 0.3]))
}

#[test]
fn task_weight_shortens_wrap_around_paths() {
    let chain = planar2();
    let (scene, start, goal) = wrap_around_scene();
    let lengths = |lambda: f64| -> Vec<f64> {
        (0..20)
            .map(|seed| {
                let cfg = PlannerConfig {
                    lambda_fk: lambda,
                    seed,
                    time_budget_s: 60.0,
                    ..PlannerConfig::default()
                };
                let t = plan_rrt_star(&scene, &chain, &start, &goal, &cfg).unwrap();
                assert!(dense_clear(&chain, &t, &scene.all_bodies(), cfg.delta_check / 10.0));
                t.task_length(&chain)
            })
            .collect()
    };
    let (m0, m1) = (median(lengths(0.0)), median(lengths(1.0)));
    assert!(m1 <= m0, "median task length {m1} with the task term vs {m0} without");
}

#[test]
fn arm_paths_survive_a_dense_recheck() {
    let chain = KinematicChain::default_arm().with_base(RigidTransform::new(
        Rotation::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2),
        Vec3::new(-0.25, 0.0, 0.0),
    ));
    let bodies = vec![
        CollisionBody::aabb(Vec3::new(-0.3, 0.45, 0.08), Vec3::new(0.05, 0.05, 0.08)),
        CollisionBody::aabb(Vec3::new(0.0, 0.0, -0.15), Vec3::new(1.0, 1.0, 0.05)),
    ];
    let scene = PlanningScene::new(bodies.clone());
    let start = q(&[-0.6, -0.4, 0.0, 0.8, 0.0, 1.2, 0.0]);
    let goal = q(&[0.7, -0.2, 0.1, 1.1, 0.0, 1.3, 0.2]);
    assert!(scene.config_valid(&chain, &start) && scene.config_valid(&chain, &goal));
    for seed in 0..5 {
        let cfg = PlannerConfig {
            seed,
            time_budget_s: 60.0,
            ..PlannerConfig::default()
        };
        let t = plan_rrt_star(&scene, &chain, &start, &goal, &cfg).unwrap();
        assert_eq!(t.start(), &start);
        assert_eq!(t.end(), &goal);
        assert!(dense_clear(&chain, &t, &bodies, cfg.delta_check / 10.0), "seed {seed}");
        for w in t.waypoints.windows(2) {
            assert!((&w[1] - &w[0]).norm() <= cfg.step + 1e-9);
        }
    }
}

#[test]
fn wall_with_a_gap_is_passed_through_the_gap() {
    let chain = planar2();
    let half = 0.01;
    // wall along y = 0 from just past the elbow's reach, open between x = 0.6 and x = 0.8
    let bodies = vec![
        CollisionBody::aabb(Vec3::new(0.565, 0.0, 0.0), Vec3::new(0.035, half, 0.5)),
        CollisionBody::aabb(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.2, half, 0.5)),
    ];
    let scene = PlanningScene::new(bodies.clone());
    let start = q(&[-0.9, 1.2]);
    let goal = q(&[0.9, -1.2]);
    let side = |p: &Vec3| p.y.signum();
    let (ps, pg) = (
        chain.forward_kinematics(&start).translation,
        chain.forward_kinematics(&goal).translation,
    );
    assert!(side(&ps) != side(&pg));
    for seed in 0..5 {
        let cfg = PlannerConfig {
            seed,
            time_budget_s: 60.0,
            ..PlannerConfig::default()
        };
        let t = plan_rrt_star(&scene, &chain, &start, &goal, &cfg).unwrap();
        assert!(dense_clear(&chain, &t, &bodies, cfg.delta_check / 10.0));
        let ee: Vec<Vec3> = t
            .densified(cfg.delta_check / 10.0)
            .iter()
            .map(|c| chain.forward_kinematics(c).translation)
            .collect();
        for w in ee.windows(2) {
            if side(&w[0]) != side(&w[1]) {
                let s = w[0].y / (w[0].y - w[1].y);
                let x = w[0].x + (w[1].x - w[0].x) * s;
                assert!(x < 0.53 || (0.6..=0.8).contains(&x), "crossed the wall at x = {x}");
            }
        }
    }
}

#[test]
fn walled_arms_stay_on_their_sides() {
    let spec = WallSpec::default();
    let mut scene = PlanningScene::new(Vec::new());
    scene.set_division_wall(0.1);
    let wall = DivisionWall::new(0.1, &spec);
    let arm = |x: f64| {
        KinematicChain::default_arm().with_base(RigidTransform::new(
            Rotation::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2),
            Vec3::new(x, 0.0, 0.0),
        ))
    };
    let cases = [
        (arm(-0.25), q(&[0.0, -0.5, 0.0, 1.0, 0.0, 1.5, 0.0]), q(&[0.5, 0.2, 0.0, 1.0, 0.0, 0.8, 0.0])),
        (arm(0.25), q(&[0.0, -0.5, 0.0, 1.0, 0.0, 1.5, 0.0]), q(&[-0.5, 0.2, 0.0, 1.0, 0.0, 0.8, 0.0])),
    ];
    for (chain, start, goal) in &cases {
        assert!(scene.config_valid(chain, start) && scene.config_valid(chain, goal));
        for seed in 0..3 {
            let cfg = PlannerConfig {
                seed,
                time_budget_s: 60.0,
                ..PlannerConfig::default()
            };
            let t = plan_rrt_star(&scene, chain, start, goal, &cfg).unwrap();
            let ee: Vec<Vec3> = t
                .densified(cfg.delta_check / 10.0)
                .iter()
                .map(|c| chain.forward_kinematics(c).translation)
                .collect();
            assert!(ee.windows(2).all(|w| !wall.crossed_by(&w[0], &w[1], &spec)));
        }
    }
}

#[test]
fn straight_advance_is_stepped_and_monotone() {
    let chain = KinematicChain::default_arm();
    let scene = PlanningScene::new(Vec::new());
    let start = q(&[0.0, -0.5, 0.0, 1.0, 0.0, 1.5, 0.0]);
    let from = chain.forward_kinematics(&start);
    let dir = from.rotation * Vec3::z();
    let target = RigidTransform::new(from.rotation, from.translation + dir * 0.1);
    let cfg = CartesianConfig::default();
    let t = plan_cartesian(&scene, &chain, &start, &target, &cfg).unwrap();
    assert!(t.waypoints.len() >= 21);
    let mut last = -1.0;
    for w in &t.waypoints {
        let p = chain.forward_kinematics(w).translation;
        let along = (p - from.translation).dot(&dir);
        let lateral = ((p - from.translation) - dir * along).norm();
        assert!(along > last);
        assert!(lateral <= cfg.lateral_tol);
        last = along;
    }
    for w in t.waypoints.windows(2) {
        let a = chain.forward_kinematics(&w[0]).translation;
        let b = chain.forward_kinematics(&w[1]).translation;
        assert!((b - a).norm() <= cfg.max_step + 1e-3);
        assert!((&w[1] - &w[0]).amax() <= cfg.max_joint_jump);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn motion_cost_is_a_weighted_sum(
        a in prop::collection::vec(-3.0f64..3.0, 2),
        b in prop::collection::vec(-3.0f64..3.0, 2),
        l1 in 0.0f64..5.0,
        dl in 0.0f64..5.0,
    ) {
        let c = planar2();
        let (qa, qb) = (q(&a), q(&b));
        let joint = (&qa - &qb).norm();
        prop_assert_eq!(motion_cost(&c, &qa, &qb, 0.0), joint);
        let v = motion_cost(&c, &qa, &qb, l1);
        prop_assert!(v >= 0.0);
        prop_assert!((v - motion_cost(&c, &qb, &qa, l1)).abs() < 1e-12);
        prop_assert!(motion_cost(&c, &qa, &qb, l1 + dl) >= v);
        prop_assert_eq!(motion_cost(&c, &qa, &qa, l1), 0.0);
    }
}
