//! Grasp and cut approach poses on a circle orthogonal to the stem axis.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::in_collision;
use crate::error::{GeometryError, GraspError};
use crate::geometry::{Rotation, RigidTransform, Vec3};
use crate::kinematics::{inverse_kinematics, IkConfig, JointConfig, KinematicChain};
use crate::planning::PlanningScene;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCircle {
    pub center: Vec3,
    pub axis: Vec3,
    pub radius: f64,
    pub u1: Vec3,
    pub u2: Vec3,
}

impl GraspCircle {
    /// `u1 = normalize(a × up)`, or world x projected off `a` when `a` is vertical.
    pub fn new(center: Vec3, axis: Vec3, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0 && radius.is_finite()) || !center.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let a = axis
            .try_normalize(1e-12)
            .ok_or(GeometryError::DegenerateAxis { length: axis.norm() })?;
        let u1 = match a.cross(&Vec3::z()).try_normalize(1e-6) {
            Some(u) => u,
            None => (Vec3::x() - a * a.x).normalize(),
        };
        let u2 = a.cross(&u1);
        Ok(Self {
            center,
            axis: a,
            radius,
            u1,
            u2,
        })
    }

    pub fn point(&self, theta: f64) -> Vec3 {
        self.center + (self.u1 * theta.cos() + self.u2 * theta.sin()) * self.radius
    }

    pub fn approach(&self, theta: f64) -> Vec3 {
        (self.center - self.point(theta)).normalize()
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: &Vec3| (v.norm() - 1.0).abs() < ORTHO_TOL;
        unit(&self.axis)
            && unit(&self.u1)
            && unit(&self.u2)
            && self.u1.dot(&self.u2).abs() < ORTHO_TOL
            && self.u1.dot(&self.axis).abs() < ORTHO_TOL
            && self.u2.dot(&self.axis).abs() < ORTHO_TOL
    }

    /// The transformed circle; the basis is carried along rather than rebuilt.
    pub fn transformed(&self, tf: &RigidTransform) -> Self {
        Self {
            center: tf.transform_point(&self.center),
            axis: tf.transform_vector(&self.axis),
            radius: self.radius,
            u1: tf.transform_vector(&self.u1),
            u2: tf.transform_vector(&self.u2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    /// Closing plane contains the stem axis.
    Gripper,
    /// Blade plane is orthogonal to the stem axis.
    Cutter,
}

/// Tool pose at `theta`; the tool z axis is the radial approach direction.
pub fn candidate_pose_for(circle: &GraspCircle, theta: f64, tool: Tool) -> RigidTransform {
    let z = circle.approach(theta);
    let x = match tool {
        Tool::Gripper => circle.axis,
        Tool::Cutter => circle.axis.cross(&z).normalize(),
    };
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    RigidTransform::new(Rotation::from_matrix_unchecked(m), circle.point(theta))
}

pub fn candidate_pose(circle: &GraspCircle, theta: f64) -> RigidTransform {
    candidate_pose_for(circle, theta, Tool::Gripper)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub index: usize,
    pub theta: f64,
    pub pose: RigidTransform,
    pub ik: Option<JointConfig>,
    pub feasible: bool,
}

impl GraspCandidate {
    pub fn joint_distance_sq(&self, q: &JointConfig) -> Option<f64> {
        self.ik.as_ref().map(|ik| (ik - q).norm_squared())
    }
}

/// Evaluates `N` evenly spaced candidates with a caller-supplied feasibility solver.
/// The solver gets the candidate index and pose and returns a collision-free configuration.
pub fn generate_candidates_with<F>(circle: &GraspCircle, n: usize, tool: Tool, solve: F) -> Vec<GraspCandidate>
where
    F: Fn(usize, &RigidTransform) -> Option<JointConfig> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let theta = TAU * i as f64 / n as f64;
            let pose = candidate_pose_for(circle, theta, tool);
            let ik = solve(i, &pose);
            GraspCandidate {
                index: i,
                theta,
                feasible: ik.is_some(),
                ik,
                pose,
            }
        })
        .collect()
}

/// Candidates whose IK (seeded at `q_seed`) succeeds and whose links clear the scene.
pub fn generate_candidates(
    circle: &GraspCircle,
    n: usize,
    tool: Tool,
    chain: &KinematicChain,
    scene: &PlanningScene,
    q_seed: &JointConfig,
    ik: &IkConfig,
) -> Vec<GraspCandidate> {
    let bodies = scene.all_bodies();
    generate_candidates_with(circle, n, tool, |i, pose| {
        let cfg = IkConfig {
            seed: ik.seed.wrapping_add(i as u64),
            ..*ik
        };
        inverse_kinematics(chain, pose, q_seed, &cfg)
            .ok()
            .filter(|q| chain.within_limits(q) && !in_collision(&chain.link_bodies(q), &bodies))
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspPolicy {
    FirstFeasible,
    #[default]
    ClosestConfig,
}

pub fn select_grasp<'a>(
    candidates: &'a [GraspCandidate],
    q_current: &JointConfig,
    policy: GraspPolicy,
) -> Result<&'a GraspCandidate, GraspError> {
    let feasible = candidates.iter().filter(|c| c.feasible && c.ik.is_some());
    let chosen = match policy {
        GraspPolicy::FirstFeasible => feasible.min_by_key(|c| c.index),
        GraspPolicy::ClosestConfig => feasible
            .map(|c| (c, c.joint_distance_sq(q_current).unwrap_or(f64::INFINITY)))
            .min_by(|(a, da), (b, db)| da.total_cmp(db).then(a.index.cmp(&b.index)))
            .map(|(c, _)| c),
    };
    chosen.ok_or(GraspError::NoFeasibleGrasp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspConfig {
    pub candidates: usize,
    /// Added to the larger cross-section semi-axis.
    pub finger_clearance: f64,
    pub cutter_radius: f64,
    /// Cut point height above the fruit top, along the stem axis.
    pub cutter_offset: f64,
    pub policy: GraspPolicy,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self {
            candidates: 16,
            finger_clearance: 0.03,
            cutter_radius: 0.10,
            cutter_offset: 0.02,
            policy: GraspPolicy::ClosestConfig,
        }
    }
}

impl GraspConfig {
    /// Gripper circle around the fruit center with `r = max(a, b) + clearance`.
    pub fn gripper_circle(&self, pose: &RigidTransform, a: f64, b: f64) -> Result<GraspCircle, GeometryError> {
        GraspCircle::new(
            pose.translation,
            pose.rotation * Vec3::z(),
            a.max(b) + self.finger_clearance,
        )
    }

    /// Cutter circle around the stem, `c + offset` above the center along the fruit axis.
    pub fn cutter_circle(&self, pose: &RigidTransform, c: f64) -> Result<GraspCircle, GeometryError> {
        let axis = pose.rotation * Vec3::z();
        GraspCircle::new(
            pose.translation + axis * (c + self.cutter_offset),
            axis,
            self.cutter_radius,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn unit_circle() -> GraspCircle {
        GraspCircle::new(Vec3::zeros(), Vec3::z(), 0.2).unwrap()
    }

    #[test]
    fn candidate_pose_examples() {
        let c = unit_circle();
        assert_relative_eq!(c.u1, Vec3::x(), epsilon = 1e-12);
        let p0 = candidate_pose(&c, 0.0);
        assert_relative_eq!(p0.translation, Vec3::new(0.2, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(p0.rotation * Vec3::z(), -Vec3::x(), epsilon = 1e-12);
        let p1 = candidate_pose(&c, FRAC_PI_2);
        assert_relative_eq!(p1.translation, Vec3::new(0.0, 0.2, 0.0), epsilon = 1e-12);
        assert_relative_eq!(p1.rotation * Vec3::z(), -Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn candidate_angles_and_selection() {
        let got = generate_candidates_with(&unit_circle(), 8, Tool::Gripper, |_, _| None);
        for (i, c) in got.iter().enumerate() {
            assert_eq!(c.index, i);
            assert_relative_eq!(c.theta, i as f64 * std::f64::consts::FRAC_PI_4);
        }
        let q0 = DVector::zeros(1);
        let feasible = generate_candidates_with(&unit_circle(), 8, Tool::Gripper, |i, _| match i {
            2 => Some(DVector::from_element(1, 2.0)),
            5 => Some(DVector::from_element(1, 1.0)),
            _ => None,
        });
        assert_eq!(select_grasp(&feasible, &q0, GraspPolicy::ClosestConfig).unwrap().index, 5);
        assert_eq!(select_grasp(&feasible, &q0, GraspPolicy::FirstFeasible).unwrap().index, 2);
        assert_eq!(
            select_grasp(&got, &q0, GraspPolicy::ClosestConfig),
            Err(GraspError::NoFeasibleGrasp)
        );
    }

    #[test]
    fn vertical_axis_falls_back_to_x() {
        let c = GraspCircle::new(Vec3::zeros(), Vec3::new(0.0, 0.0, -2.0), 0.1).unwrap();
        assert!(c.is_valid());
        assert_relative_eq!(c.u1, Vec3::x(), epsilon = 1e-12);
        assert!(GraspCircle::new(Vec3::zeros(), Vec3::zeros(), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn circle_and_pose_invariants(
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64,
            r in 0.02..0.3f64, theta in -7.0..7.0f64, cutter: bool,
        ) {
            let a = Vec3::new(ax, ay, az);
            prop_assume!(a.norm() > 0.1);
            let c = GraspCircle::new(Vec3::new(0.1, 0.4, 0.3), a, r).unwrap();
            prop_assert!(c.is_valid());
            let x = c.point(theta);
            prop_assert!(((x - c.center).norm() - r).abs() < 1e-12);
            prop_assert!((x - c.center).dot(&c.axis).abs() < 1e-12);
            let tool = if cutter { Tool::Cutter } else { Tool::Gripper };
            let p = candidate_pose_for(&c, theta, tool);
            let m = p.rotation.matrix();
            prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).amax() < 1e-12);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
            prop_assert!((p.rotation * Vec3::z() - c.approach(theta)).norm() < 1e-12);
            let blade_normal = if cutter { p.rotation * Vec3::y() } else { p.rotation * Vec3::x() };
            prop_assert!((blade_normal.dot(&c.axis).abs() - 1.0).abs() < 1e-12);
        }
    }
}
