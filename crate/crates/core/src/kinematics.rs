//! Serial revolute chains: forward kinematics, damped least-squares IK, link capsules.

use nalgebra::{DVector, Matrix6, Rotation3, Unit, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::CollisionBody;
use crate::error::KinematicsError;
use crate::geometry::{rotation_to_vector, RigidTransform, Vec3};

pub type JointConfig = DVector<f64>;

/// `{t, rpy}` fixed transform as written in chain files.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginSpec {
    #[serde(default)]
    pub t: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OriginSpec {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_rpy(Vec3::from(self.t), Vec3::from(self.rpy))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub origin: OriginSpec,
    pub limits: [f64; 2],
}

/// Chain description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    #[serde(default)]
    pub base: OriginSpec,
    pub joints: Vec<JointSpec>,
    pub ee_offset: OriginSpec,
    /// One radius per link: base→joint 1, joint i→joint i+1, last joint→end effector.
    pub link_radii: Vec<f64>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Length of the thin tool tip left out of the last link's capsule.
    #[serde(default)]
    pub tip_length: f64,
}

fn default_margin() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub origin: RigidTransform,
    pub axis: Unit<Vec3>,
    pub limits: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub base: RigidTransform,
    pub joints: Vec<Joint>,
    pub ee_offset: RigidTransform,
    pub link_radii: Vec<f64>,
    /// Inflation added to every link capsule.
    pub margin: f64,
    pub tip_length: f64,
}

impl KinematicChain {
    pub fn from_spec(spec: &ChainSpec) -> Result<Self, KinematicsError> {
        let invalid = |m: String| Err(KinematicsError::InvalidChain(m));
        if spec.joints.is_empty() {
            return invalid("chain has no joints".into());
        }
        if spec.link_radii.len() != spec.joints.len() + 1 {
            return invalid(format!(
                "expected {} link radii, got {}",
                spec.joints.len() + 1,
                spec.link_radii.len()
            ));
        }
        if spec.link_radii.iter().any(|r| !(*r > 0.0)) || !(spec.margin >= 0.0) || !(spec.tip_length >= 0.0) {
            return invalid("link radii must be positive, margin and tip length non-negative".into());
        }
        let mut joints = Vec::with_capacity(spec.joints.len());
        for (i, j) in spec.joints.iter().enumerate() {
            let axis = Vec3::from(j.axis);
            if !(axis.norm() > 1e-9) {
                return invalid(format!("joint {i} has a zero axis"));
            }
            if !(j.limits[0] < j.limits[1]) {
                return invalid(format!("joint {i} limits are not increasing"));
            }
            joints.push(Joint {
                origin: j.origin.transform(),
                axis: Unit::new_normalize(axis),
                limits: (j.limits[0], j.limits[1]),
            });
        }
        Ok(Self {
            base: spec.base.transform(),
            joints,
            ee_offset: spec.ee_offset.transform(),
            link_radii: spec.link_radii.clone(),
            margin: spec.margin,
            tip_length: spec.tip_length,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let spec: ChainSpec =
            serde_json::from_str(text).map_err(|e| KinematicsError::InvalidChain(e.to_string()))?;
        Self::from_spec(&spec)
    }

    /// Nominal 7-DOF arm (xArm7 link lengths) with a 15 cm tool.
    pub fn default_arm() -> Self {
        Self::from_spec(&default_arm_spec()).expect("built-in chain is valid")
    }

    pub fn with_base(mut self, base: RigidTransform) -> Self {
        self.base = base;
        self
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn check_dof(&self, q: &JointConfig) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DofMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.len() == self.dof()
            && q
                .iter()
                .zip(&self.joints)
                .all(|(v, j)| *v >= j.limits.0 && *v <= j.limits.1)
    }

    /// Shifts each joint by whole turns toward `reference` while staying within limits.
    /// The pose is unchanged.
    pub fn wrap_toward(&self, q: &mut JointConfig, reference: &JointConfig) {
        let two_pi = 2.0 * std::f64::consts::PI;
        for (i, j) in self.joints.iter().enumerate() {
            let turns = ((reference[i] - q[i]) / two_pi).round();
            let v = q[i] + turns * two_pi;
            if v >= j.limits.0 && v <= j.limits.1 {
                q[i] = v;
            }
        }
    }

    pub fn clamp_to_limits(&self, q: &mut JointConfig) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits.0, j.limits.1);
        }
    }

    pub fn lower_limits(&self) -> JointConfig {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.limits.0))
    }

    pub fn upper_limits(&self) -> JointConfig {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.limits.1))
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> JointConfig {
        DVector::from_iterator(
            self.dof(),
            self.joints
                .iter()
                .map(|j| rng.random_range(j.limits.0..=j.limits.1)),
        )
    }

    /// World frames of every joint (after its fixed origin, before its rotation), then the tool.
    pub fn joint_frames(&self, q: &JointConfig) -> (Vec<RigidTransform>, RigidTransform) {
        let mut frames = Vec::with_capacity(self.dof());
        let mut t = self.base;
        for (j, qi) in self.joints.iter().zip(q.iter()) {
            t = t.compose(&j.origin);
            frames.push(t);
            let rot = Rotation3::from_axis_angle(&j.axis, *qi);
            t = t.compose(&RigidTransform::new(rot, Vec3::zeros()));
        }
        (frames, t.compose(&self.ee_offset))
    }

    pub fn forward_kinematics(&self, q: &JointConfig) -> RigidTransform {
        self.joint_frames(q).1
    }

    /// Geometric Jacobian in the world frame: rows are (linear, angular) velocity.
    pub fn jacobian(&self, q: &JointConfig) -> (nalgebra::DMatrix<f64>, RigidTransform) {
        let (frames, ee) = self.joint_frames(q);
        let mut jac = nalgebra::DMatrix::zeros(6, self.dof());
        for (i, (f, j)) in frames.iter().zip(&self.joints).enumerate() {
            let z = f.rotation * j.axis.into_inner();
            let lin = z.cross(&(ee.translation - f.translation));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        (jac, ee)
    }

    /// Capsule points: base origin, each joint origin, tool point.
    pub fn link_points(&self, q: &JointConfig) -> Vec<Vec3> {
        let (frames, ee) = self.joint_frames(q);
        let mut pts = Vec::with_capacity(frames.len() + 2);
        pts.push(self.base.translation);
        pts.extend(frames.iter().map(|f| f.translation));
        pts.push(ee.translation);
        pts
    }

    /// One inflated capsule per link.
    pub fn link_bodies(&self, q: &JointConfig) -> Vec<CollisionBody> {
        let mut pts = self.link_points(q);
        let n = pts.len();
        let tool = pts[n - 1] - pts[n - 2];
        let len = tool.norm();
        if self.tip_length > 0.0 && len > 0.0 {
            pts[n - 1] -= tool * (self.tip_length.min(0.9 * len) / len);
        }
        pts.windows(2)
            .zip(&self.link_radii)
            .map(|(w, r)| CollisionBody::capsule(w[0], w[1], r + self.margin))
            .collect()
    }

    pub fn num_links(&self) -> usize {
        self.dof() + 1
    }
}

/// Spec of [`KinematicChain::default_arm`].
pub fn default_arm_spec() -> ChainSpec {
    use std::f64::consts::{FRAC_PI_2, PI};
    let two_pi = 2.0 * PI;
    let j = |t: [f64; 3], rpy: [f64; 3], lo: f64, hi: f64| JointSpec {
        axis: [0.0, 0.0, 1.0],
        origin: OriginSpec { t, rpy },
        limits: [lo, hi],
    };
    ChainSpec {
        base: OriginSpec::default(),
        joints: vec![
            j([0.0, 0.0, 0.267], [0.0, 0.0, 0.0], -two_pi, two_pi),
            j([0.0, 0.0, 0.0], [-FRAC_PI_2, 0.0, 0.0], -2.059, 2.0944),
            j([0.0, -0.293, 0.0], [FRAC_PI_2, 0.0, 0.0], -two_pi, two_pi),
            j([0.0525, 0.0, 0.0], [FRAC_PI_2, 0.0, 0.0], -0.19198, 3.927),
            j([0.0775, -0.3425, 0.0], [FRAC_PI_2, 0.0, 0.0], -two_pi, two_pi),
            j([0.0, 0.0, 0.0], [FRAC_PI_2, 0.0, 0.0], -1.69297, PI),
            j([0.076, 0.097, 0.0], [-FRAC_PI_2, 0.0, 0.0], -two_pi, two_pi),
        ],
        ee_offset: OriginSpec {
            t: [0.0, 0.0, 0.15],
            rpy: [0.0; 3],
        },
        link_radii: vec![0.06, 0.05, 0.05, 0.045, 0.045, 0.04, 0.04, 0.03],
        margin: 0.005,
        tip_length: 0.04,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    /// Added to the diagonal of `J Jᵀ`.
    pub damping: f64,
    /// Largest per-iteration joint change (rad).
    pub step_clamp: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub seed: u64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            step_clamp: 0.2,
            max_iters: 150,
            restarts: 20,
            pos_tol: 2e-3,
            rot_tol: 1e-2,
            seed: 0x5eed,
        }
    }
}

/// Pose error `(translation, rotation vector)` taking `current` to `target`, world frame.
fn pose_error(current: &RigidTransform, target: &RigidTransform) -> Vector6<f64> {
    let dp = target.translation - current.translation;
    let dr = rotation_to_vector(&(target.rotation * current.rotation.inverse()));
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

fn converged(err: &Vector6<f64>, cfg: &IkConfig) -> bool {
    err.fixed_rows::<3>(0).norm() <= cfg.pos_tol && err.fixed_rows::<3>(3).norm() <= cfg.rot_tol
}

fn dls_descend(
    chain: &KinematicChain,
    target: &RigidTransform,
    mut q: JointConfig,
    cfg: &IkConfig,
) -> (JointConfig, bool) {
    // iterate past the acceptance tolerance so callers get a tight solution
    let tight = IkConfig {
        pos_tol: cfg.pos_tol * 0.05,
        rot_tol: cfg.rot_tol * 0.05,
        ..*cfg
    };
    for _ in 0..cfg.max_iters {
        let (jac, ee) = chain.jacobian(&q);
        let err = pose_error(&ee, target);
        if converged(&err, &tight) {
            return (q, true);
        }
        let jjt: Matrix6<f64> = Matrix6::from_iterator((&jac * jac.transpose()).iter().copied())
            + Matrix6::identity() * cfg.damping;
        let Some(y) = jjt.cholesky().map(|c| c.solve(&err)) else {
            break;
        };
        let mut dq = jac.transpose() * y;
        let m = dq.amax();
        if m > cfg.step_clamp {
            dq *= cfg.step_clamp / m;
        }
        q += dq;
        chain.clamp_to_limits(&mut q);
    }
    let err = pose_error(&chain.forward_kinematics(&q), target);
    let ok = converged(&err, cfg);
    (q, ok)
}

/// Damped least-squares IK from `seed`, then from deterministic random restarts.
pub fn inverse_kinematics(
    chain: &KinematicChain,
    target: &RigidTransform,
    seed: &JointConfig,
    cfg: &IkConfig,
) -> Result<JointConfig, KinematicsError> {
    chain.check_dof(seed)?;
    if !target.is_finite() {
        return Err(KinematicsError::NoSolution { attempts: 0 });
    }
    let mut start = seed.clone();
    chain.clamp_to_limits(&mut start);
    let (q, ok) = dls_descend(chain, target, start, cfg);
    if ok {
        return Ok(q);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let (q, ok) = dls_descend(chain, target, chain.random_config(&mut rng), cfg);
        if ok {
            return Ok(q);
        }
    }
    Err(KinematicsError::NoSolution {
        attempts: cfg.restarts + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn one_joint() -> KinematicChain {
        KinematicChain::from_json(
            r#"{"joints":[{"axis":[0,0,1],"origin":{"t":[0,0,0],"rpy":[0,0,0]},"limits":[-3,3]}],
                "ee_offset":{"t":[1,0,0],"rpy":[0,0,0]},"link_radii":[0.05,0.05]}"#,
        )
        .unwrap()
    }

    #[test]
    fn single_joint_example() {
        let c = one_joint();
        let t = c.forward_kinematics(&DVector::from_vec(vec![FRAC_PI_2]));
        assert_relative_eq!(t.translation, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_config_is_product_of_fixed_transforms() {
        let c = KinematicChain::default_arm();
        let mut t = c.base;
        for j in &c.joints {
            t = t.compose(&j.origin);
        }
        t = t.compose(&c.ee_offset);
        let fk = c.forward_kinematics(&DVector::zeros(7));
        let (dt, dr) = fk.distance_to(&t);
        assert!(dt < 1e-12 && dr < 1e-12);
    }

    #[test]
    fn fk_is_continuous() {
        let c = KinematicChain::default_arm();
        let q = DVector::from_vec(vec![0.3, -0.4, 0.2, 1.0, -0.5, 0.8, 0.1]);
        let base = c.forward_kinematics(&q);
        let mut last = f64::INFINITY;
        for k in 1..8 {
            let d = 10f64.powi(-k);
            let moved = c.forward_kinematics(&q.add_scalar(d));
            let (dt, dr) = moved.distance_to(&base);
            assert!(dt + dr < last);
            last = dt + dr;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn jacobian_matches_differences() {
        let c = KinematicChain::default_arm();
        let q = DVector::from_vec(vec![0.3, -0.4, 0.2, 1.0, -0.5, 0.8, 0.1]);
        let (jac, _) = c.jacobian(&q);
        for i in 0..7 {
            let h = 1e-6;
            let mut up = q.clone();
            let mut dn = q.clone();
            up[i] += h;
            dn[i] -= h;
            let (a, b) = (c.forward_kinematics(&up), c.forward_kinematics(&dn));
            let lin = (a.translation - b.translation) / (2.0 * h);
            let ang = rotation_to_vector(&(a.rotation * b.rotation.inverse())) / (2.0 * h);
            assert_relative_eq!(jac.fixed_view::<3, 1>(0, i).into_owned(), lin, epsilon = 1e-6);
            assert_relative_eq!(jac.fixed_view::<3, 1>(3, i).into_owned(), ang, epsilon = 1e-6);
        }
    }

    #[test]
    fn link_bodies_structure() {
        let c = KinematicChain::default_arm();
        let q0 = DVector::zeros(7);
        let bodies = c.link_bodies(&q0);
        assert_eq!(bodies.len(), c.num_links());
        let pts = c.link_points(&q0);
        let (frames, _) = c.joint_frames(&q0);
        for (i, f) in frames.iter().enumerate() {
            assert_relative_eq!(pts[i + 1], f.translation);
        }
        if let CollisionBody::Capsule { p0, radius, .. } = bodies[1] {
            assert_relative_eq!(p0, frames[0].translation);
            assert_relative_eq!(radius, c.link_radii[1] + c.margin);
        } else {
            panic!("expected capsule");
        }
        // moving joint 6 leaves links up to joint 6's origin alone
        let mut q = q0.clone();
        q[5] = 0.7;
        let moved = c.link_bodies(&q);
        assert_eq!(&moved[..6], &bodies[..6]);
        assert_ne!(moved[7], bodies[7]);
    }

    #[test]
    fn ik_from_solution_seed_and_out_of_reach() {
        let c = KinematicChain::default_arm();
        let q = DVector::from_vec(vec![0.3, -0.4, 0.2, 1.0, -0.5, 0.8, 0.1]);
        let target = c.forward_kinematics(&q);
        let sol = inverse_kinematics(&c, &target, &q, &IkConfig::default()).unwrap();
        let (dt, dr) = c.forward_kinematics(&sol).distance_to(&target);
        assert!(dt < 2e-3 && dr < 1e-2);

        let far = RigidTransform::from_translation(Vec3::new(10.0, 0.0, 0.0));
        assert!(matches!(
            inverse_kinematics(&c, &far, &q, &IkConfig::default()),
            Err(KinematicsError::NoSolution { .. })
        ));
        assert!(matches!(
            inverse_kinematics(&c, &target, &DVector::zeros(3), &IkConfig::default()),
            Err(KinematicsError::DofMismatch { expected: 7, got: 3 })
        ));
    }

    #[test]
    fn chain_json_validation() {
        assert!(KinematicChain::from_json(r#"{"joints":[],"ee_offset":{},"link_radii":[0.1]}"#).is_err());
        let bad_limits = r#"{"joints":[{"axis":[0,0,1],"origin":{},"limits":[1,-1]}],"ee_offset":{},"link_radii":[0.1,0.1]}"#;
        assert!(matches!(
            KinematicChain::from_json(bad_limits),
            Err(KinematicsError::InvalidChain(_))
        ));
    }
}
