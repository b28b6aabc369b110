//! Fixed dual-arm cell: arm bases, named configurations, storage bin and static obstacles.
//!
//! World frame: x along the platform, y toward the plant row, z up.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use vader_core::collision::CollisionBody;
use vader_core::geometry::{CameraIntrinsics, Rotation, RigidTransform, Vec3};
use vader_core::kinematics::{default_arm_spec, inverse_kinematics, ChainSpec, IkConfig, JointConfig, KinematicChain};
use vader_core::planning::{PlanningScene, WallSpec};

use crate::HarvestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmId {
    Gripper,
    Cutter,
}

impl ArmId {
    pub const BOTH: [ArmId; 2] = [ArmId::Gripper, ArmId::Cutter];

    pub fn index(self) -> usize {
        match self {
            ArmId::Gripper => 0,
            ArmId::Cutter => 1,
        }
    }

    pub fn other(self) -> ArmId {
        match self {
            ArmId::Gripper => ArmId::Cutter,
            ArmId::Cutter => ArmId::Gripper,
        }
    }

    /// −1 for the arm on the −x side of the division wall.
    pub fn side(self) -> f64 {
        match self {
            ArmId::Gripper => -1.0,
            ArmId::Cutter => 1.0,
        }
    }
}

impl std::fmt::Display for ArmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArmId::Gripper => "gripper",
            ArmId::Cutter => "cutter",
        })
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn inflated(&self, m: f64) -> Self {
        Self::new(self.min.add_scalar(-m), self.max.add_scalar(m))
    }

    pub fn body(&self) -> CollisionBody {
        CollisionBody::aabb(self.center(), (self.max - self.min) * 0.5)
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|k| !(self.max[k] > self.min[k]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSetup {
    pub chain: ChainSpec,
    pub base: RigidTransform,
    pub home: JointConfig,
    /// Approach yaw of the pre-grasp standoff, measured from −y toward this arm's side.
    pub approach_yaw: f64,
    /// Camera pose relative to the tool frame; the camera looks along its z axis.
    pub camera_offset: RigidTransform,
}

/// Everything the executive needs to know about the cell. Serializable as the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestScene {
    pub gripper: ArmSetup,
    pub cutter: ArmSetup,
    /// Gripper configuration that holds the fruit over the bin.
    pub storage: JointConfig,
    /// Collision body of the bin.
    pub bin: Aabb,
    /// Fruit centers inside this volume count as stored.
    pub drop_volume: Aabb,
    pub obstacles: Vec<CollisionBody>,
    pub wall: WallSpec,
    /// Peppers are generated inside this box.
    pub workspace: Aabb,
    pub intrinsics: CameraIntrinsics,
}

fn facing_plants(x: f64) -> RigidTransform {
    RigidTransform::new(
        Rotation::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2),
        Vec3::new(x, 0.0, 0.0),
    )
}

/// Tool pose at `p` with z along `dir` and x as horizontal as possible.
pub fn look_along(p: Vec3, dir: Vec3) -> RigidTransform {
    let z = dir.normalize();
    let x = z
        .cross(&Vec3::z())
        .try_normalize(1e-9)
        .unwrap_or_else(Vec3::x);
    let y = z.cross(&x);
    RigidTransform::new(
        Rotation::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[x, y, z])),
        p,
    )
}

impl HarvestScene {
    /// The default cell. Named configurations are solved once by IK from fixed seeds.
    pub fn default_cell() -> Self {
        let spec = default_arm_spec();
        let ik = IkConfig::default();
        let solve = |base: &RigidTransform, target: RigidTransform, seed: &[f64]| {
            let chain = KinematicChain::from_spec(&spec)
                .expect("built-in chain")
                .with_base(*base);
            inverse_kinematics(&chain, &target, &DVector::from_column_slice(seed), &ik)
                .expect("named configuration is reachable")
        };
        let seed = [0.0, -0.5, 0.0, 1.0, 0.0, 1.5, 0.0];
        let gb = facing_plants(-0.25);
        let cb = facing_plants(0.25);
        let g_home = solve(&gb, look_along(Vec3::new(-0.42, 0.14, 0.45), Vec3::y()), &seed);
        let c_home = solve(&cb, look_along(Vec3::new(0.42, 0.14, 0.45), Vec3::y()), &seed);
        let storage = solve(&gb, look_along(Vec3::new(0.0, 0.1, 0.26), -Vec3::z()), &seed);
        let camera_offset = RigidTransform::from_translation(Vec3::new(0.0, -0.06, -0.08));
        let arm = |base, home, yaw| ArmSetup {
            chain: spec.clone(),
            base,
            home,
            approach_yaw: yaw,
            camera_offset,
        };
        Self {
            gripper: arm(gb, g_home, FRAC_PI_4),
            cutter: arm(cb, c_home, FRAC_PI_4),
            storage,
            bin: Aabb::new(Vec3::new(-0.1, 0.03, 0.0), Vec3::new(0.1, 0.17, 0.08)),
            drop_volume: Aabb::new(Vec3::new(-0.1, 0.03, 0.0), Vec3::new(0.1, 0.17, 0.3)),
            obstacles: vec![
                // plant row behind the fruit
                Aabb::new(Vec3::new(-1.0, 0.72, 0.0), Vec3::new(1.0, 0.9, 1.2)).body(),
                // platform surface
                Aabb::new(Vec3::new(-1.0, -0.5, -0.2), Vec3::new(1.0, 1.0, -0.08)).body(),
            ],
            wall: WallSpec::default(),
            workspace: Aabb::new(Vec3::new(-0.55, 0.44, 0.28), Vec3::new(0.55, 0.54, 0.42)),
            intrinsics: CameraIntrinsics::default_wrist(),
        }
    }

    pub fn arm(&self, id: ArmId) -> &ArmSetup {
        match id {
            ArmId::Gripper => &self.gripper,
            ArmId::Cutter => &self.cutter,
        }
    }

    pub fn chain(&self, id: ArmId) -> Result<KinematicChain, HarvestError> {
        let a = self.arm(id);
        Ok(KinematicChain::from_spec(&a.chain)?.with_base(a.base))
    }

    pub fn chains(&self) -> Result<[KinematicChain; 2], HarvestError> {
        Ok([self.chain(ArmId::Gripper)?, self.chain(ArmId::Cutter)?])
    }

    pub fn home(&self, id: ArmId) -> &JointConfig {
        &self.arm(id).home
    }

    /// Static planning scene: obstacles plus the bin.
    pub fn planning_scene(&self) -> PlanningScene {
        let mut bodies = self.obstacles.clone();
        bodies.push(self.bin.body());
        let mut s = PlanningScene::new(bodies);
        s.wall_spec = self.wall;
        s
    }

    pub fn workspace_center(&self) -> Vec3 {
        self.workspace.center()
    }

    pub fn validate(&self) -> Result<(), HarvestError> {
        if self.workspace.is_degenerate() || self.bin.is_degenerate() || self.drop_volume.is_degenerate() {
            return Err(HarvestError::InvalidScene("degenerate box".into()));
        }
        let chains = self.chains()?;
        for id in ArmId::BOTH {
            chains[id.index()].check_dof(self.home(id))?;
        }
        chains[0].check_dof(&self.storage)?;
        self.intrinsics.validate()?;
        Ok(())
    }
}
