//! Synthetic peppers, partial-view rendering and the geometric detachment model.

use nalgebra::Rotation3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vader_core::collision::{clearance, segment_distance, CollisionBody};
use vader_core::geometry::{CameraIntrinsics, PointCloud, RigidTransform, Vec3};
use vader_core::superellipsoid::{implicit_value, Superellipsoid};

use crate::world::Aabb;
use crate::HarvestError;

/// Largest angle between the pepper axis and vertical.
pub const MAX_TILT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Translation noise of the coarse detection (m).
    pub sigma_t_coarse: f64,
    /// Translation noise added to the fine estimate (m).
    pub sigma_t_fine: f64,
    /// Axis tilt noise (rad).
    pub sigma_rot: f64,
    /// Per-point depth noise (m).
    pub sigma_p: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_t_coarse: 0.005,
            sigma_t_fine: 0.002,
            sigma_rot: 0.02,
            sigma_p: 0.001,
        }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            sigma_t_coarse: 0.0,
            sigma_t_fine: 0.0,
            sigma_rot: 0.0,
            sigma_p: 0.0,
        }
    }

    /// Pose noise multiplied by `k`; point noise unchanged.
    pub fn with_pose_scale(&self, k: f64) -> Self {
        Self {
            sigma_t_coarse: self.sigma_t_coarse * k,
            sigma_t_fine: self.sigma_t_fine * k,
            sigma_rot: self.sigma_rot * k,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), HarvestError> {
        let all = [self.sigma_t_coarse, self.sigma_t_fine, self.sigma_rot, self.sigma_p];
        if all.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(HarvestError::InvalidScene("noise sigmas must be finite and non-negative".into()))
        }
    }
}

/// Ground-truth pepper: posed shape plus the peduncle segment (fruit top → stem).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PepperTruth {
    pub shape: Superellipsoid,
    pub peduncle: [Vec3; 2],
}

impl PepperTruth {
    pub const PEDUNCLE_LENGTH: f64 = 0.05;

    pub fn new(shape: Superellipsoid) -> Self {
        let axis = shape.pose().rotation * Vec3::z();
        let top = shape.center() + axis * shape.c;
        Self {
            shape,
            peduncle: [top, top + axis * Self::PEDUNCLE_LENGTH],
        }
    }

    pub fn center(&self) -> Vec3 {
        self.shape.center()
    }

    pub fn axis(&self) -> Vec3 {
        self.shape.pose().rotation * Vec3::z()
    }

    /// Angle between the pepper axis and vertical.
    pub fn tilt(&self) -> f64 {
        self.axis().z.clamp(-1.0, 1.0).acos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScene {
    pub peppers: Vec<PepperTruth>,
    #[serde(default)]
    pub foliage: Vec<CollisionBody>,
    pub workspace: Aabb,
    pub seed: u64,
}

/// Rotation with the given pitch (about y) and roll (about x).
pub fn pitch_roll(pitch: f64, roll: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vec3::y_axis(), pitch) * Rotation3::from_axis_angle(&Vec3::x_axis(), roll)
}

/// Uniform position in the box; pitch and roll drawn uniformly subject to tilt ≤ [`MAX_TILT`].
pub fn randomize_pepper<R: Rng + ?Sized>(workspace: &Aabb, rng: &mut R) -> PepperTruth {
    let p = Vec3::from_fn(|k, _| rng.random_range(workspace.min[k]..=workspace.max[k]));
    let rot = loop {
        let pitch = rng.random_range(-MAX_TILT..=MAX_TILT);
        let roll = rng.random_range(-MAX_TILT..=MAX_TILT);
        if pitch.cos() * roll.cos() >= MAX_TILT.cos() {
            break pitch_roll(pitch, roll);
        }
    };
    let shape = Superellipsoid::new(
        rng.random_range(0.035..0.045),
        rng.random_range(0.035..0.045),
        rng.random_range(0.04..0.055),
        rng.random_range(0.3..1.0),
        rng.random_range(0.3..1.0),
    )
    .with_pose(&RigidTransform::new(rot, p));
    PepperTruth::new(shape)
}

/// Peduncle treated as a thin rod of this radius when rendering.
const STEM_RADIUS: f64 = 0.004;
const STEM_SAMPLES: usize = 60;

fn visible_from(camera: &RigidTransform, intr: &CameraIntrinsics, p: &Vec3) -> bool {
    let pc = camera.inverse_transform_point(p);
    intr.project(&pc).is_some_and(|(u, v)| intr.in_image(u, v))
}

fn occluded(p: &Vec3, eye: &Vec3, occluders: &[CollisionBody]) -> bool {
    let ray = CollisionBody::capsule(*p, *eye, 0.0);
    occluders.iter().any(|b| clearance(&ray, b).is_some_and(|c| c <= 0.0))
}

/// Whether the open segment `p → eye` passes through the fruit.
fn behind_fruit(p: &Vec3, eye: &Vec3, shape: &Superellipsoid) -> bool {
    (1..20).any(|k| {
        let s = k as f64 / 20.0;
        implicit_value(&(p + (eye - p) * s), shape) < 1.0
    })
}

/// Fruit surface points facing the camera plus peduncle points, world frame, with point noise.
pub fn render_partial_cloud<R: Rng + ?Sized>(
    pepper: &PepperTruth,
    camera: &RigidTransform,
    intr: &CameraIntrinsics,
    sigma_p: f64,
    occluders: &[CollisionBody],
    samples: usize,
    rng: &mut R,
) -> Result<(PointCloud, PointCloud), HarvestError> {
    let eye = camera.translation;
    let noise = Normal::new(0.0, sigma_p.max(0.0)).map_err(|_| HarvestError::EmptyView)?;
    let jitter = |p: Vec3, rng: &mut R| {
        if sigma_p > 0.0 {
            p + Vec3::from_fn(|_, _| noise.sample(rng))
        } else {
            p
        }
    };

    let mut fruit = Vec::new();
    for (p, n) in pepper.shape.sample_surface(samples, rng) {
        if n.dot(&(eye - p)) > 0.0 && visible_from(camera, intr, &p) && !occluded(&p, &eye, occluders) {
            fruit.push(jitter(p, rng));
        }
    }
    if fruit.is_empty() {
        return Err(HarvestError::EmptyView);
    }

    let [s0, s1] = pepper.peduncle;
    let mut stem = Vec::new();
    for k in 0..STEM_SAMPLES {
        let on_axis = s0 + (s1 - s0) * ((k as f64 + 0.5) / STEM_SAMPLES as f64);
        // nearest surface point of the rod toward the camera
        let axis = (s1 - s0).normalize();
        let to_eye = eye - on_axis;
        let radial = to_eye - axis * to_eye.dot(&axis);
        let p = on_axis + radial.try_normalize(1e-12).unwrap_or_else(Vec3::zeros) * STEM_RADIUS;
        if visible_from(camera, intr, &p) && !occluded(&p, &eye, occluders) && !behind_fruit(&p, &eye, &pepper.shape) {
            stem.push(jitter(p, rng));
        }
    }
    Ok((PointCloud::new("world", fruit), PointCloud::new("world", stem)))
}

/// Straight cutting edge of the blade: the tool's approach axis around the tool point.
pub fn blade_segment(tool: &RigidTransform, half_length: f64) -> [Vec3; 2] {
    let z = tool.rotation * Vec3::z();
    [tool.translation - z * half_length, tool.translation + z * half_length]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutResult {
    pub detached: bool,
    /// Blade-to-peduncle distance at this cut.
    pub miss_distance: f64,
    /// The fruit had already been detached; nothing changed.
    pub no_op: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PepperAttachment {
    pub attached: bool,
    /// Cut tolerance δ_cut (m).
    pub threshold: f64,
    pub cuts: Vec<CutResult>,
}

impl PepperAttachment {
    pub const DEFAULT_THRESHOLD: f64 = 0.008;

    pub fn new(threshold: f64) -> Self {
        Self {
            attached: true,
            threshold,
            cuts: Vec::new(),
        }
    }

    /// Detaches iff the blade segment passes within the threshold of the peduncle.
    pub fn apply_cut(&mut self, pepper: &PepperTruth, blade: &[Vec3; 2]) -> CutResult {
        let [p0, p1] = pepper.peduncle;
        let miss = segment_distance(&blade[0], &blade[1], &p0, &p1);
        let result = if !self.attached {
            CutResult {
                detached: false,
                miss_distance: miss,
                no_op: true,
            }
        } else {
            let detached = miss <= self.threshold;
            self.attached = !detached;
            CutResult {
                detached,
                miss_distance: miss,
                no_op: false,
            }
        };
        self.cuts.push(result);
        result
    }
}
