//! Vectors, rotations, rigid transforms and pinhole back-projection.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type Vec3 = Vector3<f64>;
pub type Rotation = Rotation3<f64>;

/// Below this angle (radians) the rotation-vector maps switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Thresholds used by frame construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameTolerances {
    /// Minimum length (m) of the primary axis and of the cross product with the reference.
    pub min_axis_length: f64,
    /// Minimum angle (rad) between the primary axis and the reference.
    pub min_reference_angle: f64,
}

impl Default for FrameTolerances {
    fn default() -> Self {
        Self {
            min_axis_length: 1e-6,
            min_reference_angle: 1e-6,
        }
    }
}

/// Builds the orthonormal frame `[x | y | z]` with `z` along `v` and `x` along `v × reference`.
pub fn build_frame(v: &Vec3, reference: &Vec3) -> Result<Rotation, GeometryError> {
    build_frame_with(v, reference, &FrameTolerances::default())
}

pub fn build_frame_with(
    v: &Vec3,
    reference: &Vec3,
    tol: &FrameTolerances,
) -> Result<Rotation, GeometryError> {
    let len = v.norm();
    if !len.is_finite() || len <= tol.min_axis_length {
        return Err(GeometryError::DegenerateAxis { length: len });
    }
    let z = v / len;
    let cross = v.cross(reference);
    let cross_len = cross.norm();
    let ref_len = reference.norm();
    // sin of the angle between v and the reference
    let sin_angle = if ref_len > 0.0 {
        cross_len / (len * ref_len)
    } else {
        0.0
    };
    if cross_len <= tol.min_axis_length || sin_angle <= tol.min_reference_angle.sin() {
        return Err(GeometryError::ParallelReference);
    }
    let x = cross / cross_len;
    let y = z.cross(&x);
    Ok(Rotation::from_matrix_unchecked(Matrix3::from_columns(&[
        x, y, z,
    ])))
}

/// Tries each reference in order and returns the first frame that can be built.
///
/// A degenerate primary axis is reported immediately since no reference can fix it.
pub fn build_frame_with_fallback(
    v: &Vec3,
    references: &[Vec3],
    tol: &FrameTolerances,
) -> Result<Rotation, GeometryError> {
    let mut last = GeometryError::ParallelReference;
    for reference in references {
        match build_frame_with(v, reference, tol) {
            Ok(r) => return Ok(r),
            Err(e @ GeometryError::DegenerateAxis { .. }) => return Err(e),
            Err(e) => last = e,
        }
    }
    Err(last)
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula for a rotation vector (axis times angle).
pub fn rotation_from_vector(theta: &Vec3) -> Rotation {
    let angle_sq = theta.norm_squared();
    let (a, b) = if angle_sq.sqrt() < SMALL_ANGLE {
        (1.0 - angle_sq / 6.0, 0.5 - angle_sq / 24.0)
    } else {
        let angle = angle_sq.sqrt();
        (angle.sin() / angle, (1.0 - angle.cos()) / angle_sq)
    };
    let k = skew(theta);
    Rotation::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Inverse of [`rotation_from_vector`]; the returned angle lies in `[0, π]`.
pub fn rotation_to_vector(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let vee = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    // atan2 keeps precision at both ends where acos of the trace does not
    let angle = (0.5 * vee.norm()).atan2(0.5 * (m.trace() - 1.0));
    if angle < SMALL_ANGLE {
        return vee * 0.5 * (1.0 + angle * angle / 6.0);
    }
    if std::f64::consts::PI - angle < 1e-6 {
        // R ≈ 2nnᵀ - I near π; recover the axis from the largest diagonal entry.
        let b = (m + Matrix3::identity()) * 0.5;
        let i = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let mut n = b.column(i).into_owned();
        n /= n.norm();
        if n.dot(&vee) < 0.0 {
            n = -n;
        }
        return n * angle;
    }
    vee * (angle / (2.0 * angle.sin()))
}

/// Rotation matrix plus translation, acting as `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    /// Roll-pitch-yaw (fixed-axis x, y, z) plus translation, as used in URDF origins.
    pub fn from_rpy(xyz: Vec3, rpy: Vec3) -> Self {
        Self::new(Rotation::from_euler_angles(rpy.x, rpy.y, rpy.z), xyz)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Maps a world point into this frame: `Rᵀ (p − t)`.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Translation distance and rotation angle between two transforms.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        let dt = (self.translation - other.translation).norm();
        let dr = rotation_to_vector(&(self.rotation.inverse() * other.rotation)).norm();
        (dt, dr)
    }

    /// Linear interpolation of translation and geodesic interpolation of rotation.
    pub fn interpolate(&self, other: &RigidTransform, s: f64) -> RigidTransform {
        let delta = rotation_to_vector(&(self.rotation.inverse() * other.rotation));
        RigidTransform::new(
            self.rotation * rotation_from_vector(&(delta * s)),
            self.translation + (other.translation - self.translation) * s,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.matrix().iter().all(|v| v.is_finite())
    }
}

/// JSON form: `{"t": [3], "R": [9] (row-major)}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformJson {
    pub t: [f64; 3],
    #[serde(rename = "R")]
    pub r: [f64; 9],
}

impl From<&RigidTransform> for TransformJson {
    fn from(tf: &RigidTransform) -> Self {
        Self {
            t: [tf.translation.x, tf.translation.y, tf.translation.z],
            r: row_major(&tf.rotation),
        }
    }
}

impl From<&TransformJson> for RigidTransform {
    fn from(j: &TransformJson) -> Self {
        let m = Matrix3::from_row_slice(&j.r);
        let exact = Rotation::from_matrix_unchecked(m);
        // keep exact values when already orthonormal so JSON round-trips bit-for-bit
        let rotation = if orthonormality_error(&exact) < 1e-12 {
            exact
        } else {
            Rotation::from_matrix(&m)
        };
        RigidTransform::new(
            rotation,
            Vec3::new(j.t[0], j.t[1], j.t[2]),
        )
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        TransformJson::deserialize(d).map(|j| RigidTransform::from(&j))
    }
}

pub fn row_major(r: &Rotation) -> [f64; 9] {
    let m = r.matrix();
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

/// Largest deviation of `RᵀR` from identity and of `det R` from one.
pub fn orthonormality_error(r: &Rotation) -> f64 {
    let m = r.matrix();
    let gram = m.transpose() * m - Matrix3::identity();
    let det = (m.determinant() - 1.0).abs();
    gram.amax().max(det)
}

/// Points in a named frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub frame: String,
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(frame: impl Into<String>, points: Vec<Vec3>) -> Self {
        Self {
            frame: frame.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Maps every point through `tf` and relabels the frame.
    pub fn transformed(&self, tf: &RigidTransform, frame: impl Into<String>) -> PointCloud {
        PointCloud::new(
            frame,
            self.points.iter().map(|p| tf.transform_point(p)).collect(),
        )
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }
}

pub fn centroid(pc: &PointCloud) -> Result<Vec3, GeometryError> {
    if pc.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let sum = pc.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    Ok(sum / pc.len() as f64)
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Roughly a 424×240 depth stream of a short-range RGB-D sensor.
    pub fn default_wrist() -> Self {
        Self {
            fx: 215.0,
            fy: 215.0,
            cx: 212.0,
            cy: 120.0,
            width: 424,
            height: 240,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics)
        }
    }

    /// Projects a camera-frame point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }
}

/// Row-major depth image in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        if u < self.width && v < self.height {
            Some(self.data[(v * self.width + u) as usize])
        } else {
            None
        }
    }

    pub fn set(&mut self, u: u32, v: u32, d: f64) {
        if u < self.width && v < self.height {
            self.data[(v * self.width + u) as usize] = d;
        }
    }
}

/// Back-projects masked pixels with valid depth (`d > 0`, finite) into camera-frame points.
pub fn back_project(
    mask: &[(u32, u32)],
    depth: &DepthImage,
    intr: &CameraIntrinsics,
) -> Result<PointCloud, GeometryError> {
    intr.validate()?;
    let mut points = Vec::with_capacity(mask.len());
    for &(u, v) in mask {
        if u >= intr.width || v >= intr.height {
            return Err(GeometryError::PixelOutOfBounds { u, v });
        }
        let Some(d) = depth.get(u, v) else {
            return Err(GeometryError::PixelOutOfBounds { u, v });
        };
        if d.is_finite() && d > 0.0 {
            points.push(intr.unproject(u as f64, v as f64, d));
        }
    }
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    Ok(PointCloud::new("camera", points))
}
