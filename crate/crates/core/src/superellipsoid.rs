//! Posed superellipsoid model: implicit function, radial residual and surface sampling.

use nalgebra::Vector3;
use num_dual::DualNum;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_from_vector, rotation_to_vector, RigidTransform, Vec3, SMALL_ANGLE};

/// Open bounds on both curvature exponents.
pub const EPS_MIN: f64 = 0.1;
pub const EPS_MAX: f64 = 1.9;

/// Floor applied to bases raised to non-integer powers so `0^p` stays differentiable.
const POW_FLOOR: f64 = 1e-12;

/// Parameter-vector layout shared with the fitter.
pub mod param {
    pub const A: usize = 0;
    pub const B: usize = 1;
    pub const C: usize = 2;
    pub const EPS1: usize = 3;
    pub const EPS2: usize = 4;
    pub const TX: usize = 5;
    pub const THETA_X: usize = 8;
    pub const COUNT: usize = 11;
}

/// Shape `{a, b, c, eps1, eps2}` plus pose (center `t`, rotation vector `theta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Superellipsoid {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub t: [f64; 3],
    pub theta: [f64; 3],
}

impl Superellipsoid {
    pub fn new(a: f64, b: f64, c: f64, eps1: f64, eps2: f64) -> Self {
        Self {
            a,
            b,
            c,
            eps1,
            eps2,
            t: [0.0; 3],
            theta: [0.0; 3],
        }
    }

    pub fn with_pose(mut self, pose: &RigidTransform) -> Self {
        self.t = pose.translation.into();
        self.theta = rotation_to_vector(&pose.rotation).into();
        self
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.t)
    }

    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(rotation_from_vector(&Vec3::from(self.theta)), self.center())
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.a, self.b, self.c, self.eps1, self.eps2]
            .iter()
            .chain(self.t.iter())
            .chain(self.theta.iter())
            .all(|v| v.is_finite());
        finite
            && self.a > 0.0
            && self.b > 0.0
            && self.c > 0.0
            && self.eps1 > EPS_MIN
            && self.eps1 < EPS_MAX
            && self.eps2 > EPS_MIN
            && self.eps2 < EPS_MAX
    }

    pub fn to_params(&self) -> [f64; param::COUNT] {
        [
            self.a,
            self.b,
            self.c,
            self.eps1,
            self.eps2,
            self.t[0],
            self.t[1],
            self.t[2],
            self.theta[0],
            self.theta[1],
            self.theta[2],
        ]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            a: p[0],
            b: p[1],
            c: p[2],
            eps1: p[3],
            eps2: p[4],
            t: [p[5], p[6], p[7]],
            theta: [p[8], p[9], p[10]],
        }
    }

    /// Point on the canonical surface for latitude `eta ∈ [-π/2, π/2]` and longitude `omega ∈ [-π, π)`.
    pub fn canonical_surface_point(&self, eta: f64, omega: f64) -> Vec3 {
        let ce = spow(eta.cos(), self.eps1);
        Vec3::new(
            self.a * ce * spow(omega.cos(), self.eps2),
            self.b * ce * spow(omega.sin(), self.eps2),
            self.c * spow(eta.sin(), self.eps1),
        )
    }

    /// Outward unit normal at a canonical-frame point, from the gradient of the implicit function.
    pub fn canonical_normal(&self, p: &Vec3) -> Vec3 {
        let (a, b, c) = (self.a, self.b, self.c);
        let (e1, e2) = (self.eps1, self.eps2);
        let ax = (p.x / a).abs();
        let ay = (p.y / b).abs();
        let az = (p.z / c).abs();
        let pa = ax.powf(2.0 / e2);
        let pb = ay.powf(2.0 / e2);
        let s = pa + pb;
        // d/dx of |x/a|^(2/e2) = (2/e2) |x/a|^(2/e2 - 1) sign(x) / a
        let dpow = |u: f64, scale: f64, sign: f64, e: f64| {
            if u <= 0.0 {
                0.0
            } else {
                (2.0 / e) * u.powf(2.0 / e - 1.0) * sign / scale
            }
        };
        let outer = if s > POW_FLOOR {
            (e2 / e1) * s.powf(e2 / e1 - 1.0)
        } else {
            0.0
        };
        let g = Vec3::new(
            outer * dpow(ax, a, p.x.signum(), e2),
            outer * dpow(ay, b, p.y.signum(), e2),
            dpow(az, c, p.z.signum(), e1),
        );
        let n = g.norm();
        if n > 0.0 && n.is_finite() {
            g / n
        } else {
            p.normalize()
        }
    }

    /// Samples `n` posed surface points with world-frame outward normals.
    ///
    /// `(eta, omega)` is drawn uniformly and accepted with probability proportional to the
    /// local area element, which makes the samples close to uniform over the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(Vec3, Vec3)> {
        use std::f64::consts::{FRAC_PI_2, PI};
        let pose = self.pose();
        let area = |eta: f64, omega: f64| {
            let h = 1e-5;
            let de = (self.canonical_surface_point(eta + h, omega)
                - self.canonical_surface_point(eta - h, omega))
                / (2.0 * h);
            let dw = (self.canonical_surface_point(eta, omega + h)
                - self.canonical_surface_point(eta, omega - h))
                / (2.0 * h);
            de.cross(&dw).norm()
        };
        let (rows, cols) = (48, 96);
        let mut max_area: f64 = 0.0;
        for i in 0..rows {
            let eta = -FRAC_PI_2 + (i as f64 + 0.5) * PI / rows as f64;
            for j in 0..cols {
                let omega = -PI + (j as f64 + 0.5) * 2.0 * PI / cols as f64;
                max_area = max_area.max(area(eta, omega));
            }
        }
        let bound = if max_area > 0.0 { max_area * 1.2 } else { 1.0 };
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            let eta = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let omega = rng.random_range(-PI..PI);
            let accept = (area(eta, omega) / bound).min(1.0);
            // Bail out of rejection if the surface is pathological.
            if attempts < 200 * n.max(1) && rng.random::<f64>() > accept {
                continue;
            }
            let pc = self.canonical_surface_point(eta, omega);
            let normal = pose.rotation * self.canonical_normal(&pc);
            out.push((pose.transform_point(&pc), normal));
        }
        out
    }
}

/// Signed power `sign(x) |x|^e`.
pub fn spow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

/// `F(p; Λ)` for a point in the canonical frame; equals one on the surface and is below one inside.
pub fn implicit_value(p: &Vec3, shape: &Superellipsoid) -> f64 {
    let p = [p.x, p.y, p.z];
    implicit_generic(
        &p,
        [shape.a, shape.b, shape.c],
        shape.eps1,
        shape.eps2,
    )
}

/// Radial residual `√(abc) · |F(p_c)^{ε1/2} − 1|` of a sensor-frame point.
pub fn residual(p_s: &Vec3, shape: &Superellipsoid) -> f64 {
    signed_residual(&shape.to_params(), p_s).abs()
}

/// Residual before the absolute value; its square is the per-point cost.
pub fn signed_residual<D>(params: &[D], p_s: &Vector3<f64>) -> D
where
    D: DualNum<Primitive = f64> + Copy,
{
    let t = [params[param::TX], params[param::TX + 1], params[param::TX + 2]];
    let theta = [
        params[param::THETA_X],
        params[param::THETA_X + 1],
        params[param::THETA_X + 2],
    ];
    let w = [
        D::from(p_s.x) - t[0],
        D::from(p_s.y) - t[1],
        D::from(p_s.z) - t[2],
    ];
    let pc = rotate_transposed(&theta, &w);
    let (a, b, c) = (params[param::A], params[param::B], params[param::C]);
    let (e1, e2) = (params[param::EPS1], params[param::EPS2]);
    let f = implicit_generic(&pc, [a, b, c], e1, e2);
    (a * b * c).sqrt() * (floor_pos(f).powd(e1 * 0.5) - 1.0)
}

fn floor_pos<D: DualNum<Primitive = f64> + Copy>(x: D) -> D {
    if x.re() < POW_FLOOR {
        D::from(POW_FLOOR)
    } else {
        x
    }
}

/// `x^e` for `x ≥ 0`, `e > 1`; exactly zero (with zero derivative) at the origin where `powd` yields NaN.
fn pow_or_zero<D: DualNum<Primitive = f64> + Copy>(x: D, e: D) -> D {
    if x.re() < 1e-150 {
        D::from(0.0)
    } else {
        x.powd(e)
    }
}

fn implicit_generic<D>(p: &[D; 3], axes: [D; 3], e1: D, e2: D) -> D
where
    D: DualNum<Primitive = f64> + Copy,
{
    let two = D::from(2.0);
    let ux = (p[0] / axes[0]).abs();
    let uy = (p[1] / axes[1]).abs();
    let uz = (p[2] / axes[2]).abs();
    let s = pow_or_zero(ux, two / e2) + pow_or_zero(uy, two / e2);
    // e2/e1 may be below 1, so the sum needs the same guard
    let xy = if s.re() < 1e-300 { D::from(0.0) } else { s.powd(e2 / e1) };
    xy + pow_or_zero(uz, two / e1)
}

/// `R(θ)ᵀ w` via Rodrigues: `w − A (θ × w) + B θ × (θ × w)`.
fn rotate_transposed<D>(theta: &[D; 3], w: &[D; 3]) -> [D; 3]
where
    D: DualNum<Primitive = f64> + Copy,
{
    let angle_sq = theta[0] * theta[0] + theta[1] * theta[1] + theta[2] * theta[2];
    let (ca, cb) = if angle_sq.re().sqrt() < SMALL_ANGLE {
        (
            D::from(1.0) - angle_sq / 6.0,
            D::from(0.5) - angle_sq / 24.0,
        )
    } else {
        let angle = angle_sq.sqrt();
        (angle.sin() / angle, (D::from(1.0) - angle.cos()) / angle_sq)
    };
    let cross = |u: &[D; 3], v: &[D; 3]| {
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    };
    let tw = cross(theta, w);
    let ttw = cross(theta, &tw);
    [
        w[0] - ca * tw[0] + cb * ttw[0],
        w[1] - ca * tw[1] + cb * ttw[1],
        w[2] - ca * tw[2] + cb * ttw[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sphere(r: f64) -> Superellipsoid {
        Superellipsoid::new(r, r, r, 1.0, 1.0)
    }

    #[test]
    fn implicit_value_examples() {
        let s = Superellipsoid::new(0.04, 0.05, 0.06, 0.3, 1.7);
        assert_relative_eq!(implicit_value(&Vec3::new(0.04, 0.0, 0.0), &s), 1.0, epsilon = 1e-9);
        let unit = sphere(1.0);
        let p = Vec3::new(0.5, 0.5, 0.5f64.sqrt());
        assert_relative_eq!(implicit_value(&p, &unit), 1.0, epsilon = 1e-12);
        assert_relative_eq!(implicit_value(&Vec3::new(1.0, 1.0, 1.0), &sphere(2.0)), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn residual_examples() {
        let unit = sphere(1.0);
        assert_relative_eq!(residual(&Vec3::new(2.0, 0.0, 0.0), &unit), 1.0, epsilon = 1e-12);
        let mut s = Superellipsoid::new(0.03, 0.04, 0.05, 0.7, 1.2);
        let p = s.canonical_surface_point(0.3, 1.1);
        assert!(residual(&p, &s) < 1e-12);
        s.a *= 2.0;
        s.b *= 2.0;
        s.c *= 2.0;
        assert!(residual(&(p * 2.0), &s) < 1e-12);
    }

    #[test]
    fn surface_samples_have_unit_implicit_value() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = Superellipsoid::new(0.04, 0.045, 0.05, 0.8, 0.9).with_pose(&RigidTransform::new(
            rotation_from_vector(&Vec3::new(0.3, -0.2, 0.9)),
            Vec3::new(0.1, 0.4, 0.3),
        ));
        for (p, n) in s.sample_surface(300, &mut rng) {
            let pc = s.pose().inverse_transform_point(&p);
            assert!((implicit_value(&pc, &s) - 1.0).abs() < 1e-9);
            assert!(residual(&p, &s) < 1e-9);
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-9);
            // outward: moving along the normal leaves the body
            let out = s.pose().inverse_transform_point(&(p + n * 1e-4));
            assert!(implicit_value(&out, &s) > 1.0);
        }
    }

    #[test]
    fn sampling_is_roughly_area_uniform_on_sphere() {
        // On a sphere the six axis-aligned caps |x_i| > 0.5 r have equal area.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts = sphere(1.0).sample_surface(6000, &mut rng);
        let zcap = pts.iter().filter(|(p, _)| p.z > 0.5).count() as f64;
        let xcap = pts.iter().filter(|(p, _)| p.x > 0.5).count() as f64;
        // each cap holds 25% of the area
        assert!((zcap / 6000.0 - 0.25).abs() < 0.03, "{zcap}");
        assert!((xcap / 6000.0 - 0.25).abs() < 0.03, "{xcap}");
    }

    proptest! {
        #[test]
        fn residual_is_pose_equivariant(
            eta in -1.5..1.5f64, omega in -3.1..3.1f64,
            e1 in 0.2..1.8f64, e2 in 0.2..1.8f64,
            rx in -2.0..2.0f64, ry in -2.0..2.0f64, rz in -2.0..2.0f64,
            tx in -1.0..1.0f64, ty in -1.0..1.0f64, tz in -1.0..1.0f64,
        ) {
            let base = Superellipsoid::new(0.04, 0.05, 0.06, e1, e2);
            let pose = RigidTransform::new(rotation_from_vector(&Vec3::new(rx, ry, rz)), Vec3::new(tx, ty, tz));
            let posed = base.with_pose(&pose);
            let p = base.canonical_surface_point(eta, omega);
            prop_assert!(residual(&p, &base) < 1e-9);
            prop_assert!(residual(&pose.transform_point(&p), &posed) < 1e-9);
            // an off-surface point keeps its residual under the same motion
            let q = p * 1.3 + Vec3::new(0.01, -0.02, 0.005);
            prop_assert!((residual(&q, &base) - residual(&pose.transform_point(&q), &posed)).abs() < 1e-9);
        }
    }
}
