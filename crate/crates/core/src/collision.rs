//! Primitive collision bodies and pairwise queries.

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CollisionBody {
    Capsule {
        p0: Vec3,
        p1: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
        rotation: Rotation3<f64>,
    },
    /// Infinite, zero-thickness plane.
    Plane { point: Vec3, normal: Vec3 },
}

impl CollisionBody {
    pub fn capsule(p0: Vec3, p1: Vec3, radius: f64) -> Self {
        CollisionBody::Capsule { p0, p1, radius }
    }

    pub fn aabb(center: Vec3, half_extents: Vec3) -> Self {
        CollisionBody::Box {
            center,
            half_extents,
            rotation: Rotation3::identity(),
        }
    }

    pub fn plane(point: Vec3, normal: Vec3) -> Self {
        CollisionBody::Plane {
            point,
            normal: normal.normalize(),
        }
    }

    /// Grows a capsule's radius or a box's half-extents; planes are unchanged.
    pub fn inflated(&self, margin: f64) -> Self {
        match *self {
            CollisionBody::Capsule { p0, p1, radius } => CollisionBody::Capsule {
                p0,
                p1,
                radius: radius + margin,
            },
            CollisionBody::Box {
                center,
                half_extents,
                rotation,
            } => CollisionBody::Box {
                center,
                half_extents: half_extents.add_scalar(margin),
                rotation,
            },
            p => p,
        }
    }
}

/// Closest points between segments `[p0, p1]` and `[q0, q1]`, as parameters `(s, t)`.
pub fn segment_closest_params(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> (f64, f64) {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    const EPS: f64 = 1e-18;
    if a <= EPS && e <= EPS {
        return (0.0, 0.0);
    }
    if a <= EPS {
        return (0.0, (f / e).clamp(0.0, 1.0));
    }
    let c = d1.dot(&r);
    if e <= EPS {
        return ((-c / a).clamp(0.0, 1.0), 0.0);
    }
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > EPS * a * e {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

pub fn segment_distance(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> f64 {
    let (s, t) = segment_closest_params(p0, p1, q0, q1);
    let a = p0 + (p1 - p0) * s;
    let b = q0 + (q1 - q0) * t;
    (a - b).norm()
}

fn point_box_distance(p: &Vec3, center: &Vec3, half: &Vec3, rot: &Rotation3<f64>) -> f64 {
    let local = rot.inverse() * (p - center);
    let d = Vec3::new(
        (local.x.abs() - half.x).max(0.0),
        (local.y.abs() - half.y).max(0.0),
        (local.z.abs() - half.z).max(0.0),
    );
    d.norm()
}

/// Distance from a segment to a solid box (0 when they touch); convex in the segment parameter.
fn segment_box_distance(p0: &Vec3, p1: &Vec3, center: &Vec3, half: &Vec3, rot: &Rotation3<f64>) -> f64 {
    let f = |s: f64| point_box_distance(&(p0 + (p1 - p0) * s), center, half, rot);
    let (mut lo, mut hi) = (0.0, 1.0);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2)
}

fn box_vertices(center: &Vec3, half: &Vec3, rot: &Rotation3<f64>) -> [Vec3; 8] {
    let mut out = [Vec3::zeros(); 8];
    for (i, v) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
        *v = center + rot * Vec3::new(sx * half.x, sy * half.y, sz * half.z);
    }
    out
}

/// Separating-axis test for two oriented boxes.
fn boxes_overlap(
    ca: &Vec3,
    ha: &Vec3,
    ra: &Rotation3<f64>,
    cb: &Vec3,
    hb: &Vec3,
    rb: &Rotation3<f64>,
) -> bool {
    let ma: &Matrix3<f64> = ra.matrix();
    let mb: &Matrix3<f64> = rb.matrix();
    let mut axes: Vec<Vec3> = Vec::with_capacity(15);
    for i in 0..3 {
        axes.push(ma.column(i).into_owned());
        axes.push(mb.column(i).into_owned());
    }
    for i in 0..3 {
        for j in 0..3 {
            let c = ma.column(i).cross(&mb.column(j));
            if c.norm_squared() > 1e-12 {
                axes.push(c.normalize());
            }
        }
    }
    let d = cb - ca;
    axes.iter().all(|ax| {
        let proj = |h: &Vec3, m: &Matrix3<f64>| {
            (0..3).map(|k| h[k] * m.column(k).dot(ax).abs()).sum::<f64>()
        };
        d.dot(ax).abs() <= proj(ha, ma) + proj(hb, mb)
    })
}

/// Signed clearance for pairs involving a capsule; negative means overlap.
///
/// A plane is treated as a thin wall: a capsule whose axis crosses it is in collision.
pub fn clearance(a: &CollisionBody, b: &CollisionBody) -> Option<f64> {
    use CollisionBody::*;
    match (a, b) {
        (Capsule { p0, p1, radius: r1 }, Capsule { p0: q0, p1: q1, radius: r2 }) => {
            Some(segment_distance(p0, p1, q0, q1) - r1 - r2)
        }
        (Capsule { p0, p1, radius }, Plane { point, normal })
        | (Plane { point, normal }, Capsule { p0, p1, radius }) => {
            let d0 = (p0 - point).dot(normal);
            let d1 = (p1 - point).dot(normal);
            if d0 * d1 <= 0.0 {
                Some(-d0.abs().min(d1.abs()) - radius)
            } else {
                Some(d0.abs().min(d1.abs()) - radius)
            }
        }
        (
            Capsule { p0, p1, radius },
            Box {
                center,
                half_extents,
                rotation,
            },
        )
        | (
            Box {
                center,
                half_extents,
                rotation,
            },
            Capsule { p0, p1, radius },
        ) => Some(segment_box_distance(p0, p1, center, half_extents, rotation) - radius),
        _ => None,
    }
}

pub fn bodies_collide(a: &CollisionBody, b: &CollisionBody) -> bool {
    use CollisionBody::*;
    if let Some(d) = clearance(a, b) {
        return d < 0.0;
    }
    match (a, b) {
        (
            Box {
                center: ca,
                half_extents: ha,
                rotation: ra,
            },
            Box {
                center: cb,
                half_extents: hb,
                rotation: rb,
            },
        ) => boxes_overlap(ca, ha, ra, cb, hb, rb),
        (
            Box {
                center,
                half_extents,
                rotation,
            },
            Plane { point, normal },
        )
        | (
            Plane { point, normal },
            Box {
                center,
                half_extents,
                rotation,
            },
        ) => {
            let sides: Vec<f64> = box_vertices(center, half_extents, rotation)
                .iter()
                .map(|v| (v - point).dot(normal))
                .collect();
            let min = sides.iter().copied().fold(f64::INFINITY, f64::min);
            let max = sides.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            min <= 0.0 && max >= 0.0
        }
        (Plane { normal: n1, point: p1 }, Plane { normal: n2, point: p2 }) => {
            n1.cross(n2).norm() > 1e-12 || (p2 - p1).dot(n1).abs() < 1e-12
        }
        _ => false,
    }
}

/// True iff any body of `a` overlaps any body of `b`.
pub fn in_collision(a: &[CollisionBody], b: &[CollisionBody]) -> bool {
    a.iter().any(|x| b.iter().any(|y| bodies_collide(x, y)))
}

/// Smallest pairwise clearance among capsule pairs (`+∞` when there are none).
pub fn min_clearance(a: &[CollisionBody], b: &[CollisionBody]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().filter_map(move |y| clearance(x, y)))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cap(a: [f64; 3], b: [f64; 3], r: f64) -> CollisionBody {
        CollisionBody::capsule(Vec3::from(a), Vec3::from(b), r)
    }

    #[test]
    fn parallel_capsules() {
        let a = cap([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 0.05);
        let far = cap([0.2, 0.0, 0.0], [0.2, 0.0, 1.0], 0.05);
        let near = cap([0.08, 0.0, 0.0], [0.08, 0.0, 1.0], 0.05);
        assert!(!in_collision(&[a], &[far]));
        assert!(in_collision(&[a], &[near]));
        assert_relative_eq!(clearance(&a, &far).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn capsule_crossing_plane() {
        let wall = CollisionBody::plane(Vec3::zeros(), Vec3::x());
        let crossing = cap([-0.5, 0.0, 0.0], [0.5, 0.0, 0.3], 0.01);
        let beside = cap([0.1, 0.0, 0.0], [0.5, 0.0, 0.3], 0.01);
        let touching = cap([0.005, 0.0, 0.0], [0.5, 0.0, 0.3], 0.01);
        assert!(in_collision(&[crossing], &[wall]));
        assert!(!in_collision(&[beside], &[wall]));
        assert!(in_collision(&[touching], &[wall]));
    }

    #[test]
    fn capsule_against_box() {
        let b = CollisionBody::aabb(Vec3::zeros(), Vec3::new(0.1, 0.1, 0.1));
        assert!(in_collision(&[cap([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.01)], &[b]));
        let c = cap([0.2, -1.0, 0.0], [0.2, 1.0, 0.0], 0.05);
        assert_relative_eq!(clearance(&c, &b).unwrap(), 0.05, epsilon = 1e-9);
        let rotated = CollisionBody::Box {
            center: Vec3::zeros(),
            half_extents: Vec3::new(0.1, 0.1, 0.1),
            rotation: Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_4),
        };
        // the rotated corner reaches x = 0.1·√2
        let c = cap([0.15, -1.0, 0.0], [0.15, 1.0, 0.0], 0.01);
        assert!(in_collision(&[c], &[rotated]));
        assert!(!in_collision(&[c], &[b]));
    }

    #[test]
    fn box_pairs() {
        let a = CollisionBody::aabb(Vec3::zeros(), Vec3::new(0.1, 0.1, 0.1));
        let b = CollisionBody::aabb(Vec3::new(0.22, 0.0, 0.0), Vec3::new(0.1, 0.1, 0.1));
        assert!(!bodies_collide(&a, &b));
        // rotated by 45° its half-width along x grows to 0.1·√2
        let r = CollisionBody::Box {
            center: Vec3::new(0.22, 0.0, 0.0),
            half_extents: Vec3::new(0.1, 0.1, 0.1),
            rotation: Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_4),
        };
        assert!(bodies_collide(&a, &r));
        let p = CollisionBody::plane(Vec3::new(0.05, 0.0, 0.0), Vec3::x());
        assert!(bodies_collide(&a, &p));
        assert!(!bodies_collide(&b, &p));
    }

    fn arb_capsule() -> impl Strategy<Value = CollisionBody> {
        (
            prop::array::uniform3(-1.0..1.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            0.01..0.3f64,
        )
            .prop_map(|(a, b, r)| cap(a, b, r))
    }

    fn arb_box() -> impl Strategy<Value = CollisionBody> {
        (
            prop::array::uniform3(-1.0..1.0f64),
            prop::array::uniform3(0.01..0.4f64),
            prop::array::uniform3(-3.0..3.0f64),
        )
            .prop_map(|(c, h, r)| CollisionBody::Box {
                center: Vec3::from(c),
                half_extents: Vec3::from(h),
                rotation: Rotation3::new(Vec3::from(r)),
            })
    }

    fn arb_body() -> impl Strategy<Value = CollisionBody> {
        prop_oneof![
            arb_capsule(),
            arb_box(),
            (prop::array::uniform3(-1.0..1.0f64), prop::array::uniform3(-1.0..1.0f64))
                .prop_filter("normal", |(_, n)| Vec3::from(*n).norm() > 0.1)
                .prop_map(|(p, n)| CollisionBody::plane(Vec3::from(p), Vec3::from(n))),
        ]
    }

    proptest! {
        #[test]
        fn collision_is_symmetric(a in prop::collection::vec(arb_body(), 1..4), b in prop::collection::vec(arb_body(), 1..4)) {
            prop_assert_eq!(in_collision(&a, &b), in_collision(&b, &a));
        }

        #[test]
        fn segment_distance_matches_brute_force(
            p0 in prop::array::uniform3(-1.0..1.0f64), p1 in prop::array::uniform3(-1.0..1.0f64),
            q0 in prop::array::uniform3(-1.0..1.0f64), q1 in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let (p0, p1, q0, q1) = (Vec3::from(p0), Vec3::from(p1), Vec3::from(q0), Vec3::from(q1));
            let d = segment_distance(&p0, &p1, &q0, &q1);
            let at = |s: f64, t: f64| ((p0 + (p1 - p0) * s) - (q0 + (q1 - q0) * t)).norm();
            // 1000 sampled parameter pairs, then alternating exact 1-D refinement from the best
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for i in 0..40 {
                for j in 0..25 {
                    let (s, t) = (i as f64 / 39.0, j as f64 / 24.0);
                    let v = at(s, t);
                    prop_assert!(d <= v + 1e-12);
                    if v < best.0 { best = (v, s, t); }
                }
            }
            let (_, mut s, mut t) = best;
            let project = |x0: Vec3, x1: Vec3, p: Vec3| {
                let d = x1 - x0;
                let l = d.norm_squared();
                if l < 1e-18 { 0.0 } else { ((p - x0).dot(&d) / l).clamp(0.0, 1.0) }
            };
            for _ in 0..20000 {
                t = project(q0, q1, p0 + (p1 - p0) * s);
                s = project(p0, p1, q0 + (q1 - q0) * t);
            }
            prop_assert!((at(s, t) - d).abs() < 1e-6, "{} vs {}", at(s, t), d);
        }
    }
}
