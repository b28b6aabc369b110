//! Coarse-to-fine fruit pose: centroid frame, regularized superellipsoid fit, final frame.

use nalgebra::{DMatrix, DVector, Rotation3, SVector, Vector3};
use num_dual::gradient;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FitError, GeometryError};
use crate::geometry::{
    build_frame, centroid, row_major, rotation_to_vector, PointCloud, RigidTransform, Vec3,
};
use crate::lsq::{solve_trf, LeastSquaresProblem, Termination, TrfOptions};
use crate::superellipsoid::{param, signed_residual, Superellipsoid, EPS_MAX, EPS_MIN};

/// Smoothing under the isotropy root so it stays differentiable at `a = b = c`.
const SCALE_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBounds {
    pub axis_min: f64,
    pub axis_max: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    /// Per-component bound on the rotation vector.
    pub theta_max: f64,
}

impl Default for FitBounds {
    fn default() -> Self {
        Self {
            axis_min: 0.01,
            axis_max: 0.15,
            eps_min: EPS_MIN,
            eps_max: EPS_MAX,
            theta_max: std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Weight on `‖t − t_init‖²` (1/m²).
    pub lambda_c: f64,
    /// Weight on the isotropy term.
    pub lambda_s: f64,
    pub max_iters: usize,
    /// Relative cost change that ends the solve.
    pub tol: f64,
    pub min_points: usize,
    /// Also start from boxy/rounded exponents and a 45° twist about the fruit axis, keeping the best.
    pub multi_start: bool,
    pub bounds: FitBounds,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_c: 1e-3,
            lambda_s: 1e-4,
            max_iters: 200,
            tol: 1e-10,
            min_points: 20,
            multi_start: true,
            bounds: FitBounds::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let b = &self.bounds;
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_string()));
        if !(self.lambda_c >= 0.0 && self.lambda_s >= 0.0) {
            return bad("regularizer weights must be non-negative");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(0.0 < b.axis_min && b.axis_min < b.axis_max) {
            return bad("axis bounds must satisfy 0 < min < max");
        }
        if !(EPS_MIN <= b.eps_min && b.eps_min < b.eps_max && b.eps_max <= EPS_MAX) {
            return bad("exponent bounds must lie within (0.1, 1.9)");
        }
        if !(b.theta_max > 0.0) {
            return bad("theta bound must be positive");
        }
        Ok(())
    }

    fn param_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let b = &self.bounds;
        let mut lo = DVector::from_element(param::COUNT, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(param::COUNT, f64::INFINITY);
        for i in [param::A, param::B, param::C] {
            lo[i] = b.axis_min;
            hi[i] = b.axis_max;
        }
        for i in [param::EPS1, param::EPS2] {
            lo[i] = b.eps_min;
            hi[i] = b.eps_max;
        }
        for i in param::THETA_X..param::COUNT {
            lo[i] = -b.theta_max;
            hi[i] = b.theta_max;
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    pub stage: Stage,
    pub shape: Option<Superellipsoid>,
}

impl PoseEstimate {
    pub fn center(&self) -> Vec3 {
        self.transform.translation
    }

    /// Fruit axis (the frame's z column).
    pub fn axis(&self) -> Vec3 {
        self.transform.rotation.matrix().column(2).into_owned()
    }
}

fn isotropy(a: f64, b: f64, c: f64) -> f64 {
    ((a - b).powi(2) + (b - c).powi(2) + (c - a).powi(2) + SCALE_SMOOTHING).sqrt()
}

/// `Σ rᵢ² + λ_c ‖t − t_init‖² + λ_s E_scale`.
pub fn total_cost(
    cloud: &PointCloud,
    shape: &Superellipsoid,
    cfg: &FitConfig,
    t_init: &Vec3,
) -> Result<f64, FitError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud.into());
    }
    let params = shape.to_params();
    let data: f64 = cloud
        .points
        .iter()
        .map(|p| signed_residual(&params, p).powi(2))
        .sum();
    let center = (shape.center() - t_init).norm_squared();
    Ok(data + cfg.lambda_c * center + cfg.lambda_s * isotropy(shape.a, shape.b, shape.c))
}

/// Coarse frame at the fruit centroid with z along the fruit→peduncle axis.
pub fn coarse_pose(fruit: &PointCloud, peduncle: &PointCloud) -> Result<PoseEstimate, GeometryError> {
    let c_f = centroid(fruit)?;
    let c_p = centroid(peduncle)?;
    let rotation = build_frame(&(c_p - c_f), &c_f)?;
    Ok(PoseEstimate {
        transform: RigidTransform::new(rotation, c_f),
        stage: Stage::Coarse,
        shape: None,
    })
}

/// Rebuilds the orientation from the peduncle centroid and the refined center.
pub fn final_pose(peduncle: &PointCloud, fitted: &Superellipsoid) -> Result<PoseEstimate, GeometryError> {
    let c_p = centroid(peduncle)?;
    let t = fitted.center();
    let rotation = build_frame(&(c_p - t), &t)?;
    Ok(PoseEstimate {
        transform: RigidTransform::new(rotation, t),
        stage: Stage::Fine,
        shape: Some(*fitted),
    })
}

struct FitProblem<'a> {
    points: &'a [Vec3],
    t_init: Vec3,
    lambda_c: f64,
    lambda_s: f64,
}

impl FitProblem<'_> {
    fn rows(&self) -> usize {
        self.points.len()
            + if self.lambda_c > 0.0 { 3 } else { 0 }
            + if self.lambda_s > 0.0 { 1 } else { 0 }
    }
}

impl LeastSquaresProblem for FitProblem<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let params = x.as_slice();
        let mut out: Vec<f64> = self
            .points
            .par_iter()
            .map(|p| signed_residual(params, p))
            .collect();
        if self.lambda_c > 0.0 {
            let w = self.lambda_c.sqrt();
            for k in 0..3 {
                out.push(w * (x[param::TX + k] - self.t_init[k]));
            }
        }
        if self.lambda_s > 0.0 {
            out.push((self.lambda_s * isotropy(x[param::A], x[param::B], x[param::C])).sqrt());
        }
        DVector::from_vec(out)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = param::COUNT;
        let x_s = SVector::<f64, { param::COUNT }>::from_column_slice(x.as_slice());
        let grads: Vec<SVector<f64, { param::COUNT }>> = self
            .points
            .par_iter()
            .map(|p| gradient(|v| signed_residual(v.as_slice(), p), &x_s).1)
            .collect();
        let mut jac = DMatrix::zeros(self.rows(), n);
        for (i, g) in grads.iter().enumerate() {
            jac.row_mut(i).copy_from(&g.transpose());
        }
        let mut row = self.points.len();
        if self.lambda_c > 0.0 {
            let w = self.lambda_c.sqrt();
            for k in 0..3 {
                jac[(row, param::TX + k)] = w;
                row += 1;
            }
        }
        if self.lambda_s > 0.0 {
            let (a, b, c) = (x[param::A], x[param::B], x[param::C]);
            let e = isotropy(a, b, c);
            // d/dx √(λ E) = λ E' / (2 √(λ E)),  E' = ((a−b) − (c−a)) / E for a, etc.
            let k = self.lambda_s / (2.0 * (self.lambda_s * e).sqrt() * e);
            jac[(row, param::A)] = k * ((a - b) - (c - a));
            jac[(row, param::B)] = k * ((b - c) - (a - b));
            jac[(row, param::C)] = k * ((c - a) - (b - c));
        }
        jac
    }
}

/// `(eps1, eps2, twist about the fruit axis)` for each start; the first is the plain ellipsoid start.
const MULTI_STARTS: [(f64, f64, f64); 6] = [
    (1.0, 1.0, 0.0),
    (1.0, 1.0, std::f64::consts::FRAC_PI_4),
    (0.4, 0.4, 0.0),
    (0.4, 0.4, std::f64::consts::FRAC_PI_4),
    (1.6, 1.6, 0.0),
    (1.6, 1.6, std::f64::consts::FRAC_PI_4),
];

/// Details of a fit beyond the returned shape.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub shape: Superellipsoid,
    /// `E_total` at the initial parameters.
    pub initial_cost: f64,
    pub final_cost: f64,
    /// `E_total` at the start and after each accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

/// Initial parameters: sphere of mean point distance at the coarse pose, ellipsoid exponents.
pub fn initial_shape(fruit: &PointCloud, init: &PoseEstimate, cfg: &FitConfig) -> Superellipsoid {
    let t = init.center();
    let mean = fruit.points.iter().map(|p| (p - t).norm()).sum::<f64>() / fruit.len().max(1) as f64;
    let b = &cfg.bounds;
    let r = mean.clamp(b.axis_min, b.axis_max);
    let mut theta = rotation_to_vector(&init.transform.rotation);
    for v in theta.iter_mut() {
        *v = v.clamp(-b.theta_max, b.theta_max);
    }
    let mut shape = Superellipsoid::new(r, r, r, 1.0, 1.0);
    shape.t = t.into();
    shape.theta = theta.into();
    shape
}

pub fn fit_superellipsoid(
    fruit: &PointCloud,
    init: &PoseEstimate,
    cfg: &FitConfig,
) -> Result<Superellipsoid, FitError> {
    fit_superellipsoid_report(fruit, init, cfg).map(|r| r.shape)
}

pub fn fit_superellipsoid_report(
    fruit: &PointCloud,
    init: &PoseEstimate,
    cfg: &FitConfig,
) -> Result<FitReport, FitError> {
    cfg.validate()?;
    if init.stage != Stage::Coarse {
        return Err(FitError::NotCoarse);
    }
    if fruit.len() < cfg.min_points {
        return Err(FitError::TooFewPoints {
            got: fruit.len(),
            min: cfg.min_points,
        });
    }
    if !fruit.is_finite() {
        return Err(FitError::SolverDiverged);
    }
    let t_init = init.center();
    let problem = FitProblem {
        points: &fruit.points,
        t_init,
        lambda_c: cfg.lambda_c,
        lambda_s: cfg.lambda_s,
    };
    let (lo, hi) = cfg.param_bounds();
    let opts = TrfOptions {
        max_iterations: cfg.max_iters,
        max_evaluations: cfg.max_iters * 10,
        ftol: cfg.tol,
        xtol: 1e-12,
        gtol: 1e-14,
    };
    let base = initial_shape(fruit, init, cfg);
    let starts: &[(f64, f64, f64)] = if cfg.multi_start {
        &MULTI_STARTS
    } else {
        &MULTI_STARTS[..1]
    };
    let mut best: Option<crate::lsq::TrfReport> = None;
    for &(e1, e2, twist) in starts {
        let mut start = base;
        start.eps1 = e1.clamp(cfg.bounds.eps_min, cfg.bounds.eps_max);
        start.eps2 = e2.clamp(cfg.bounds.eps_min, cfg.bounds.eps_max);
        if twist != 0.0 {
            let r = init.transform.rotation * Rotation3::from_axis_angle(&Vector3::z_axis(), twist);
            let th = rotation_to_vector(&r);
            start.theta = th.map(|v| v.clamp(-cfg.bounds.theta_max, cfg.bounds.theta_max)).into();
        }
        let x0 = DVector::from_column_slice(&start.to_params());
        let rep = match solve_trf(&problem, &x0, &lo, &hi, &opts) {
            Ok(r) if r.cost.is_finite() => r,
            _ => continue,
        };
        if best.as_ref().is_none_or(|b| rep.cost < b.cost) {
            best = Some(rep);
        }
    }
    let rep = best.ok_or(FitError::SolverDiverged)?;
    let shape = Superellipsoid::from_params(rep.x.as_slice());
    let cost_history: Vec<f64> = rep.cost_history.iter().map(|c| 2.0 * c).collect();
    log::debug!(
        "superellipsoid fit: {} iterations, cost {:.3e} -> {:.3e} ({:?})",
        rep.iterations,
        cost_history[0],
        2.0 * rep.cost,
        rep.termination
    );
    Ok(FitReport {
        shape,
        initial_cost: cost_history[0],
        final_cost: 2.0 * rep.cost,
        cost_history,
        iterations: rep.iterations,
        termination: rep.termination,
    })
}

/// Analytic Jacobian of the residual vector, exposed for verification.
pub fn residual_jacobian(
    points: &[Vec3],
    shape: &Superellipsoid,
    cfg: &FitConfig,
    t_init: &Vec3,
) -> (DVector<f64>, DMatrix<f64>) {
    let problem = FitProblem {
        points,
        t_init: *t_init,
        lambda_c: cfg.lambda_c,
        lambda_s: cfg.lambda_s,
    };
    let x = DVector::from_column_slice(&shape.to_params());
    (problem.residuals(&x), problem.jacobian(&x))
}

/// Residual vector for arbitrary parameters (same layout as [`residual_jacobian`]).
pub fn residual_vector(points: &[Vec3], params: &[f64], cfg: &FitConfig, t_init: &Vec3) -> DVector<f64> {
    let problem = FitProblem {
        points,
        t_init: *t_init,
        lambda_c: cfg.lambda_c,
        lambda_s: cfg.lambda_s,
    };
    problem.residuals(&DVector::from_column_slice(params))
}

/// Output record of the `fit` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub t: [f64; 3],
    pub theta: [f64; 3],
    #[serde(rename = "R")]
    pub r: [f64; 9],
}

impl FitSummary {
    pub fn new(shape: &Superellipsoid, pose: &PoseEstimate) -> Self {
        Self {
            a: shape.a,
            b: shape.b,
            c: shape.c,
            eps1: shape.eps1,
            eps2: shape.eps2,
            t: pose.center().into(),
            theta: shape.theta,
            r: row_major(&pose.transform.rotation),
        }
    }
}
