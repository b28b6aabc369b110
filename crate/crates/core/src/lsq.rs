//! Bounded nonlinear least squares with a trust-region reflective (TRF) method.
//!
//! Minimizes `½‖f(x)‖²` subject to `lower < x < upper`. Iterates stay strictly feasible.
//! Each iteration applies Coleman–Li scaling to the variables, solves the trust-region
//! subproblem exactly through an SVD of the augmented Jacobian, and picks the best of three
//! candidate steps: the (truncated) trust-region step, its reflection off the first bound
//! hit, and a scaled anti-gradient step.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub trait LeastSquaresProblem {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrfOptions {
    pub max_iterations: usize,
    pub max_evaluations: usize,
    /// Relative cost reduction below which the solve stops.
    pub ftol: f64,
    pub xtol: f64,
    pub gtol: f64,
}

impl Default for TrfOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            max_evaluations: 2000,
            ftol: 1e-10,
            xtol: 1e-10,
            gtol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    MaxEvaluations,
    Gradient,
    CostChange,
    StepSize,
    CostAndStep,
}

#[derive(Debug, Clone)]
pub struct TrfReport {
    pub x: DVector<f64>,
    /// `½‖f(x)‖²`
    pub cost: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Cost at the start and after every accepted step.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LsqError {
    #[error("residuals are not finite at the initial point")]
    NonFiniteStart,
    #[error("bounds are inconsistent or the problem dimension does not match")]
    BadBounds,
}

fn cost_of(f: &DVector<f64>) -> f64 {
    0.5 * f.norm_squared()
}

/// Moves `x` strictly inside `(lower, upper)` by a relative margin.
pub fn make_strictly_feasible(
    x: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    rstep: f64,
) -> DVector<f64> {
    let mut out = x.clone();
    for i in 0..x.len() {
        let (lb, ub) = (lower[i], upper[i]);
        if rstep == 0.0 {
            if out[i] <= lb {
                out[i] = next_toward(lb, ub);
            } else if out[i] >= ub {
                out[i] = next_toward(ub, lb);
            }
        } else if out[i] <= lb {
            out[i] = lb + rstep * lb.abs().max(1.0);
        } else if out[i] >= ub {
            out[i] = ub - rstep * ub.abs().max(1.0);
        }
        if out[i] < lb || out[i] > ub {
            out[i] = 0.5 * (lb + ub);
        }
    }
    out
}

fn next_toward(from: f64, to: f64) -> f64 {
    if from == to || !from.is_finite() {
        return from;
    }
    let bits = from.to_bits();
    let up = to > from;
    if from == 0.0 {
        if up {
            f64::from_bits(1)
        } else {
            -f64::from_bits(1)
        }
    } else if (from > 0.0) == up {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

fn in_bounds(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> bool {
    x.iter()
        .zip(lower.iter().zip(upper.iter()))
        .all(|(v, (l, u))| *v >= *l && *v <= *u)
}

/// Largest `t` with `x + t s` inside the box, plus per-component flags of the bounds hit.
fn step_size_to_bound(
    x: &DVector<f64>,
    s: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> (f64, Vec<bool>) {
    let steps: Vec<f64> = (0..x.len())
        .map(|i| {
            if s[i] == 0.0 {
                f64::INFINITY
            } else {
                ((lower[i] - x[i]) / s[i]).max((upper[i] - x[i]) / s[i])
            }
        })
        .collect();
    let min = steps.iter().copied().fold(f64::INFINITY, f64::min);
    let hits = steps.iter().map(|&t| t == min && min.is_finite()).collect();
    (min, hits)
}

/// Parameter values where `x + t s` crosses the sphere of radius `delta`; requires `‖x‖ ≤ delta`.
fn intersect_trust_region(x: &DVector<f64>, s: &DVector<f64>, delta: f64) -> (f64, f64) {
    let a = s.dot(s);
    if a == 0.0 {
        return (0.0, 0.0);
    }
    let b = x.dot(s);
    let c = (x.dot(x) - delta * delta).min(0.0);
    let d = (b * b - a * c).max(0.0).sqrt();
    let q = -(b + d.copysign(b));
    if q == 0.0 {
        return (0.0, 0.0);
    }
    let (t1, t2) = (q / a, c / q);
    if t1 < t2 {
        (t1, t2)
    } else {
        (t2, t1)
    }
}

/// Coefficients of `q(t) = a t² + b t + c` for the model along `s0 + t s`.
fn quadratic_1d(
    j: &DMatrix<f64>,
    g: &DVector<f64>,
    s: &DVector<f64>,
    diag: &DVector<f64>,
    s0: Option<&DVector<f64>>,
) -> (f64, f64, f64) {
    let v = j * s;
    let a = 0.5 * (v.dot(&v) + s.component_mul(diag).dot(s));
    let mut b = g.dot(s);
    let mut c = 0.0;
    if let Some(s0) = s0 {
        let u = j * s0;
        b += u.dot(&v) + s0.component_mul(diag).dot(s);
        c = 0.5 * u.dot(&u) + g.dot(s0) + 0.5 * s0.component_mul(diag).dot(s0);
    }
    (a, b, c)
}

fn minimize_quadratic_1d(a: f64, b: f64, lo: f64, hi: f64, c: f64) -> (f64, f64) {
    let mut ts = vec![lo, hi];
    if a != 0.0 {
        let ext = -0.5 * b / a;
        if lo < ext && ext < hi {
            ts.push(ext);
        }
    }
    ts.into_iter()
        .map(|t| (t, t * (a * t + b) + c))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap_or((lo, c))
}

fn evaluate_quadratic(j: &DMatrix<f64>, g: &DVector<f64>, s: &DVector<f64>, diag: &DVector<f64>) -> f64 {
    let js = j * s;
    0.5 * (js.dot(&js) + s.component_mul(diag).dot(s)) + s.dot(g)
}

/// Exact trust-region subproblem on the SVD `J = U diag(s) Vᵀ`; `uf = Uᵀ f`.
fn solve_trust_region(
    uf: &DVector<f64>,
    s: &DVector<f64>,
    v: &DMatrix<f64>,
    m: usize,
    delta: f64,
    initial_alpha: f64,
) -> (DVector<f64>, f64) {
    let n = s.len();
    let suf = s.component_mul(uf);
    let s_max = s.max();
    let s_min = s.min();
    let full_rank = m >= n && s_min > f64::EPSILON * m as f64 * s_max;
    if full_rank {
        let p = -(v * uf.zip_map(s, |u, si| u / si));
        if p.norm() <= delta {
            return (p, 0.0);
        }
    }
    let phi = |alpha: f64| {
        let denom = s.map(|si| si * si + alpha);
        let p_norm = suf.zip_map(&denom, |x, d| x / d).norm();
        let prime = -suf
            .zip_map(&denom, |x, d| x * x / (d * d * d))
            .sum()
            / p_norm;
        (p_norm - delta, prime)
    };
    let mut alpha_upper = suf.norm() / delta;
    let mut alpha_lower = if full_rank {
        let (f0, d0) = phi(0.0);
        -f0 / d0
    } else {
        0.0
    };
    let mut alpha = if initial_alpha == 0.0 && !full_rank || initial_alpha == 0.0 {
        (0.001 * alpha_upper).max((alpha_lower * alpha_upper).sqrt())
    } else {
        initial_alpha
    };
    for _ in 0..10 {
        if alpha < alpha_lower || alpha > alpha_upper {
            alpha = (0.001 * alpha_upper).max((alpha_lower * alpha_upper).sqrt());
        }
        let (f, fp) = phi(alpha);
        if f < 0.0 {
            alpha_upper = alpha;
        }
        let ratio = f / fp;
        alpha_lower = alpha_lower.max(alpha - ratio);
        alpha -= (f + delta) * ratio / delta;
        if f.abs() < 0.01 * delta {
            break;
        }
    }
    let denom = s.map(|si| si * si + alpha);
    let mut p = -(v * suf.zip_map(&denom, |x, d| x / d));
    let norm = p.norm();
    if norm > 0.0 {
        p *= delta / norm;
    }
    (p, alpha)
}

/// Runs the bounded solve from `x0` (moved strictly inside the bounds first).
pub fn solve_trf<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &TrfOptions,
) -> Result<TrfReport, LsqError> {
    let n = x0.len();
    if lower.len() != n || upper.len() != n || (0..n).any(|i| lower[i] >= upper[i]) {
        return Err(LsqError::BadBounds);
    }
    let mut x = make_strictly_feasible(x0, lower, upper, 1e-10);
    let mut f = problem.residuals(&x);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(LsqError::NonFiniteStart);
    }
    let m = f.len();
    let mut evaluations = 1;
    let mut jac = problem.jacobian(&x);
    let mut cost = cost_of(&f);
    let mut g = jac.transpose() * &f;
    let mut cost_history = vec![cost];

    let col_norms = |j: &DMatrix<f64>| DVector::from_iterator(n, j.column_iter().map(|c| c.norm()));
    let mut scale_inv = col_norms(&jac).map(|v| if v == 0.0 { 1.0 } else { v });

    let cl_scaling = |x: &DVector<f64>, g: &DVector<f64>| {
        let mut v = DVector::from_element(n, 1.0);
        let mut dv = DVector::zeros(n);
        for i in 0..n {
            if g[i] < 0.0 && upper[i].is_finite() {
                v[i] = upper[i] - x[i];
                dv[i] = -1.0;
            } else if g[i] > 0.0 && lower[i].is_finite() {
                v[i] = x[i] - lower[i];
                dv[i] = 1.0;
            }
        }
        (v, dv)
    };

    let (mut v, dv) = cl_scaling(&x, &g);
    for i in 0..n {
        if dv[i] != 0.0 {
            v[i] *= scale_inv[i];
        }
    }
    let mut delta = x.zip_map(&scale_inv, |xi, si| xi * si)
        .zip_map(&v, |a, vi| a / vi.sqrt())
        .norm();
    if delta == 0.0 || !delta.is_finite() {
        delta = 1.0;
    }

    let mut alpha = 0.0;
    let mut iterations = 0;
    let termination;
    loop {
        let (mut v, dv) = cl_scaling(&x, &g);
        let g_norm = g.component_mul(&v).amax();
        if g_norm < opts.gtol {
            termination = Termination::Gradient;
            break;
        }
        if evaluations >= opts.max_evaluations {
            termination = Termination::MaxEvaluations;
            break;
        }
        if iterations >= opts.max_iterations {
            termination = Termination::MaxIterations;
            break;
        }
        let scale = scale_inv.map(|s| 1.0 / s);
        for i in 0..n {
            if dv[i] != 0.0 {
                v[i] *= scale_inv[i];
            }
        }
        let d = v.map(f64::sqrt).component_mul(&scale);
        let diag_h = g.component_mul(&dv).component_mul(&scale);
        let g_h = d.component_mul(&g);

        let mut j_h = jac.clone();
        for (k, mut col) in j_h.column_iter_mut().enumerate() {
            col *= d[k];
        }
        let mut j_aug = DMatrix::zeros(m + n, n);
        j_aug.rows_mut(0, m).copy_from(&j_h);
        for i in 0..n {
            j_aug[(m + i, i)] = diag_h[i].max(0.0).sqrt();
        }
        let mut f_aug = DVector::zeros(m + n);
        f_aug.rows_mut(0, m).copy_from(&f);
        let svd = j_aug.svd(true, true);
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            termination = Termination::MaxIterations;
            break;
        };
        let s_vals = svd.singular_values;
        let v_mat = v_t.transpose();
        let uf = u.transpose() * &f_aug;

        let theta = (1.0 - g_norm).max(0.995);
        let mut actual_reduction = -1.0;
        let mut x_new = x.clone();
        let mut f_new = f.clone();
        let mut cost_new = cost;
        let mut stop = None;
        while actual_reduction <= 0.0 && evaluations < opts.max_evaluations {
            let (p_h, a) = solve_trust_region(&uf, &s_vals, &v_mat, m + n, delta, alpha);
            alpha = a;
            let p = d.component_mul(&p_h);
            let (step, step_h, predicted) =
                select_step(&x, &j_h, &diag_h, &g_h, p, p_h, &d, delta, lower, upper, theta);
            x_new = make_strictly_feasible(&(&x + &step), lower, upper, 0.0);
            f_new = problem.residuals(&x_new);
            evaluations += 1;
            let step_h_norm = step_h.norm();
            if f_new.iter().any(|v| !v.is_finite()) {
                delta = 0.25 * step_h_norm;
                if delta == 0.0 {
                    break;
                }
                continue;
            }
            cost_new = cost_of(&f_new);
            actual_reduction = cost - cost_new;
            let ratio = if predicted > 0.0 {
                actual_reduction / predicted
            } else if predicted == 0.0 && actual_reduction == 0.0 {
                1.0
            } else {
                0.0
            };
            let delta_new = if ratio < 0.25 {
                0.25 * step_h_norm
            } else if ratio > 0.75 && step_h_norm > 0.95 * delta {
                2.0 * delta
            } else {
                delta
            };
            let ftol_ok = actual_reduction < opts.ftol * cost && ratio > 0.25;
            let xtol_ok = step.norm() < opts.xtol * (opts.xtol + x.norm());
            stop = match (ftol_ok, xtol_ok) {
                (true, true) => Some(Termination::CostAndStep),
                (true, false) => Some(Termination::CostChange),
                (false, true) => Some(Termination::StepSize),
                _ => None,
            };
            if stop.is_some() {
                break;
            }
            if delta_new > 0.0 {
                alpha *= delta / delta_new;
            }
            delta = delta_new;
            if delta == 0.0 {
                break;
            }
        }
        if actual_reduction > 0.0 {
            x = x_new;
            f = f_new;
            cost = cost_new;
            cost_history.push(cost);
            jac = problem.jacobian(&x);
            g = jac.transpose() * &f;
            let norms = col_norms(&jac);
            scale_inv = scale_inv.zip_map(&norms, f64::max);
        }
        iterations += 1;
        if let Some(t) = stop {
            termination = t;
            break;
        }
        if delta == 0.0 || !delta.is_finite() {
            termination = Termination::StepSize;
            break;
        }
    }

    Ok(TrfReport {
        x,
        cost,
        iterations,
        evaluations,
        cost_history,
        termination,
    })
}

#[allow(clippy::too_many_arguments)]
fn select_step(
    x: &DVector<f64>,
    j_h: &DMatrix<f64>,
    diag_h: &DVector<f64>,
    g_h: &DVector<f64>,
    mut p: DVector<f64>,
    mut p_h: DVector<f64>,
    d: &DVector<f64>,
    delta: f64,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    theta: f64,
) -> (DVector<f64>, DVector<f64>, f64) {
    if in_bounds(&(x + &p), lower, upper) {
        let value = evaluate_quadratic(j_h, g_h, &p_h, diag_h);
        return (p, p_h, -value);
    }
    let (p_stride, hits) = step_size_to_bound(x, &p, lower, upper);

    // Reflection of the trust-region step off the bound it hits first.
    let mut r_h = p_h.clone();
    for (i, hit) in hits.iter().enumerate() {
        if *hit {
            r_h[i] = -r_h[i];
        }
    }
    let mut r = d.component_mul(&r_h);
    p *= p_stride;
    p_h *= p_stride;
    let x_on_bound = x + &p;
    let (_, to_tr) = intersect_trust_region(&p_h, &r_h, delta);
    let (to_bound, _) = step_size_to_bound(&x_on_bound, &r, lower, upper);
    let r_stride = to_bound.min(to_tr);
    let (r_lo, r_hi) = if r_stride > 0.0 {
        let lo = (1.0 - theta) * p_stride / r_stride;
        let hi = if r_stride == to_bound {
            theta * to_bound
        } else {
            to_tr
        };
        (lo, hi)
    } else {
        (0.0, -1.0)
    };
    let r_value = if r_lo <= r_hi {
        let (a, b, c) = quadratic_1d(j_h, g_h, &r_h, diag_h, Some(&p_h));
        let (t, value) = minimize_quadratic_1d(a, b, r_lo, r_hi, c);
        r_h = &r_h * t + &p_h;
        r = d.component_mul(&r_h);
        value
    } else {
        f64::INFINITY
    };

    p *= theta;
    p_h *= theta;
    let p_value = evaluate_quadratic(j_h, g_h, &p_h, diag_h);

    // Scaled anti-gradient.
    let mut ag_h = -g_h;
    let mut ag = d.component_mul(&ag_h);
    let ag_norm = ag_h.norm();
    let to_tr = if ag_norm > 0.0 { delta / ag_norm } else { 0.0 };
    let (to_bound, _) = step_size_to_bound(x, &ag, lower, upper);
    let ag_max = if to_bound < to_tr {
        theta * to_bound
    } else {
        to_tr
    };
    let (a, b, _) = quadratic_1d(j_h, g_h, &ag_h, diag_h, None);
    let (ag_stride, ag_value) = minimize_quadratic_1d(a, b, 0.0, ag_max, 0.0);
    ag_h *= ag_stride;
    ag *= ag_stride;

    if p_value < r_value && p_value < ag_value {
        (p, p_h, -p_value)
    } else if r_value < p_value && r_value < ag_value {
        (r, r_h, -r_value)
    } else {
        (ag, ag_h, -ag_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
        }
    }

    fn inf_box(n: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    #[test]
    fn unbounded_rosenbrock_converges() {
        let (lo, hi) = inf_box(2);
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let rep = solve_trf(&Rosenbrock, &x0, &lo, &hi, &TrfOptions::default()).unwrap();
        assert_relative_eq!(rep.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(rep.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn bounded_rosenbrock_stops_on_active_bound() {
        // With x0 ≤ 0.5 the constrained minimum sits on the bound at (0.5, 0.25).
        let lo = DVector::from_vec(vec![-2.0, -2.0]);
        let hi = DVector::from_vec(vec![0.5, 2.0]);
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let rep = solve_trf(&Rosenbrock, &x0, &lo, &hi, &TrfOptions::default()).unwrap();
        assert!(rep.x[0] < 0.5);
        assert_relative_eq!(rep.x[0], 0.5, epsilon = 1e-5);
        assert_relative_eq!(rep.x[1], 0.25, epsilon = 1e-4);
    }

    #[test]
    fn accepted_costs_never_increase() {
        let lo = DVector::from_vec(vec![-2.0, -0.5]);
        let hi = DVector::from_vec(vec![2.0, 0.8]);
        let x0 = DVector::from_vec(vec![-1.5, 0.7]);
        let rep = solve_trf(&Rosenbrock, &x0, &lo, &hi, &TrfOptions::default()).unwrap();
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.x.iter().zip(lo.iter().zip(hi.iter())).all(|(x, (l, h))| x > l && x < h));
    }

    #[test]
    fn linear_problem_solved_in_one_step() {
        struct Linear;
        impl LeastSquaresProblem for Linear {
            fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![x[0] - 3.0, 2.0 * x[1] + 1.0, x[0] + x[1]])
            }
            fn jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0])
            }
        }
        let (lo, hi) = inf_box(2);
        let rep = solve_trf(&Linear, &DVector::zeros(2), &lo, &hi, &TrfOptions::default()).unwrap();
        // normal equations: [[2,1],[1,5]] x = [3,-2]
        assert_relative_eq!(rep.x[0], 17.0 / 9.0, epsilon = 1e-8);
        assert_relative_eq!(rep.x[1], -7.0 / 9.0, epsilon = 1e-8);
    }

    #[test]
    fn rejects_bad_bounds() {
        let lo = DVector::from_vec(vec![1.0, 0.0]);
        let hi = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(
            solve_trf(&Rosenbrock, &DVector::zeros(2), &lo, &hi, &TrfOptions::default()).unwrap_err(),
            LsqError::BadBounds
        );
    }
}
