//! Bound-aware unconstrained minimization shared by both estimation stages.
//!
//! Positive parameters are handled through a log transform and correlations
//! through arctanh, so the engine itself is unconstrained. The default
//! method builds a local quadratic model from function values only
//! (finite-difference gradient, secant-updated curvature) and takes dogleg
//! steps inside a trust region; a quasi-Newton line-search mode is available
//! as a faster alternative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-coordinate reparameterization into unconstrained space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// Positive parameters: `y = ln(x)`.
    Log,
    /// Correlations in (-1, 1): `y = arctanh(x)`.
    Arctanh,
    Identity,
}

impl Transform {
    pub fn to_unconstrained(self, x: f64) -> f64 {
        match self {
            Transform::Log => x.ln(),
            Transform::Arctanh => x.atanh(),
            Transform::Identity => x,
        }
    }

    pub fn to_natural(self, y: f64) -> f64 {
        match self {
            Transform::Log => y.exp(),
            Transform::Arctanh => y.tanh(),
            Transform::Identity => y,
        }
    }
}

/// Objective over natural (untransformed) parameters. `None` marks an
/// infeasible point (e.g. covariance not positive definite).
pub type Objective<'a> = dyn Fn(&[f64]) -> Option<f64> + 'a;

pub struct OptProblem<'a> {
    pub dim: usize,
    pub transforms: Vec<Transform>,
    pub objective: &'a Objective<'a>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Quadratic-model trust region driven by function values (default).
    TrustRegion,
    /// BFGS with numeric gradients and backtracking line search.
    QuasiNewton,
}

#[derive(Debug, Clone)]
pub struct OptOptions {
    pub method: Method,
    pub max_iter: usize,
    /// Relative objective-change tolerance on accepted steps.
    pub tol_rel: f64,
    /// Trust-region radius floor.
    pub min_radius: f64,
    pub init_radius: f64,
    /// Relative finite-difference step for gradients.
    pub fd_step: f64,
}

impl Default for OptOptions {
    fn default() -> Self {
        OptOptions {
            method: Method::TrustRegion,
            max_iter: 500,
            tol_rel: 1e-8,
            min_radius: 1e-8,
            init_radius: 0.5,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptStatus {
    Converged,
    MaxIter,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct OptResult {
    /// Minimizer in natural parameter space.
    pub argmin: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OptStatus,
}

/// Componentwise central-difference gradient with absolute step `h`.
pub fn numeric_gradient(objective: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = objective(&xp);
        xp[i] = x[i] - h;
        let dn = objective(&xp);
        xp[i] = x[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

struct Evaluator<'a> {
    problem: &'a OptProblem<'a>,
    evals: usize,
}

impl<'a> Evaluator<'a> {
    /// Objective in unconstrained space; infeasible points map to +inf.
    fn eval(&mut self, y: &DVector<f64>) -> f64 {
        self.evals += 1;
        let nat: Vec<f64> = y
            .iter()
            .zip(&self.problem.transforms)
            .map(|(&yi, t)| t.to_natural(yi))
            .collect();
        match (self.problem.objective)(&nat) {
            Some(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    }

    fn gradient(&mut self, y: &DVector<f64>, f_y: f64, h: f64) -> DVector<f64> {
        let n = y.len();
        let mut g = DVector::zeros(n);
        let mut yp = y.clone();
        for i in 0..n {
            let step = h * (1.0 + y[i].abs());
            yp[i] = y[i] + step;
            let up = self.eval(&yp);
            yp[i] = y[i] - step;
            let dn = self.eval(&yp);
            yp[i] = y[i];
            g[i] = if up.is_finite() && dn.is_finite() {
                (up - dn) / (2.0 * step)
            } else if up.is_finite() {
                (up - f_y) / step
            } else if dn.is_finite() {
                (f_y - dn) / step
            } else {
                0.0
            };
        }
        g
    }
}

/// Minimize `problem.objective` starting from `init` (natural space).
pub fn minimize(problem: &OptProblem, init: &[f64], opts: &OptOptions) -> Result<OptResult> {
    if init.len() != problem.dim || problem.transforms.len() != problem.dim {
        return Err(Error::invalid("dimension mismatch in optimization problem"));
    }
    let y0 = DVector::from_iterator(
        problem.dim,
        init.iter()
            .zip(&problem.transforms)
            .map(|(&x, t)| t.to_unconstrained(x)),
    );
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("infeasible initial point after transform"));
    }
    let mut ev = Evaluator { problem, evals: 0 };
    let f0 = ev.eval(&y0);
    if !f0.is_finite() {
        return Err(Error::Optimization(
            "objective not finite at initial point".into(),
        ));
    }
    let inner = match opts.method {
        Method::TrustRegion => trust_region(&mut ev, y0, f0, opts),
        Method::QuasiNewton => quasi_newton(&mut ev, y0, f0, opts),
    };
    let argmin = inner
        .y
        .iter()
        .zip(&problem.transforms)
        .map(|(&yi, t)| t.to_natural(yi))
        .collect();
    Ok(OptResult {
        argmin,
        value: inner.f,
        iterations: inner.iterations,
        evaluations: ev.evals,
        status: inner.status,
    })
}

struct InnerResult {
    y: DVector<f64>,
    f: f64,
    iterations: usize,
    status: OptStatus,
}

/// Dogleg step for the model `f + g'p + p'Bp/2` within radius `delta`.
fn dogleg(g: &DVector<f64>, b: &DMatrix<f64>, delta: f64) -> DVector<f64> {
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return DVector::zeros(g.len());
    }
    let newton = b.clone().cholesky().map(|ch| ch.solve(&(-g)));
    let gbg = (g.transpose() * b * g)[(0, 0)];
    // Cauchy point along -g
    let p_cauchy = if gbg > 0.0 {
        -g * (gnorm * gnorm / gbg)
    } else {
        -g * (delta / gnorm)
    };
    match newton {
        Some(p_n) if p_n.norm() <= delta => p_n,
        Some(p_n) => {
            if p_cauchy.norm() >= delta {
                -g * (delta / gnorm)
            } else {
                // walk from the Cauchy point toward the Newton point to the boundary
                let d = &p_n - &p_cauchy;
                let a = d.norm_squared();
                let bq = 2.0 * p_cauchy.dot(&d);
                let c = p_cauchy.norm_squared() - delta * delta;
                let disc = (bq * bq - 4.0 * a * c).max(0.0);
                let t = (-bq + disc.sqrt()) / (2.0 * a);
                &p_cauchy + d * t.clamp(0.0, 1.0)
            }
        }
        None => {
            let n = p_cauchy.norm();
            if n > delta {
                p_cauchy * (delta / n)
            } else {
                p_cauchy
            }
        }
    }
}

fn secant_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    // BFGS update, skipped when curvature is not usable
    let sy = s.dot(y);
    if sy <= 1e-10 * s.norm() * y.norm() {
        return;
    }
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 0.0 {
        return;
    }
    *b += y * y.transpose() / sy - &bs * bs.transpose() / sbs;
}

fn trust_region(ev: &mut Evaluator, y0: DVector<f64>, f0: f64, opts: &OptOptions) -> InnerResult {
    let n = y0.len();
    let mut y = y0;
    let mut f = f0;
    let mut delta = opts.init_radius;
    let mut b = DMatrix::identity(n, n);
    let mut g = ev.gradient(&y, f, opts.fd_step);
    let mut status = OptStatus::MaxIter;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        if g.norm() < 1e-10 {
            status = OptStatus::Converged;
            break;
        }
        let p = dogleg(&g, &b, delta);
        let pnorm = p.norm();
        if pnorm < opts.min_radius {
            status = OptStatus::Stalled;
            break;
        }
        let y_new = &y + &p;
        let f_new = ev.eval(&y_new);
        let predicted = -(g.dot(&p) + 0.5 * (p.transpose() * &b * &p)[(0, 0)]);
        let rho = if predicted > 0.0 && f_new.is_finite() {
            (f - f_new) / predicted
        } else {
            -1.0
        };
        if rho < 0.25 {
            delta *= 0.25;
        } else if rho > 0.75 && pnorm >= 0.99 * delta {
            delta = (2.0 * delta).min(1e4);
        }
        if rho > 1e-4 && f_new < f {
            let g_new = ev.gradient(&y_new, f_new, opts.fd_step);
            secant_update(&mut b, &p, &(&g_new - &g));
            let rel_change = (f - f_new) / (f.abs() + 1e-12);
            y = y_new;
            f = f_new;
            g = g_new;
            if rel_change < opts.tol_rel {
                status = OptStatus::Converged;
                break;
            }
        } else if delta < opts.min_radius {
            status = OptStatus::Stalled;
            break;
        }
    }
    InnerResult {
        y,
        f,
        iterations,
        status,
    }
}

fn quasi_newton(ev: &mut Evaluator, y0: DVector<f64>, f0: f64, opts: &OptOptions) -> InnerResult {
    let n = y0.len();
    let mut y = y0;
    let mut f = f0;
    let mut h_inv = DMatrix::identity(n, n);
    let mut g = ev.gradient(&y, f, opts.fd_step);
    let mut status = OptStatus::MaxIter;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        if g.norm() < 1e-10 {
            status = OptStatus::Converged;
            break;
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        // backtracking Armijo line search
        let mut step = 1.0;
        let slope = g.dot(&dir);
        let mut accepted = None;
        for _ in 0..40 {
            let y_new = &y + &dir * step;
            let f_new = ev.eval(&y_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                accepted = Some((y_new, f_new));
                break;
            }
            step *= 0.5;
        }
        let Some((y_new, f_new)) = accepted else {
            status = OptStatus::Stalled;
            break;
        };
        let g_new = ev.gradient(&y_new, f_new, opts.fd_step);
        let s = &y_new - &y;
        let yk = &g_new - &g;
        let sy = s.dot(&yk);
        if sy > 1e-10 * s.norm() * yk.norm() {
            // inverse BFGS update
            let rho = 1.0 / sy;
            let i = DMatrix::identity(n, n);
            let left = &i - &s * yk.transpose() * rho;
            let right = &i - &yk * s.transpose() * rho;
            h_inv = &left * h_inv * right + &s * s.transpose() * rho;
        }
        let rel_change = (f - f_new) / (f.abs() + 1e-12);
        y = y_new;
        f = f_new;
        g = g_new;
        if rel_change >= 0.0 && rel_change < opts.tol_rel {
            status = OptStatus::Converged;
            break;
        }
    }
    InnerResult {
        y,
        f,
        iterations,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn run(
        dim: usize,
        transforms: Vec<Transform>,
        f: impl Fn(&[f64]) -> Option<f64>,
        init: &[f64],
        method: Method,
    ) -> OptResult {
        let problem = OptProblem {
            dim,
            transforms,
            objective: &f,
        };
        let opts = OptOptions {
            method,
            ..Default::default()
        };
        minimize(&problem, init, &opts).unwrap()
    }

    #[test]
    fn quadratic_bowl() {
        let a = [1.5, -2.0, 0.25];
        for method in [Method::TrustRegion, Method::QuasiNewton] {
            let r = run(
                3,
                vec![Transform::Identity; 3],
                |x| {
                    Some(
                        x.iter()
                            .zip(&a)
                            .map(|(xi, ai)| (xi - ai).powi(2))
                            .sum::<f64>(),
                    )
                },
                &[0.0, 0.0, 0.0],
                method,
            );
            for i in 0..3 {
                assert_relative_eq!(r.argmin[i], a[i], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn rosenbrock_2d() {
        for method in [Method::TrustRegion, Method::QuasiNewton] {
            let r = run(
                2,
                vec![Transform::Identity; 2],
                |x| Some((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)),
                &[-1.2, 1.0],
                method,
            );
            assert!(
                (r.argmin[0] - 1.0).abs() < 1e-4 && (r.argmin[1] - 1.0).abs() < 1e-4,
                "{method:?} ended at {:?} after {} iters",
                r.argmin,
                r.iterations
            );
        }
    }

    #[test]
    fn log_transform_respects_positivity() {
        let r = run(
            1,
            vec![Transform::Log],
            |x| {
                assert!(x[0] > 0.0);
                Some((x[0] - 2.0).powi(2))
            },
            &[0.5],
            Method::TrustRegion,
        );
        assert_relative_eq!(r.argmin[0], 2.0, epsilon = 1e-5);
    }

    #[test]
    fn arctanh_transform_stays_in_open_interval() {
        let r = run(
            1,
            vec![Transform::Arctanh],
            |x| {
                assert!(x[0] > -1.0 && x[0] < 1.0);
                Some((x[0] - 0.6).powi(2))
            },
            &[0.0],
            Method::TrustRegion,
        );
        assert_relative_eq!(r.argmin[0], 0.6, epsilon = 1e-5);
    }

    #[test]
    fn final_value_never_exceeds_initial() {
        let f = |x: &[f64]| Some(x[0].sin() + 0.1 * x[0] * x[0]);
        let problem = OptProblem {
            dim: 1,
            transforms: vec![Transform::Identity],
            objective: &f,
        };
        let init = [2.0];
        let r = minimize(&problem, &init, &OptOptions::default()).unwrap();
        assert!(r.value <= f(&init).unwrap());
    }

    #[test]
    fn deterministic_iterates() {
        let f = |x: &[f64]| Some((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let problem = OptProblem {
            dim: 2,
            transforms: vec![Transform::Identity; 2],
            objective: &f,
        };
        let a = minimize(&problem, &[-0.7, 0.3], &OptOptions::default()).unwrap();
        let b = minimize(&problem, &[-0.7, 0.3], &OptOptions::default()).unwrap();
        assert_eq!(a.argmin, b.argmin);
        assert_eq!(a.evaluations, b.evaluations);
    }

    #[test]
    fn infeasible_start_is_an_error() {
        let f = |_: &[f64]| None;
        let problem = OptProblem {
            dim: 1,
            transforms: vec![Transform::Identity],
            objective: &f,
        };
        assert!(minimize(&problem, &[0.0], &OptOptions::default()).is_err());
    }

    #[test]
    fn numeric_gradient_central() {
        let g = numeric_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5);
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(g[1], 4.0, epsilon = 1e-6);
    }

    #[test]
    fn numeric_gradient_second_order_convergence() {
        // error should shrink ~4x when h halves
        let f = |x: &[f64]| x[0].exp() + x[0].powi(3);
        let exact = 1.5f64.exp() + 3.0 * 1.5f64 * 1.5;
        let e1 = (numeric_gradient(f, &[1.5], 1e-3)[0] - exact).abs();
        let e2 = (numeric_gradient(f, &[1.5], 5e-4)[0] - exact).abs();
        let ratio = e1 / e2;
        assert!(ratio > 3.0 && ratio < 5.0, "ratio {ratio}");
    }

    #[test]
    fn numeric_gradient_matches_kernel_partial() {
        use crate::kernels;
        let g = numeric_gradient(|p| kernels::rbf(2.0, p[0]).unwrap(), &[0.5], 1e-5);
        assert_relative_eq!(
            g[0],
            kernels::rbf_dtau(2.0, 0.5).unwrap(),
            max_relative = 1e-6
        );
    }
}
