//! Cubic B-spline design for the stage-1 fixed effect and its initial
//! least-squares fit.
//!
//! Knot layout: boundary knots at `t_1` and `t_M` with multiplicity 4 and
//! `K - 4` equally spaced interior knots strictly inside the time range.
//! Basis values come from the Cox-de Boor recursion with no approximation.

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Real;

const ORDER: usize = 4; // cubic

/// Cubic B-spline basis of size `K` on a fixed time grid.
#[derive(Debug, Clone)]
pub struct SplineBasis<R = f64> {
    /// Number of basis functions.
    pub k: usize,
    /// Strictly increasing interior knots (length `K - 4`).
    pub interior_knots: Vec<R>,
    knots: Vec<R>,
}

impl<R: Real> SplineBasis<R> {
    /// Open uniform basis on `[times[0], times[M-1]]` with `K` functions.
    pub fn new(times: &[R], k: usize) -> Result<Self> {
        let m = times.len();
        if m < 4 {
            return Err(Error::invalid("need at least 4 timepoints for a cubic basis"));
        }
        if k < 4 {
            return Err(Error::invalid("basis size K must be at least 4"));
        }
        if k > m {
            return Err(Error::invalid(format!(
                "basis size K={k} exceeds number of timepoints M={m} (rank deficient)"
            )));
        }
        let t0 = times[0];
        let t1 = times[m - 1];
        let n_interior = k - ORDER;
        let step = (t1 - t0) / R::from_f64_c((n_interior + 1) as f64);
        let interior_knots: Vec<R> = (1..=n_interior)
            .map(|u| t0 + step * R::from_f64_c(u as f64))
            .collect();
        let mut knots = Vec::with_capacity(k + ORDER);
        knots.extend(std::iter::repeat(t0).take(ORDER));
        knots.extend(interior_knots.iter().cloned());
        knots.extend(std::iter::repeat(t1).take(ORDER));
        Ok(SplineBasis {
            k,
            interior_knots,
            knots,
        })
    }

    /// Evaluate all `K` basis functions at `t`.
    pub fn eval(&self, t: R) -> Vec<R> {
        let k = self.k;
        let knots = &self.knots;
        let n_knots = knots.len();
        // order-1 indicators, with the right endpoint folded into the last
        // nonempty interval
        let mut n: Vec<R> = vec![R::zero(); n_knots - 1];
        for (i, v) in n.iter_mut().enumerate() {
            let upper_is_last = knots[i + 1] == knots[n_knots - 1];
            let in_span = if upper_is_last {
                t >= knots[i] && t <= knots[i + 1] && knots[i] < knots[i + 1]
            } else {
                t >= knots[i] && t < knots[i + 1]
            };
            if in_span {
                *v = R::one();
            }
        }
        for p in 2..=ORDER {
            for i in 0..(n_knots - p) {
                let denom_l = knots[i + p - 1] - knots[i];
                let denom_r = knots[i + p] - knots[i + 1];
                let left = if denom_l > R::zero() {
                    (t - knots[i]) / denom_l * n[i]
                } else {
                    R::zero()
                };
                let right = if denom_r > R::zero() {
                    (knots[i + p] - t) / denom_r * n[i + 1]
                } else {
                    R::zero()
                };
                n[i] = left + right;
            }
        }
        n.truncate(k);
        n
    }
}

/// M x K design matrix with row `m` holding the basis evaluated at `t_m`.
pub fn make_basis<R: Real>(times: &[R], k: usize) -> Result<DMatrix<R>> {
    let basis = SplineBasis::new(times, k)?;
    let m = times.len();
    let mut g = DMatrix::zeros(m, k);
    for (row, &t) in times.iter().enumerate() {
        for (col, v) in basis.eval(t).into_iter().enumerate() {
            g[(row, col)] = v;
        }
    }
    Ok(g)
}

/// Initial spline coefficients by ordinary least squares.
///
/// `x` is the M x L signal matrix (time by voxel). Because the design
/// repeats per voxel, the solution equals OLS on the time-averaged signal.
pub fn ols_init<R: Real>(gtilde: &DMatrix<R>, x: &DMatrix<R>) -> Result<DVector<R>> {
    let m = gtilde.nrows();
    if x.nrows() != m {
        return Err(Error::invalid("signal and design row counts differ"));
    }
    let l = x.ncols();
    let mean: DVector<R> =
        DVector::from_fn(m, |i, _| x.row(i).sum() / R::from_f64_c(l as f64));
    ols_solve(gtilde, &mean)
}

pub(crate) fn ols_solve<R: Real>(g: &DMatrix<R>, y: &DVector<R>) -> Result<DVector<R>> {
    let svd = g.clone().svd(true, true);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(<R as Float>::infinity(), |a, b| if b < a { b } else { a });
    let smax = svd
        .singular_values
        .iter()
        .cloned()
        .fold(R::zero(), |a, b| if b > a { b } else { a });
    if smin <= smax * R::from_f64_c(1e-12) {
        return Err(Error::linalg("rank-deficient spline design"));
    }
    svd.solve(y, R::from_f64_c(0.0))
        .map_err(|e| Error::linalg(e.to_string()))
}
