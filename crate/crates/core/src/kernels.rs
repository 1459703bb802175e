//! Stationary temporal and spatial correlation kernels, the matrices built
//! from them, and their analytic parameter derivatives.
//!
//! Temporal dependence uses the squared exponential kernel
//! `kappa(u; tau) = exp(-tau^2 u^2 / 2)`; spatial dependence uses the
//! Matern-5/2 kernel. Time is indexed in sample units (`t_m = m`), so rates
//! are in inverse-sample units; voxel coordinates are in lattice units.

use nalgebra::DMatrix;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rate parameter of a temporal correlation kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalKernelParams<R = f64> {
    pub tau: R,
}

/// Rate parameter of a spatial correlation kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernelParams<R = f64> {
    pub phi: R,
}

/// Parameters of the shared-signal covariance `A~ = k~ G(.; tau) + s~ I`,
/// expressed as ratios to the measurement-error variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaCovParams<R = f64> {
    /// Variance ratio `k~_eta = k_eta / sigma^2`.
    pub k_eta_ratio: R,
    /// Temporal rate of the shared signal.
    pub tau_eta: R,
    /// Nugget ratio `s~^2_eta = sigma^2_eta / sigma^2`.
    pub nugget_ratio: R,
}

impl<R: Real> EtaCovParams<R> {
    pub fn validate(&self) -> Result<()> {
        if !Float::is_finite(self.k_eta_ratio) || self.k_eta_ratio < R::zero() {
            return Err(Error::invalid("k_eta_ratio must be finite and >= 0"));
        }
        if !Float::is_finite(self.nugget_ratio) || self.nugget_ratio < R::zero() {
            return Err(Error::invalid("nugget_ratio must be finite and >= 0"));
        }
        check_rate(self.tau_eta, "tau_eta")?;
        Ok(())
    }
}

fn check_rate<R: Real>(rate: R, name: &str) -> Result<()> {
    if !Float::is_finite(rate) || rate <= R::zero() {
        return Err(Error::invalid(format!("{name} must be finite and > 0")));
    }
    Ok(())
}

fn check_nonneg<R: Real>(x: R, name: &str) -> Result<()> {
    if !Float::is_finite(x) || x < R::zero() {
        return Err(Error::invalid(format!("{name} must be finite and >= 0")));
    }
    Ok(())
}

/// Squared exponential correlation `exp(-tau^2 u^2 / 2)` at lag `u >= 0`.
pub fn rbf<R: Real>(u: R, tau: R) -> Result<R> {
    check_nonneg(u, "lag")?;
    check_rate(tau, "tau")?;
    Ok(rbf_unchecked(u, tau))
}

#[inline]
pub(crate) fn rbf_unchecked<R: Real>(u: R, tau: R) -> R {
    let half = R::from_f64_c(0.5);
    Float::exp(-half * tau * tau * u * u)
}

/// Derivative of [`rbf`] with respect to `tau`: `-tau u^2 kappa(u; tau)`.
pub fn rbf_dtau<R: Real>(u: R, tau: R) -> Result<R> {
    check_nonneg(u, "lag")?;
    check_rate(tau, "tau")?;
    Ok(-tau * u * u * rbf_unchecked(u, tau))
}

/// Matern-5/2 correlation `(1 + sqrt5 phi d + 5/3 phi^2 d^2) exp(-sqrt5 phi d)`.
pub fn matern52<R: Real>(d: R, phi: R) -> Result<R> {
    check_nonneg(d, "distance")?;
    check_rate(phi, "phi")?;
    Ok(matern52_unchecked(d, phi))
}

#[inline]
pub(crate) fn matern52_unchecked<R: Real>(d: R, phi: R) -> R {
    let sqrt5 = R::from_f64_c(5.0f64.sqrt());
    let five_thirds = R::from_f64_c(5.0 / 3.0);
    let s = sqrt5 * phi * d;
    (R::one() + s + five_thirds * phi * phi * d * d) * Float::exp(-s)
}

/// Derivative of [`matern52`] with respect to `phi`:
/// `-(5/3) phi d^2 (1 + sqrt5 phi d) exp(-sqrt5 phi d)`.
pub fn matern52_dphi<R: Real>(d: R, phi: R) -> Result<R> {
    check_nonneg(d, "distance")?;
    check_rate(phi, "phi")?;
    let sqrt5 = R::from_f64_c(5.0f64.sqrt());
    let five_thirds = R::from_f64_c(5.0 / 3.0);
    let s = sqrt5 * phi * d;
    Ok(-five_thirds * phi * d * d * (R::one() + s) * Float::exp(-s))
}

fn check_times<R: Real>(times: &[R]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::invalid("empty time grid"));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::invalid(
                "timepoints must be strictly increasing (duplicates rejected)",
            ));
        }
    }
    if times.iter().any(|t| !Float::is_finite(*t)) {
        return Err(Error::invalid("non-finite timepoint"));
    }
    Ok(())
}

/// M x M temporal correlation matrix `G` with entries `kappa(|t_m - t_m'|; tau)`.
pub fn build_temporal_corr<R: Real>(times: &[R], tau: R) -> Result<DMatrix<R>> {
    check_times(times)?;
    check_rate(tau, "tau")?;
    let m = times.len();
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let lag = Float::abs(times[i] - times[j]);
            let v = rbf_unchecked(lag, tau);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Elementwise derivative of [`build_temporal_corr`] with respect to `tau`.
pub fn build_temporal_corr_dtau<R: Real>(times: &[R], tau: R) -> Result<DMatrix<R>> {
    check_times(times)?;
    check_rate(tau, "tau")?;
    let m = times.len();
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let lag = Float::abs(times[i] - times[j]);
            let v = -tau * lag * lag * rbf_unchecked(lag, tau);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// M x M shared-signal covariance ratio `A~ = k~ G + s~ I`.
pub fn build_eta_cov<R: Real>(times: &[R], params: &EtaCovParams<R>) -> Result<DMatrix<R>> {
    params.validate()?;
    let mut a = build_temporal_corr(times, params.tau_eta)?;
    a *= params.k_eta_ratio;
    for i in 0..times.len() {
        a[(i, i)] += params.nugget_ratio;
    }
    Ok(a)
}

pub fn euclidean<R: Real>(a: &[R; 3], b: &[R; 3]) -> R {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    Float::sqrt(dx * dx + dy * dy + dz * dz)
}

fn check_coords<R: Real>(coords: &[[R; 3]], allow_duplicates: bool) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::invalid("empty coordinate list"));
    }
    if coords
        .iter()
        .any(|c| c.iter().any(|x| !Float::is_finite(*x)))
    {
        return Err(Error::invalid("non-finite voxel coordinate"));
    }
    if !allow_duplicates {
        for i in 0..coords.len() {
            for j in (i + 1)..coords.len() {
                if euclidean(&coords[i], &coords[j]) == R::zero() {
                    return Err(Error::invalid(format!(
                        "duplicate voxel coordinates at rows {i} and {j} (would be singular); \
                         pass allow_duplicates to add diagonal jitter instead"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Diagonal jitter applied when duplicate voxel coordinates are allowed.
pub const DUPLICATE_JITTER: f64 = 1e-8;

/// L x L spatial correlation matrix `C` with Matern-5/2 entries on
/// Euclidean distances. Duplicate coordinates are rejected unless
/// `allow_duplicates`, in which case `1e-8` jitter is added to the diagonal.
pub fn build_spatial_corr<R: Real>(
    coords: &[[R; 3]],
    phi: R,
    allow_duplicates: bool,
) -> Result<DMatrix<R>> {
    check_coords(coords, allow_duplicates)?;
    check_rate(phi, "phi")?;
    let l = coords.len();
    let mut c = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in 0..=i {
            let d = euclidean(&coords[i], &coords[j]);
            let v = matern52_unchecked(d, phi);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    if allow_duplicates {
        let jitter = R::from_f64_c(DUPLICATE_JITTER);
        for i in 0..l {
            c[(i, i)] += jitter;
        }
    }
    Ok(c)
}

/// Elementwise derivative of [`build_spatial_corr`] with respect to `phi`.
pub fn build_spatial_corr_dphi<R: Real>(coords: &[[R; 3]], phi: R) -> Result<DMatrix<R>> {
    check_coords(coords, true)?;
    check_rate(phi, "phi")?;
    let l = coords.len();
    let mut c = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in 0..=i {
            let d = euclidean(&coords[i], &coords[j]);
            let v = matern52_dphi(d, phi)?;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}
