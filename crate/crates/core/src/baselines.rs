//! Correlation-of-averages estimators and the analytic attenuation limit
//! used as comparison baselines and diagnostics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::EtaCovParams;

/// Inputs of the closed-form attenuation limit of the correlation of
/// averages under the exchangeable voxel model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CALimitInputs {
    /// Average pairwise intra-regional correlation, first region.
    pub alpha_1: f64,
    pub alpha_2: f64,
    /// Noise-to-signal ratio `sigma^2 / (L xi^2)`, first region.
    pub beta_1: f64,
    pub beta_2: f64,
}

impl CALimitInputs {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_1", self.alpha_1), ("alpha_2", self.alpha_2)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0,1]: {a}")));
            }
        }
        for (name, b) in [("beta_1", self.beta_1), ("beta_2", self.beta_2)] {
            if !(b >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0: {b}")));
            }
        }
        Ok(())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("series length mismatch"));
    }
    let m = a.len();
    if m < 3 {
        return Err(Error::invalid("need at least 3 timepoints"));
    }
    let n = m as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..m {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::invalid("zero temporal variance"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of the two regions' voxel-averaged time series.
///
/// Inputs are time-major (`M x L_j`).
pub fn corr_of_averages(x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<f64> {
    let avg = |x: &DMatrix<f64>| -> Vec<f64> {
        (0..x.nrows())
            .map(|m| x.row(m).sum() / x.ncols() as f64)
            .collect()
    };
    pearson(&avg(x1), &avg(x2))
}

/// Pearson correlation of two fitted fixed-effect curves.
pub fn fe_correlation(nu1: &[f64], nu2: &[f64]) -> Result<f64> {
    pearson(nu1, nu2)
}

/// Limiting value of the correlation of averages:
/// `rho* / sqrt((alpha_1 + beta_1)(alpha_2 + beta_2))`.
pub fn ca_limit(inputs: &CALimitInputs, rho_star: f64) -> Result<f64> {
    inputs.validate()?;
    let denom = ((inputs.alpha_1 + inputs.beta_1) * (inputs.alpha_2 + inputs.beta_2)).sqrt();
    if denom <= 0.0 {
        return Err(Error::invalid("nonpositive attenuation denominator"));
    }
    Ok(rho_star / denom)
}

/// Model-implied average pairwise voxel correlation at lag zero:
/// the alpha diagnostic of the attenuation limit computed from the fitted
/// mixed-model components (spatial correlation `C`, shared-signal
/// parameters, and regional variance ratio).
pub fn model_implied_alpha(c: &DMatrix<f64>, eta: &EtaCovParams, k_gamma_ratio: f64) -> f64 {
    let l = c.nrows() as f64;
    let a0 = eta.k_eta_ratio + eta.nugget_ratio; // shared-signal variance at lag 0
    let cbar = c.sum() / (l * l);
    (a0 + cbar * k_gamma_ratio) / (a0 + k_gamma_ratio)
}

/// Model-implied noise-to-signal ratio `sigma^2 / (L xi^2)` in the variance
/// ratio units of the fitted model.
pub fn model_implied_beta(l: usize, eta: &EtaCovParams, k_gamma_ratio: f64) -> f64 {
    1.0 / (l as f64 * (eta.k_eta_ratio + eta.nugget_ratio + k_gamma_ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn affine_transform_gives_unit_correlation() {
        let x1 = DMatrix::from_fn(6, 3, |m, l| (m as f64).sin() + 0.1 * l as f64);
        let x2 = &x1 * 2.5 + DMatrix::from_element(6, 3, 7.0);
        assert_relative_eq!(corr_of_averages(&x1, &x2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn anticorrelated_series() {
        // three-point series with exactly opposite deviations
        let x1 = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let x2 = DMatrix::from_column_slice(3, 1, &[3.0, 2.0, 1.0]);
        assert_relative_eq!(corr_of_averages(&x1, &x2).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_degenerate_series() {
        let x1 = DMatrix::from_element(5, 2, 1.0);
        let x2 = DMatrix::from_fn(5, 2, |m, _| m as f64);
        assert!(corr_of_averages(&x1, &x2).is_err());
        let short = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(corr_of_averages(&short, &short).is_err());
    }

    #[test]
    fn fe_correlation_identical_series() {
        let nu: Vec<f64> = (0..10).map(|m| (m as f64 * 0.7).cos()).collect();
        assert_relative_eq!(fe_correlation(&nu, &nu).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fe_matches_ca_under_saturated_basis() {
        // with K = M the spline interpolates the mean series exactly, so the
        // fixed-effect correlation equals the correlation of averages
        let m = 12;
        let times: Vec<f64> = (1..=m).map(|t| t as f64).collect();
        let g = basis::make_basis(&times, m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = DMatrix::from_fn(m, 4, |mi, _| {
            (mi as f64 * 0.5).sin() + rng.gen_range(-0.01..0.01)
        });
        let x2 = DMatrix::from_fn(m, 4, |mi, _| {
            (mi as f64 * 0.5 + 0.3).sin() + rng.gen_range(-0.01..0.01)
        });
        let fit = |x: &DMatrix<f64>| -> Vec<f64> {
            let v = basis::ols_init(&g, x).unwrap();
            (&g * v).iter().cloned().collect()
        };
        let ca = corr_of_averages(&x1, &x2).unwrap();
        let fe = fe_correlation(&fit(&x1), &fit(&x2)).unwrap();
        assert_relative_eq!(ca, fe, epsilon = 1e-8);
    }

    #[test]
    fn ca_limit_closed_forms() {
        let perfect = CALimitInputs {
            alpha_1: 1.0,
            alpha_2: 1.0,
            beta_1: 0.0,
            beta_2: 0.0,
        };
        assert_relative_eq!(ca_limit(&perfect, 0.4).unwrap(), 0.4, epsilon = 1e-14);
        let half = CALimitInputs {
            alpha_1: 0.5,
            alpha_2: 0.5,
            beta_1: 0.0,
            beta_2: 0.0,
        };
        assert_relative_eq!(ca_limit(&half, 0.3).unwrap(), 0.6, epsilon = 1e-14);
    }

    #[test]
    fn ca_limit_monotone_in_alpha() {
        let mut prev = f64::INFINITY;
        for i in 1..=10 {
            let a = i as f64 / 10.0;
            let inp = CALimitInputs {
                alpha_1: a,
                alpha_2: 0.7,
                beta_1: 0.1,
                beta_2: 0.1,
            };
            let v = ca_limit(&inp, 0.5).unwrap();
            assert!(v < prev, "limit should decrease as alpha grows");
            prev = v;
        }
    }

    #[test]
    fn monte_carlo_ca_matches_limit() {
        // exchangeable voxel model: within-region correlation c_j through a
        // shared factor, cross-region factor correlation chosen to produce
        // the target voxel-level rho*
        let m = 5000;
        let l = 10usize;
        let (c1, c2) = (0.6f64, 0.4f64);
        let r_f = 0.7;
        let rho_star = (c1 * c2).sqrt() * r_f;
        let sigma2 = 0.5f64;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut x1 = DMatrix::zeros(m, l);
        let mut x2 = DMatrix::zeros(m, l);
        for mi in 0..m {
            let g0: f64 = rng.sample(StandardNormal);
            let g1: f64 = rng.sample(StandardNormal);
            let f1 = g0;
            let f2 = r_f * g0 + (1.0 - r_f * r_f).sqrt() * g1;
            for li in 0..l {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let n1: f64 = rng.sample(StandardNormal);
                let n2: f64 = rng.sample(StandardNormal);
                x1[(mi, li)] = c1.sqrt() * f1 + (1.0 - c1).sqrt() * e1 + sigma2.sqrt() * n1;
                x2[(mi, li)] = c2.sqrt() * f2 + (1.0 - c2).sqrt() * e2 + sigma2.sqrt() * n2;
            }
        }
        let lf = l as f64;
        let inputs = CALimitInputs {
            alpha_1: (1.0 + (lf - 1.0) * c1) / lf,
            alpha_2: (1.0 + (lf - 1.0) * c2) / lf,
            beta_1: sigma2 / lf,
            beta_2: sigma2 / lf,
        };
        let limit = ca_limit(&inputs, rho_star).unwrap();
        let mc = corr_of_averages(&x1, &x2).unwrap();
        assert!(
            (mc - limit).abs() < 0.02,
            "monte carlo {mc} vs limit {limit}"
        );
    }

    #[test]
    fn model_implied_alpha_limits() {
        use crate::kernels;
        let coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let c = kernels::build_spatial_corr(&coords, 0.5, false).unwrap();
        let eta = EtaCovParams {
            k_eta_ratio: 1.0,
            tau_eta: 0.25,
            nugget_ratio: 0.1,
        };
        // no regional field: every voxel carries the same shared signal
        assert_relative_eq!(model_implied_alpha(&c, &eta, 0.0), 1.0, epsilon = 1e-14);
        // alpha shrinks toward the average of C as the regional field dominates
        let a_big = model_implied_alpha(&c, &eta, 100.0);
        let cbar = c.sum() / 9.0;
        assert!((a_big - cbar).abs() < 0.05);
        // beta decreases with voxel count
        assert!(
            model_implied_beta(10, &eta, 2.0) < model_implied_beta(5, &eta, 2.0)
        );
    }
}
