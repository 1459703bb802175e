//! Intra-regional ReML: fits one region's variance components
//! `(phi_gamma, k~_gamma, tau_gamma)` together with the spline fixed effect
//! and the profiled error variance.
//!
//! The marginal covariance is `sigma^2 (C (x) B~ + I)`, so objective
//! evaluations run through the eigendecompositions of `C` and `B~` at
//! `O(L^3 + M^3 + K^3)` cost. A dense evaluation of the same objective is
//! kept as a reference for small instances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis;
use crate::error::{Error, Result};
use crate::kernels;
use crate::linalg::{cholesky_with_jitter, kron, logdet_from_cholesky, sym_eigen};
use crate::optimize::{self, OptOptions, OptProblem, OptStatus, Transform};
use crate::simulator::{RegionData, RegionTheta};

/// Floor applied to the Kronecker-plus-identity eigenvalues.
const EIG_FLOOR: f64 = 1e-10;

/// Inputs of one region's intra-regional problem.
///
/// `x` is time-major (`M x L`); its column-stacked vector is the
/// voxel-major, time-fastest stacking used throughout.
pub struct IntraProblem<'a> {
    pub coords: &'a [[f64; 3]],
    pub times: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub gtilde: &'a DMatrix<f64>,
}

impl<'a> IntraProblem<'a> {
    pub fn n_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn basis_size(&self) -> usize {
        self.gtilde.ncols()
    }

    fn validate(&self) -> Result<()> {
        let m = self.n_times();
        let k = self.basis_size();
        if self.x.nrows() != m || self.gtilde.nrows() != m {
            return Err(Error::invalid("time dimension mismatch"));
        }
        if self.x.ncols() != self.n_voxels() {
            return Err(Error::invalid("voxel dimension mismatch"));
        }
        if m * self.n_voxels() <= k {
            return Err(Error::invalid("need M*L > K observations"));
        }
        Ok(())
    }
}

/// Result of a stage-1 fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Fit {
    pub label: String,
    pub theta: RegionTheta,
    /// Spline coefficients of the fitted fixed effect.
    pub v_hat: Vec<f64>,
    /// Fitted fixed-effect curve at the observed timepoints.
    pub nu_hat: Vec<f64>,
    pub sigma2_hat: f64,
    /// Final negative ReML value (additive constants dropped).
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Number of floored Kronecker eigenvalues seen during the fit.
    pub eig_clamp_count: usize,
}

#[derive(Debug, Clone)]
pub struct Stage1Options {
    /// B-spline basis size `K`.
    pub basis_size: usize,
    pub init: RegionTheta,
    pub opt: OptOptions,
    /// Keep the initial spline fit fixed instead of profiling it by GLS.
    pub fix_fixed_effects: bool,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            basis_size: 30,
            init: RegionTheta {
                phi_gamma: 0.5,
                k_gamma_ratio: 1.0,
                tau_gamma: 0.5,
            },
            opt: OptOptions::default(),
            fix_fixed_effects: false,
        }
    }
}

/// `log det (C (x) B + I)` through the factor eigendecompositions.
pub fn logdet_kron_plus_identity(c: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (_, lc) = sym_eigen(c);
    let (_, lb) = sym_eigen(b);
    let mut out = 0.0;
    for &el in lc.iter() {
        for &em in lb.iter() {
            out += (el * em + 1.0).max(EIG_FLOOR).ln();
        }
    }
    out
}

/// All quantities of one objective evaluation.
pub(crate) struct IntraEval {
    pub objective: f64,
    pub v_hat: DVector<f64>,
    pub quad: f64,
    pub clamped: usize,
}

/// Evaluate the intra-regional ReML pieces in the Kronecker eigenbasis.
///
/// With `fixed_v` the fixed effect is held at the given coefficients;
/// otherwise it is profiled by GLS.
pub(crate) fn eval_intra(
    theta: &RegionTheta,
    p: &IntraProblem,
    fixed_v: Option<&DVector<f64>>,
) -> Result<IntraEval> {
    p.validate()?;
    let l = p.n_voxels();
    let m = p.n_times();
    let k = p.basis_size();
    let c = kernels::build_spatial_corr(p.coords, theta.phi_gamma, false)?;
    let b = kernels::build_temporal_corr(p.times, theta.tau_gamma)? * theta.k_gamma_ratio;

    let (qc, lc) = sym_eigen(&c);
    let (qb, lb) = sym_eigen(&b);

    let mut clamped = 0usize;
    let mut d = DMatrix::zeros(m, l);
    let mut logdet_v = 0.0;
    for li in 0..l {
        for mi in 0..m {
            let mut e = lc[li] * lb[mi] + 1.0;
            if e < EIG_FLOOR {
                e = EIG_FLOOR;
                clamped += 1;
            }
            d[(mi, li)] = e;
            logdet_v += e.ln();
        }
    }

    // rotate data, design, and the voxel-summing vector into the eigenbasis
    let x_t = qb.transpose() * p.x * &qc; // M x L
    let t_mat = qb.transpose() * p.gtilde; // M x K
    let w = qc.transpose() * DVector::from_element(l, 1.0); // L

    // G' V^-1 G and G' V^-1 X with G = 1_L (x) Gtilde
    let mut gvg = DMatrix::zeros(k, k);
    let mut gvx = DVector::zeros(k);
    let mut scaled = DMatrix::zeros(m, k);
    for li in 0..l {
        for mi in 0..m {
            let inv = 1.0 / d[(mi, li)];
            for ki in 0..k {
                scaled[(mi, ki)] = t_mat[(mi, ki)] * inv;
            }
        }
        let tt = t_mat.transpose() * &scaled; // K x K
        gvg += &tt * (w[li] * w[li]);
        let xcol = x_t.column(li);
        let sx = scaled.transpose() * xcol;
        gvx += sx * w[li];
    }

    let chol_gvg = cholesky_with_jitter(&gvg, 1e-12, "G'V^-1G")?;
    let v_hat = match fixed_v {
        Some(v) => v.clone(),
        None => chol_gvg.solve(&gvx),
    };
    let logdet_gvg = logdet_from_cholesky(&chol_gvg);

    // residual quadratic form in the eigenbasis
    let fitted = &t_mat * &v_hat; // M
    let mut quad = 0.0;
    for li in 0..l {
        for mi in 0..m {
            let r = x_t[(mi, li)] - w[li] * fitted[mi];
            quad += r * r / d[(mi, li)];
        }
    }
    if quad <= 0.0 {
        return Err(Error::invalid("degenerate zero residual"));
    }

    let dof = (m * l - k) as f64;
    let objective = 0.5 * logdet_v + 0.5 * logdet_gvg + 0.5 * dof * quad.ln();
    Ok(IntraEval {
        objective,
        v_hat,
        quad,
        clamped,
    })
}

/// Fast (Kronecker-eigenbasis) negative ReML objective.
pub fn neg_reml_intra_fast(theta: &RegionTheta, p: &IntraProblem) -> Result<f64> {
    Ok(eval_intra(theta, p, None)?.objective)
}

/// Dense reference evaluation of the same objective, for small instances.
pub fn neg_reml_intra_dense(theta: &RegionTheta, p: &IntraProblem) -> Result<f64> {
    p.validate()?;
    let l = p.n_voxels();
    let m = p.n_times();
    let k = p.basis_size();
    let c = kernels::build_spatial_corr(p.coords, theta.phi_gamma, false)?;
    let b = kernels::build_temporal_corr(p.times, theta.tau_gamma)? * theta.k_gamma_ratio;
    let mut v = kron(&c, &b);
    for i in 0..(l * m) {
        v[(i, i)] += 1.0;
    }
    let ones = DMatrix::from_element(l, 1, 1.0);
    let g = kron(&ones, p.gtilde); // ML x K
    let x = DVector::from_column_slice(p.x.as_slice()); // voxel-major, time fastest

    let chol_v = v
        .cholesky()
        .ok_or_else(|| Error::linalg("singular intra-regional covariance"))?;
    let logdet_v = logdet_from_cholesky(&chol_v);
    let vi_g = chol_v.solve(&g);
    let vi_x = chol_v.solve(&x);
    let gvg = g.transpose() * &vi_g;
    let gvx = g.transpose() * &vi_x;
    let chol_gvg = gvg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::linalg("singular G'V^-1G"))?;
    let v_hat = chol_gvg.solve(&gvx);
    let r = &x - &g * &v_hat;
    let quad = r.dot(&chol_v.solve(&r));
    let dof = (m * l - k) as f64;
    Ok(0.5 * logdet_v + 0.5 * logdet_from_cholesky(&chol_gvg) + 0.5 * dof * quad.ln())
}

/// GLS estimate of the spline coefficients at the given variance parameters.
pub fn gls_v(theta: &RegionTheta, p: &IntraProblem) -> Result<DVector<f64>> {
    Ok(eval_intra(theta, p, None)?.v_hat)
}

/// Profiled error variance `r' V^-1 r / (LM - K)` at the given parameters.
pub fn profile_sigma2_intra(theta: &RegionTheta, p: &IntraProblem) -> Result<f64> {
    let eval = eval_intra(theta, p, None)?;
    let dof = (p.n_voxels() * p.n_times() - p.basis_size()) as f64;
    Ok(eval.quad / dof)
}

/// Fit one region by minimizing the fast negative ReML over
/// `(phi_gamma, k~_gamma, tau_gamma)` in log space.
pub fn fit_region(region: &RegionData, opts: &Stage1Options) -> Result<Stage1Fit> {
    let times: Vec<f64> = (1..=region.n_times()).map(|t| t as f64).collect();
    let gtilde = basis::make_basis(&times, opts.basis_size)?;
    let x = region.time_major();
    let p = IntraProblem {
        coords: &region.coords,
        times: &times,
        x: &x,
        gtilde: &gtilde,
    };
    p.validate()?;

    let v_init = basis::ols_init(&gtilde, &x)?;
    let fixed_v = opts.fix_fixed_effects.then_some(&v_init);

    let clamp_total = std::cell::Cell::new(0usize);
    let objective = |params: &[f64]| -> Option<f64> {
        let theta = RegionTheta {
            phi_gamma: params[0],
            k_gamma_ratio: params[1],
            tau_gamma: params[2],
        };
        match eval_intra(&theta, &p, fixed_v) {
            Ok(eval) => {
                clamp_total.set(clamp_total.get() + eval.clamped);
                Some(eval.objective)
            }
            Err(_) => None,
        }
    };
    let problem = OptProblem {
        dim: 3,
        transforms: vec![Transform::Log; 3],
        objective: &objective,
    };
    let init = [
        opts.init.phi_gamma,
        opts.init.k_gamma_ratio,
        opts.init.tau_gamma,
    ];
    let result = optimize::minimize(&problem, &init, &opts.opt)?;
    let theta = RegionTheta {
        phi_gamma: result.argmin[0],
        k_gamma_ratio: result.argmin[1],
        tau_gamma: result.argmin[2],
    };
    let final_eval = eval_intra(&theta, &p, fixed_v)?;
    let dof = (region.n_voxels() * region.n_times() - opts.basis_size) as f64;
    let sigma2_hat = final_eval.quad / dof;
    let nu_hat = &gtilde * &final_eval.v_hat;
    if clamp_total.get() > 0 {
        log::warn!(
            "region {}: {} Kronecker eigenvalues floored at {EIG_FLOOR}",
            region.label,
            clamp_total.get()
        );
    }
    Ok(Stage1Fit {
        label: region.label.clone(),
        theta,
        v_hat: final_eval.v_hat.iter().cloned().collect(),
        nu_hat: nu_hat.iter().cloned().collect(),
        sigma2_hat,
        objective: final_eval.objective,
        iterations: result.iterations,
        evaluations: result.evaluations,
        converged: result.status != OptStatus::MaxIter,
        eig_clamp_count: clamp_total.get(),
    })
}
