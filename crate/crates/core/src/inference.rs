//! Asymptotic inference for the pair correlation: Fisher information,
//! standard errors, z-scores, p-values, and Fisher-z confidence intervals.
//!
//! The information matrix entry is `1/2 Tr{Pi V_i Pi V_j}` with
//! `Pi = V^-1 - V^-1 Z (Z'V^-1Z)^-1 Z'V^-1`. A dense path forms `Pi`
//! explicitly for small problems; the default path exploits
//! `Pi = D^-1 - G Lambda G'` (block-Kronecker minus low rank), under which
//! every trace reduces to small-matrix algebra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels;
use crate::linalg::kron;
use crate::stage2::{build_pair_cov, LowRankCov, PairProblem, PairTheta};

/// Index of `rho` in the canonical parameter flattening.
pub const RHO_INDEX: usize = 8;

/// Which standard error to report for `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeMode {
    /// Treats the other nine parameters as known: `[I_rr]^(-1/2)`.
    Marginal,
    /// `(rho, rho)` entry of the inverse information matrix.
    FullInverse,
}

/// Inference summary for one pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairInference {
    pub rho_hat: f64,
    pub se_rho: f64,
    /// Delta-method standard error of `arctanh(rho_hat)`.
    pub se_z: f64,
    pub z_score: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub mode: SeMode,
}

/// `Pi = V^-1 - V^-1 Z (Z'V^-1Z)^-1 Z'V^-1`, formed densely.
pub fn pi_matrix(v: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::linalg("covariance not positive definite"))?;
    let vinv_z = chol.solve(z);
    let ztvz = z.transpose() * &vinv_z;
    let ztvz_inv = ztvz
        .try_inverse()
        .ok_or_else(|| Error::linalg("singular Z'V^-1Z"))?;
    let vinv = chol.inverse();
    Ok(&vinv - &vinv_z * ztvz_inv * vinv_z.transpose())
}

// ---------------------------------------------------------------------------
// structured partials

/// One parameter's covariance partial in structured form.
enum Partial {
    /// `V_i = F S F'` with `F = blockdiag(1_Lj (x) I_M)` and `S` `2M x 2M`.
    Shared(DMatrix<f64>),
    /// `V_i = E_r (Pc (x) Pb) E_r'` supported on one region's block.
    Regional {
        region: usize,
        pc: DMatrix<f64>,
        pb: DMatrix<f64>,
    },
}

/// All ten partials in canonical order.
fn partials(theta: &PairTheta, p: &PairProblem) -> Result<Vec<Partial>> {
    let m = p.m();
    let g_eta = kernels::build_temporal_corr(p.times, theta.tau_eta)?;
    let dg_eta = kernels::build_temporal_corr_dtau(p.times, theta.tau_eta)?;
    let a_tilde = &g_eta * theta.k_eta_ratio + DMatrix::identity(m, m) * theta.nugget_ratio;
    let r2 = |a: &DMatrix<f64>| -> DMatrix<f64> {
        // R (x) A with R = [[1, rho],[rho, 1]]
        let mut s = DMatrix::zeros(2 * m, 2 * m);
        s.view_mut((0, 0), (m, m)).copy_from(a);
        s.view_mut((m, m), (m, m)).copy_from(a);
        let off = a * theta.rho;
        s.view_mut((0, m), (m, m)).copy_from(&off);
        s.view_mut((m, 0), (m, m)).copy_from(&off);
        s
    };
    let off2 = |a: &DMatrix<f64>| -> DMatrix<f64> {
        // [[0, A],[A, 0]]
        let mut s = DMatrix::zeros(2 * m, 2 * m);
        s.view_mut((0, m), (m, m)).copy_from(a);
        s.view_mut((m, 0), (m, m)).copy_from(a);
        s
    };

    let mut out = Vec::with_capacity(10);
    // tau_eta, k_eta
    out.push(Partial::Shared(r2(&(&dg_eta * theta.k_eta_ratio))));
    out.push(Partial::Shared(r2(&g_eta)));
    // regional parameters
    for (region, coords, rt) in [
        (0usize, p.coords1, theta.region(0)),
        (1usize, p.coords2, theta.region(1)),
    ] {
        let c = kernels::build_spatial_corr(coords, rt.phi_gamma, false)?;
        let dc = kernels::build_spatial_corr_dphi(coords, rt.phi_gamma)?;
        let h = kernels::build_temporal_corr(p.times, rt.tau_gamma)?;
        let dh = kernels::build_temporal_corr_dtau(p.times, rt.tau_gamma)?;
        // phi: dC (x) B~ ; tau: C (x) k~ dH ; k~: C (x) H
        out.push(Partial::Regional {
            region,
            pc: dc,
            pb: &h * rt.k_gamma_ratio,
        });
        out.push(Partial::Regional {
            region,
            pc: c.clone(),
            pb: &dh * rt.k_gamma_ratio,
        });
        out.push(Partial::Regional {
            region,
            pc: c,
            pb: h,
        });
    }
    // reorder the regional six into canonical [phi1, phi2, tau1, k1, tau2, k2]
    let r2_block = out.split_off(2);
    let mut by_region: Vec<Vec<Partial>> = vec![vec![], vec![]];
    for prt in r2_block {
        if let Partial::Regional { region, .. } = &prt {
            by_region[*region].push(prt);
        }
    }
    let mut r1 = by_region.remove(0);
    let mut r2v = by_region.remove(0);
    out.push(r1.remove(0)); // phi_1
    out.push(r2v.remove(0)); // phi_2
    out.push(r1.remove(0)); // tau_1
    out.push(r1.remove(0)); // k_1
    out.push(r2v.remove(0)); // tau_2
    out.push(r2v.remove(0)); // k_2
    // rho, nugget
    out.push(Partial::Shared(off2(&a_tilde)));
    out.push(Partial::Shared(r2(&DMatrix::identity(m, m))));
    Ok(out)
}

/// Dense `N x N` partial `dV/dtheta_i` in the canonical ordering.
pub fn dv_dtheta(theta: &PairTheta, index: usize, p: &PairProblem) -> Result<DMatrix<f64>> {
    if index >= 10 {
        return Err(Error::invalid("parameter index out of range"));
    }
    let prt = partials(theta, p)?.swap_remove(index);
    let m = p.m();
    let (l1, l2) = (p.l1(), p.l2());
    let n = m * (l1 + l2);
    let mut out = DMatrix::zeros(n, n);
    match prt {
        Partial::Shared(s) => {
            let f = f_design(m, l1, l2);
            out = &f * s * f.transpose();
        }
        Partial::Regional { region, pc, pb } => {
            let block = kron(&pc, &pb);
            let (offset, sz) = if region == 0 {
                (0, m * l1)
            } else {
                (m * l1, m * l2)
            };
            out.view_mut((offset, offset), (sz, sz)).copy_from(&block);
        }
    }
    Ok(out)
}

/// Dense `F = blockdiag(1_L1 (x) I_M, 1_L2 (x) I_M)`.
fn f_design(m: usize, l1: usize, l2: usize) -> DMatrix<f64> {
    let n = m * (l1 + l2);
    let mut f = DMatrix::zeros(n, 2 * m);
    for (j, l, row0, col0) in [(0usize, l1, 0usize, 0usize), (1, l2, m * l1, m)] {
        let _ = j;
        for li in 0..l {
            for mi in 0..m {
                f[(row0 + li * m + mi, col0 + mi)] = 1.0;
            }
        }
    }
    f
}

/// Dense reference information matrix via an explicit `Pi`.
pub fn fisher_info_dense(theta: &PairTheta, p: &PairProblem) -> Result<DMatrix<f64>> {
    let (v11, v12, v22) = build_pair_cov(theta, p.coords1, p.coords2, p.times)?;
    let n1 = v11.nrows();
    let n2 = v22.nrows();
    let n = n1 + n2;
    let mut v = DMatrix::zeros(n, n);
    v.view_mut((0, 0), (n1, n1)).copy_from(&v11);
    v.view_mut((0, n1), (n1, n2)).copy_from(&v12);
    v.view_mut((n1, 0), (n2, n1)).copy_from(&v12.transpose());
    v.view_mut((n1, n1), (n2, n2)).copy_from(&v22);
    let mut z = DMatrix::zeros(n, 2);
    z.view_mut((0, 0), (n1, 1)).fill(1.0);
    z.view_mut((n1, 1), (n2, 1)).fill(1.0);
    let pi = pi_matrix(&v, &z)?;
    let prts = partials(theta, p)?;
    let pv: Vec<DMatrix<f64>> = (0..10)
        .map(|i| {
            let vi = dv_from_partial(&prts[i], p);
            &pi * vi
        })
        .collect();
    let mut info = DMatrix::zeros(10, 10);
    for i in 0..10 {
        for j in i..10 {
            let tr = (&pv[i] * &pv[j]).trace();
            info[(i, j)] = 0.5 * tr;
            info[(j, i)] = 0.5 * tr;
        }
    }
    Ok(info)
}

fn dv_from_partial(prt: &Partial, p: &PairProblem) -> DMatrix<f64> {
    let m = p.m();
    let (l1, l2) = (p.l1(), p.l2());
    let n = m * (l1 + l2);
    match prt {
        Partial::Shared(s) => {
            let f = f_design(m, l1, l2);
            &f * s * f.transpose()
        }
        Partial::Regional { region, pc, pb } => {
            let block = kron(pc, pb);
            let (offset, sz) = if *region == 0 {
                (0, m * l1)
            } else {
                (m * l1, m * l2)
            };
            let mut out = DMatrix::zeros(n, n);
            out.view_mut((offset, offset), (sz, sz)).copy_from(&block);
            out
        }
    }
}

// ---------------------------------------------------------------------------
// fast information matrix

/// Apply `Pc (x) Pb` to each column of `y` (columns are `M x L` stacks).
fn kron_apply_cols(pc: &DMatrix<f64>, pb: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let m = pb.nrows();
    let l = pc.nrows();
    let mut out = DMatrix::zeros(y.nrows(), y.ncols());
    for c in 0..y.ncols() {
        let u = DMatrix::from_column_slice(m, l, y.column(c).as_slice());
        let r = pb * u * pc.transpose();
        out.column_mut(c).copy_from_slice(r.as_slice());
    }
    out
}

/// Apply `D_r^-1` columnwise.
fn dinv_apply_cols(lr: &LowRankCov, r: usize, y: &DMatrix<f64>) -> DMatrix<f64> {
    let m = lr.m;
    let l = lr.l[r];
    let mut out = DMatrix::zeros(y.nrows(), y.ncols());
    for c in 0..y.ncols() {
        let u = DMatrix::from_column_slice(m, l, y.column(c).as_slice());
        let mut t = lr.qb[r].transpose() * u * &lr.qc[r];
        t.component_mul_assign(&lr.einv[r]);
        let res = &lr.qb[r] * t * lr.qc[r].transpose();
        out.column_mut(c).copy_from_slice(res.as_slice());
    }
    out
}

/// `F_r' Y`: sum the reshaped columns over voxels, giving `M x q`.
fn ft_apply_cols(m: usize, l: usize, y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, y.ncols());
    for c in 0..y.ncols() {
        let u = DMatrix::from_column_slice(m, l, y.column(c).as_slice());
        let mut s = DVector::zeros(m);
        for li in 0..l {
            s += u.column(li);
        }
        out.set_column(c, &s);
    }
    out
}

/// Information matrix via the structured decomposition; no `N x N` matrix
/// is ever formed.
pub fn fisher_info(theta: &PairTheta, p: &PairProblem) -> Result<DMatrix<f64>> {
    let lr = LowRankCov::new(theta, p)?;
    let m = lr.m;
    let (l1, l2) = (lr.l[0], lr.l[1]);
    let (n1, n2) = (m * l1, m * l2);
    let q = 2 * m + 2;

    // V^-1 Z columns and Z'V^-1Z
    let mut zc = [DVector::zeros(n1 + n2), DVector::zeros(n1 + n2)];
    zc[0].rows_mut(0, n1).fill(1.0);
    zc[1].rows_mut(n1, n2).fill(1.0);
    let vinv_z0 = lr.apply_vinv_vec(&zc[0]);
    let vinv_z1 = lr.apply_vinv_vec(&zc[1]);
    let mut w2 = DMatrix::zeros(2, 2);
    w2[(0, 0)] = zc[0].dot(&vinv_z0);
    w2[(1, 1)] = zc[1].dot(&vinv_z1);
    let w01 = zc[0].dot(&vinv_z1);
    w2[(0, 1)] = w01;
    w2[(1, 0)] = w01;
    let w2_inv = w2
        .try_inverse()
        .ok_or_else(|| Error::linalg("singular Z'V^-1Z"))?;

    // Lambda = blockdiag(Kcap^-1, (Z'V^-1Z)^-1); Kcap block absent when the
    // shared signal vanishes (then V = D and the Woodbury term is zero)
    let mut lambda = DMatrix::zeros(q, q);
    if let Some(cap) = &lr.cap {
        lambda
            .view_mut((0, 0), (2 * m, 2 * m))
            .copy_from(&cap.inverse());
    }
    lambda.view_mut((2 * m, 2 * m), (2, 2)).copy_from(&w2_inv);

    // G = [D^-1 F | V^-1 Z], stored per region block
    let mut g_blocks = Vec::with_capacity(2);
    for (r, nr, lrr) in [(0usize, n1, l1), (1, n2, l2)] {
        let mut g = DMatrix::zeros(nr, q);
        // D_r^-1 F_r occupies columns [r*m, r*m + m)
        let mut f_cols = DMatrix::zeros(nr, m);
        for mi in 0..m {
            for li in 0..lrr {
                f_cols[(li * m + mi, mi)] = 1.0;
            }
        }
        let dinv_f = dinv_apply_cols(&lr, r, &f_cols);
        g.view_mut((0, r * m), (nr, m)).copy_from(&dinv_f);
        let vz = if r == 0 {
            let mut vz = DMatrix::zeros(nr, 2);
            vz.set_column(0, &vinv_z0.rows(0, n1).into_owned());
            vz.set_column(1, &vinv_z1.rows(0, n1).into_owned());
            vz
        } else {
            let mut vz = DMatrix::zeros(nr, 2);
            vz.set_column(0, &vinv_z0.rows(n1, n2).into_owned());
            vz.set_column(1, &vinv_z1.rows(n1, n2).into_owned());
            vz
        };
        g.view_mut((0, 2 * m), (nr, 2)).copy_from(&vz);
        g_blocks.push(g);
    }

    // Pi F = D^-1 F - G Lambda (G'F), per region block (N_r x 2M)
    let mut gtf = DMatrix::zeros(q, 2 * m);
    for r in 0..2 {
        let ft_g = ft_apply_cols(m, lr.l[r], &g_blocks[r]); // M x q = F_r' G_r
        gtf.view_mut((0, r * m), (q, m))
            .copy_from(&ft_g.transpose());
    }
    let lam_gtf = &lambda * &gtf; // q x 2M
    let mut pif_blocks = Vec::with_capacity(2);
    for r in 0..2 {
        let nr = if r == 0 { n1 } else { n2 };
        let mut pif = DMatrix::zeros(nr, 2 * m);
        // D^-1 F part: same columns as in G
        pif.view_mut((0, r * m), (nr, m))
            .copy_from(&g_blocks[r].view((0, r * m), (nr, m)));
        pif -= &g_blocks[r] * &lam_gtf;
        pif_blocks.push(pif);
    }
    // Phi = F' Pi F (2M x 2M)
    let mut phi = DMatrix::zeros(2 * m, 2 * m);
    for r in 0..2 {
        let ft_pif = ft_apply_cols(m, lr.l[r], &pif_blocks[r]); // M x 2M
        phi.view_mut((r * m, 0), (m, 2 * m)).copy_from(&ft_pif);
    }

    let prts = partials(theta, p)?;

    // per-partial caches
    struct SharedCache {
        s_phi: DMatrix<f64>, // S_i Phi
        s: DMatrix<f64>,
    }
    struct RegionalCache {
        region: usize,
        ptc: DMatrix<f64>, // Qc' Pc Qc
        ptb: DMatrix<f64>, // Qb' Pb Qb
        x2: DMatrix<f64>,  // D_r^-1 P G_r
        a: DMatrix<f64>,   // G_r' P G_r
        psi: DMatrix<f64>, // (Pi F)_r' P (Pi F)_r
        pc: DMatrix<f64>,
        pb: DMatrix<f64>,
    }
    enum Cache {
        Shared(SharedCache),
        Regional(RegionalCache),
    }
    let caches: Vec<Cache> = prts
        .iter()
        .map(|prt| match prt {
            Partial::Shared(s) => Cache::Shared(SharedCache {
                s_phi: s * &phi,
                s: s.clone(),
            }),
            Partial::Regional { region, pc, pb } => {
                let r = *region;
                let x1 = kron_apply_cols(pc, pb, &g_blocks[r]);
                let x2 = dinv_apply_cols(&lr, r, &x1);
                let a = g_blocks[r].transpose() * &x1;
                let p_pif = kron_apply_cols(pc, pb, &pif_blocks[r]);
                let psi = pif_blocks[r].transpose() * p_pif;
                Cache::Regional(RegionalCache {
                    region: r,
                    ptc: lr.qc[r].transpose() * pc * &lr.qc[r],
                    ptb: lr.qb[r].transpose() * pb * &lr.qb[r],
                    x2,
                    a,
                    psi,
                    pc: pc.clone(),
                    pb: pb.clone(),
                })
            }
        })
        .collect();

    let trace_prod = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> f64 {
        // Tr{A B} without forming the product
        let mut t = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                t += a[(i, j)] * b[(j, i)];
            }
        }
        t
    };

    let mut info = DMatrix::zeros(10, 10);
    for i in 0..10 {
        for j in i..10 {
            let tr = match (&caches[i], &caches[j]) {
                (Cache::Shared(ci), Cache::Shared(cj)) => trace_prod(&ci.s_phi, &cj.s_phi),
                (Cache::Shared(ci), Cache::Regional(cj))
                | (Cache::Regional(cj), Cache::Shared(ci)) => trace_prod(&ci.s, &cj.psi),
                (Cache::Regional(ci), Cache::Regional(cj)) => {
                    if ci.region != cj.region {
                        // blocks of D^-1 vanish across regions
                        trace_prod(&(&lambda * &ci.a), &(&lambda * &cj.a))
                    } else {
                        let r = ci.region;
                        // T1: Tr{D^-1 P D^-1 Q} in the Kronecker eigenbasis
                        let wb = ci.ptb.component_mul(&cj.ptb.transpose());
                        let t_mat = lr.einv[r].transpose() * wb * &lr.einv[r]; // L x L
                        let wc = ci.ptc.component_mul(&cj.ptc.transpose());
                        let t1 = wc.component_mul(&t_mat).sum();
                        // T2, T3: mixed terms through G
                        let t2 = trace_prod(
                            &lambda,
                            &(g_blocks[r].transpose()
                                * kron_apply_cols(&cj.pc, &cj.pb, &ci.x2)),
                        );
                        let t3 = trace_prod(
                            &lambda,
                            &(g_blocks[r].transpose()
                                * kron_apply_cols(&ci.pc, &ci.pb, &cj.x2)),
                        );
                        // T4: pure low-rank term
                        let t4 = trace_prod(&(&lambda * &ci.a), &(&lambda * &cj.a));
                        t1 - t2 - t3 + t4
                    }
                }
            };
            info[(i, j)] = 0.5 * tr;
            info[(j, i)] = 0.5 * tr;
        }
    }
    Ok(info)
}

// ---------------------------------------------------------------------------
// scalar inference

/// Standard error of `rho` from the information matrix.
pub fn rho_se(fisher: &DMatrix<f64>, mode: SeMode) -> Result<f64> {
    match mode {
        SeMode::Marginal => {
            let irr = fisher[(RHO_INDEX, RHO_INDEX)];
            if irr <= 0.0 {
                return Err(Error::linalg("nonpositive rho information"));
            }
            Ok(1.0 / irr.sqrt())
        }
        SeMode::FullInverse => {
            let inv = fisher
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::linalg("singular information matrix"))?;
            let v = inv[(RHO_INDEX, RHO_INDEX)];
            if v <= 0.0 {
                return Err(Error::linalg("nonpositive rho variance"));
            }
            Ok(v.sqrt())
        }
    }
}

/// Fisher-z confidence interval
/// `tanh(arctanh(rho) +- z_{1-alpha/2} se_rho / (1 - rho^2))`.
pub fn fisher_z_ci(rho_hat: f64, se_rho: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(rho_hat > -1.0 && rho_hat < 1.0) {
        return Err(Error::invalid("rho_hat must be in (-1,1)"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must be in (0,1)"));
    }
    if se_rho < 0.0 {
        return Err(Error::invalid("negative standard error"));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let zq = normal.inverse_cdf(1.0 - alpha / 2.0);
    let se_z = se_rho / (1.0 - rho_hat * rho_hat);
    let center = rho_hat.atanh();
    Ok(((center - zq * se_z).tanh(), (center + zq * se_z).tanh()))
}

/// z-score of `arctanh(rho)` and its two-sided normal p-value.
pub fn z_and_p(rho_hat: f64, se_rho: f64) -> Result<(f64, f64)> {
    if se_rho <= 0.0 {
        return Err(Error::invalid("standard error must be positive"));
    }
    if !(rho_hat > -1.0 && rho_hat < 1.0) {
        return Err(Error::invalid("rho_hat must be in (-1,1)"));
    }
    let se_z = se_rho / (1.0 - rho_hat * rho_hat);
    let z = rho_hat.atanh() / se_z;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = 2.0 * (1.0 - normal.cdf(z.abs()));
    Ok((z, p.clamp(0.0, 1.0)))
}

/// Full inference summary for a fitted pair.
pub fn infer_pair(
    theta: &PairTheta,
    p: &PairProblem,
    mode: SeMode,
    alpha: f64,
) -> Result<PairInference> {
    let fisher = fisher_info(theta, p)?;
    let se_rho = rho_se(&fisher, mode)?;
    let rho_hat = theta.rho;
    let se_z = se_rho / (1.0 - rho_hat * rho_hat);
    let (z_score, p_value) = z_and_p(rho_hat, se_rho)?;
    let (ci_lower, ci_upper) = fisher_z_ci(rho_hat, se_rho, alpha)?;
    Ok(PairInference {
        rho_hat,
        se_rho,
        se_z,
        z_score,
        p_value,
        ci_lower,
        ci_upper,
        alpha,
        mode,
    })
}
