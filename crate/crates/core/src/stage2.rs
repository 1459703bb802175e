//! Inter-regional ReML for a region pair.
//!
//! The pair covariance is
//! `sigma^2 V`, `V = [[C1 (x) B~1 + J (x) A~, rho J (x) A~], [.., C2 (x) B~2 + J (x) A~]] + I`,
//! with `A~` the shared-signal temporal covariance in error-variance units.
//! Three evaluation paths compute the same objective:
//!
//! * `Dense` — assemble `V` and factor it whole; reference for tests.
//! * `Schur` — block factorization `W = V11 - V12 V22^-1 V12'`; avoids the
//!   full `N x N` Cholesky but still scales with `(M L)^3`.
//! * `LowRank` — the default. Writes `V = D + F (R (x) A~) F'` with
//!   `D = blockdiag(Cj (x) B~j) + I` and `F = blockdiag(1_Lj (x) I_M)`,
//!   then applies the Woodbury identity; per-evaluation cost drops to
//!   `O(L^3 + M^3)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::kernels::{self, EtaCovParams};
use crate::linalg::{cholesky_with_jitter, kron, logdet_from_cholesky, sym_eigen};
use crate::optimize::{self, OptOptions, OptProblem, OptStatus, Transform};
use crate::simulator::{RegionData, RegionTheta};
use crate::stage1::Stage1Fit;

/// Covariance parameters of the pair model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTheta {
    pub tau_eta: f64,
    pub k_eta_ratio: f64,
    pub phi_gamma_1: f64,
    pub phi_gamma_2: f64,
    pub tau_gamma_1: f64,
    pub tau_gamma_2: f64,
    pub k_gamma_ratio_1: f64,
    pub k_gamma_ratio_2: f64,
    pub rho: f64,
    pub nugget_ratio: f64,
}

impl PairTheta {
    pub fn validate(&self) -> Result<()> {
        self.eta().validate()?;
        self.region(0).validate()?;
        self.region(1).validate()?;
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho must be in (-1,1): {}", self.rho)));
        }
        Ok(())
    }

    pub fn eta(&self) -> EtaCovParams {
        EtaCovParams {
            k_eta_ratio: self.k_eta_ratio,
            tau_eta: self.tau_eta,
            nugget_ratio: self.nugget_ratio,
        }
    }

    pub fn region(&self, j: usize) -> RegionTheta {
        match j {
            0 => RegionTheta {
                phi_gamma: self.phi_gamma_1,
                k_gamma_ratio: self.k_gamma_ratio_1,
                tau_gamma: self.tau_gamma_1,
            },
            1 => RegionTheta {
                phi_gamma: self.phi_gamma_2,
                k_gamma_ratio: self.k_gamma_ratio_2,
                tau_gamma: self.tau_gamma_2,
            },
            _ => unreachable!("pair model has two regions"),
        }
    }

    /// Canonical flattening used by the information matrix:
    /// `[tau_eta, k_eta, phi_1, phi_2, tau_1, k_1, tau_2, k_2, rho, nugget]`.
    pub fn to_vec(&self) -> [f64; 10] {
        [
            self.tau_eta,
            self.k_eta_ratio,
            self.phi_gamma_1,
            self.phi_gamma_2,
            self.tau_gamma_1,
            self.k_gamma_ratio_1,
            self.tau_gamma_2,
            self.k_gamma_ratio_2,
            self.rho,
            self.nugget_ratio,
        ]
    }

    pub fn from_vec(v: &[f64]) -> Self {
        PairTheta {
            tau_eta: v[0],
            k_eta_ratio: v[1],
            phi_gamma_1: v[2],
            phi_gamma_2: v[3],
            tau_gamma_1: v[4],
            k_gamma_ratio_1: v[5],
            tau_gamma_2: v[6],
            k_gamma_ratio_2: v[7],
            rho: v[8],
            nugget_ratio: v[9],
        }
    }
}

/// Inputs of one pair problem; `x1`, `x2` are time-major (`M x L_j`).
#[derive(Clone, Copy)]
pub struct PairProblem<'a> {
    pub coords1: &'a [[f64; 3]],
    pub coords2: &'a [[f64; 3]],
    pub times: &'a [f64],
    pub x1: &'a DMatrix<f64>,
    pub x2: &'a DMatrix<f64>,
}

impl<'a> PairProblem<'a> {
    pub fn l1(&self) -> usize {
        self.coords1.len()
    }

    pub fn l2(&self) -> usize {
        self.coords2.len()
    }

    pub fn m(&self) -> usize {
        self.times.len()
    }

    pub fn n(&self) -> usize {
        self.m() * (self.l1() + self.l2())
    }

    fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.x1.nrows() != m || self.x2.nrows() != m {
            return Err(Error::invalid("time dimension mismatch"));
        }
        if self.x1.ncols() != self.l1() || self.x2.ncols() != self.l2() {
            return Err(Error::invalid("voxel dimension mismatch"));
        }
        if self.n() <= 2 {
            return Err(Error::invalid("need M(L1+L2) > 2 observations"));
        }
        Ok(())
    }

    /// Stacked data vector, region 1 first, voxel-major and time-fastest.
    fn x_vec(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.n());
        let n1 = self.m() * self.l1();
        x.rows_mut(0, n1).copy_from_slice(self.x1.as_slice());
        x.rows_mut(n1, self.m() * self.l2())
            .copy_from_slice(self.x2.as_slice());
        x
    }
}

/// Which likelihood evaluation path to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalPath {
    Dense,
    Schur,
    LowRank,
}

/// How stage-1 estimates enter the pair fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Mode {
    /// Regional parameters pinned to their stage-1 values; 4 free parameters.
    Fixed,
    /// Stage-1 values used as starting points; all 10 parameters free.
    Refine,
}

#[derive(Debug, Clone)]
pub struct Stage2Options {
    pub mode: Stage2Mode,
    pub path: EvalPath,
    pub opt: OptOptions,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            mode: Stage2Mode::Refine,
            path: EvalPath::LowRank,
            opt: OptOptions::default(),
        }
    }
}

/// Result of a stage-2 fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Fit {
    pub labels: [String; 2],
    pub theta: PairTheta,
    pub mu_hat: [f64; 2],
    pub sigma2_hat: f64,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Set when `|rho|` ended within 1e-3 of the boundary.
    pub boundary_rho: bool,
    pub mode: Stage2Mode,
}

/// Assemble the three blocks of `V` densely.
pub fn build_pair_cov(
    theta: &PairTheta,
    coords1: &[[f64; 3]],
    coords2: &[[f64; 3]],
    times: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    theta.validate()?;
    let m = times.len();
    let a = kernels::build_eta_cov(times, &theta.eta())?;
    let diag_block = |coords: &[[f64; 3]], rt: &RegionTheta| -> Result<DMatrix<f64>> {
        let l = coords.len();
        let c = kernels::build_spatial_corr(coords, rt.phi_gamma, false)?;
        let b = kernels::build_temporal_corr(times, rt.tau_gamma)? * rt.k_gamma_ratio;
        let mut v = kron(&c, &b);
        let j = DMatrix::from_element(l, l, 1.0);
        v += kron(&j, &a);
        for i in 0..(l * m) {
            v[(i, i)] += 1.0;
        }
        Ok(v)
    };
    let v11 = diag_block(coords1, &theta.region(0))?;
    let v22 = diag_block(coords2, &theta.region(1))?;
    let j12 = DMatrix::from_element(coords1.len(), coords2.len(), 1.0);
    let v12 = kron(&j12, &a) * theta.rho;
    Ok((v11, v12, v22))
}

// ---------------------------------------------------------------------------
// low-rank path

/// Per-theta workspace of the Woodbury factorization
/// `V = D + F (R (x) A~) F'`. Shared with the information-matrix code.
pub(crate) struct LowRankCov {
    pub m: usize,
    pub l: [usize; 2],
    /// Temporal eigenvectors/eigenvalues of `B~j` per region.
    pub qb: [DMatrix<f64>; 2],
    /// Spatial eigenvectors of `Cj` per region.
    pub qc: [DMatrix<f64>; 2],
    /// Inverse Kronecker eigenvalues `1 / (lc_l lb_m + 1)`, `M x Lj`.
    pub einv: [DMatrix<f64>; 2],
    /// Cholesky of the capacitance `S^-1 + F' D^-1 F`; absent when the
    /// shared signal vanishes and `V = D`.
    pub cap: Option<Cholesky<f64, Dyn>>,
    pub logdet_v: f64,
}

const EIG_FLOOR: f64 = 1e-10;

impl LowRankCov {
    pub fn new(theta: &PairTheta, p: &PairProblem) -> Result<Self> {
        theta.validate()?;
        let m = p.m();
        let mut qb_v = Vec::with_capacity(2);
        let mut qc_v = Vec::with_capacity(2);
        let mut w_v = Vec::with_capacity(2);
        let mut einv_v = Vec::with_capacity(2);
        let mut logdet_d = 0.0;
        for (coords, rt) in [
            (p.coords1, theta.region(0)),
            (p.coords2, theta.region(1)),
        ] {
            let l = coords.len();
            let c = kernels::build_spatial_corr(coords, rt.phi_gamma, false)?;
            let b = kernels::build_temporal_corr(p.times, rt.tau_gamma)? * rt.k_gamma_ratio;
            let (qc, lc) = sym_eigen(&c);
            let (qb, lb) = sym_eigen(&b);
            let mut einv = DMatrix::zeros(m, l);
            for li in 0..l {
                for mi in 0..m {
                    let e = (lc[li] * lb[mi] + 1.0).max(EIG_FLOOR);
                    logdet_d += e.ln();
                    einv[(mi, li)] = 1.0 / e;
                }
            }
            w_v.push(qc.transpose() * DVector::from_element(l, 1.0));
            qb_v.push(qb);
            qc_v.push(qc);
            einv_v.push(einv);
        }
        let a_tilde = kernels::build_eta_cov(p.times, &theta.eta())?;

        let shared = theta.k_eta_ratio + theta.nugget_ratio > 1e-14;
        let (cap, logdet_v) = if shared {
            // S = R (x) A~ with R = [[1, rho],[rho, 1]];
            // S^-1 = R^-1 (x) A~^-1, log det S = M log(1-rho^2) + 2 log det A~
            let a_chol = cholesky_with_jitter(&a_tilde, 1e-10, "shared-signal covariance")?;
            let logdet_a = logdet_from_cholesky(&a_chol);
            let a_inv = a_chol.inverse();
            let r2 = theta.rho;
            let det_r = 1.0 - r2 * r2;
            let mut cap_mat = DMatrix::zeros(2 * m, 2 * m);
            cap_mat.view_mut((0, 0), (m, m)).copy_from(&(&a_inv / det_r));
            cap_mat.view_mut((m, m), (m, m)).copy_from(&(&a_inv / det_r));
            let off = &a_inv * (-r2 / det_r);
            cap_mat.view_mut((0, m), (m, m)).copy_from(&off);
            cap_mat.view_mut((m, 0), (m, m)).copy_from(&off.transpose());
            // add F' D^-1 F = blockdiag(Qb_j diag(sum_l w_l^2 einv) Qb_j')
            for j in 0..2 {
                let mut diag = DVector::zeros(m);
                for li in 0..w_v[j].len() {
                    let wl2 = w_v[j][li] * w_v[j][li];
                    for mi in 0..m {
                        diag[mi] += wl2 * einv_v[j][(mi, li)];
                    }
                }
                let pj = &qb_v[j] * DMatrix::from_diagonal(&diag) * qb_v[j].transpose();
                let mut block = cap_mat.view_mut((j * m, j * m), (m, m));
                block += pj;
            }
            let cap = cholesky_with_jitter(&cap_mat, 1e-10, "capacitance matrix")?;
            let logdet_s = (m as f64) * det_r.ln() + 2.0 * logdet_a;
            let logdet_v = logdet_d + logdet_s + logdet_from_cholesky(&cap);
            (Some(cap), logdet_v)
        } else {
            (None, logdet_d)
        };

        Ok(LowRankCov {
            m,
            l: [p.l1(), p.l2()],
            qb: [qb_v.remove(0), qb_v.remove(0)],
            qc: [qc_v.remove(0), qc_v.remove(0)],
            einv: [einv_v.remove(0), einv_v.remove(0)],
            cap,
            logdet_v,
        })
    }

    /// `D_j^-1 U` for a time-major `M x Lj` block.
    fn apply_dinv_block(&self, j: usize, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = self.qb[j].transpose() * u * &self.qc[j];
        t.component_mul_assign(&self.einv[j]);
        &self.qb[j] * t * self.qc[j].transpose()
    }

    /// `F_j' U` for a time-major block: sum over voxels, an `M`-vector.
    fn apply_ft_block(&self, u: &DMatrix<f64>) -> DVector<f64> {
        let mut s = DVector::zeros(u.nrows());
        for li in 0..u.ncols() {
            s += u.column(li);
        }
        s
    }

    /// `V^-1 U` for a pair of time-major blocks, via Woodbury.
    pub fn apply_vinv(
        &self,
        u1: &DMatrix<f64>,
        u2: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let a1 = self.apply_dinv_block(0, u1);
        let a2 = self.apply_dinv_block(1, u2);
        let Some(cap) = &self.cap else {
            return (a1, a2);
        };
        let mut t = DVector::zeros(2 * self.m);
        t.rows_mut(0, self.m).copy_from(&self.apply_ft_block(&a1));
        t.rows_mut(self.m, self.m).copy_from(&self.apply_ft_block(&a2));
        let s = cap.solve(&t);
        // F s tiles each region's M-vector across its voxels
        let tile = |v: nalgebra::DVectorView<f64>, l: usize| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(self.m, l);
            for li in 0..l {
                out.set_column(li, &v);
            }
            out
        };
        let f1 = tile(s.rows(0, self.m), self.l[0]);
        let f2 = tile(s.rows(self.m, self.m), self.l[1]);
        (a1 - self.apply_dinv_block(0, &f1), a2 - self.apply_dinv_block(1, &f2))
    }

    /// `V^-1 u` on a stacked vector.
    pub fn apply_vinv_vec(&self, u: &DVector<f64>) -> DVector<f64> {
        let n1 = self.m * self.l[0];
        let n2 = self.m * self.l[1];
        let u1 = DMatrix::from_column_slice(self.m, self.l[0], u.rows(0, n1).as_slice());
        let u2 = DMatrix::from_column_slice(self.m, self.l[1], u.rows(n1, n2).as_slice());
        let (b1, b2) = self.apply_vinv(&u1, &u2);
        let mut out = DVector::zeros(n1 + n2);
        out.rows_mut(0, n1).copy_from_slice(b1.as_slice());
        out.rows_mut(n1, n2).copy_from_slice(b2.as_slice());
        out
    }
}

// ---------------------------------------------------------------------------
// dense and Schur paths

struct DenseCov {
    chol: Cholesky<f64, Dyn>,
    logdet_v: f64,
}

impl DenseCov {
    fn new(theta: &PairTheta, p: &PairProblem) -> Result<Self> {
        let (v11, v12, v22) = build_pair_cov(theta, p.coords1, p.coords2, p.times)?;
        let n1 = v11.nrows();
        let n2 = v22.nrows();
        let mut v = DMatrix::zeros(n1 + n2, n1 + n2);
        v.view_mut((0, 0), (n1, n1)).copy_from(&v11);
        v.view_mut((0, n1), (n1, n2)).copy_from(&v12);
        v.view_mut((n1, 0), (n2, n1)).copy_from(&v12.transpose());
        v.view_mut((n1, n1), (n2, n2)).copy_from(&v22);
        let chol = cholesky_with_jitter(&v, 1e-8, "pair covariance")?;
        let logdet_v = logdet_from_cholesky(&chol);
        Ok(DenseCov { chol, logdet_v })
    }
}

struct SchurCov {
    v12: DMatrix<f64>,
    chol_v22: Cholesky<f64, Dyn>,
    chol_w: Cholesky<f64, Dyn>,
    logdet_v: f64,
}

impl SchurCov {
    fn new(theta: &PairTheta, p: &PairProblem) -> Result<Self> {
        let (v11, v12, v22) = build_pair_cov(theta, p.coords1, p.coords2, p.times)?;
        let chol_v22 = cholesky_with_jitter(&v22, 1e-8, "V22")?;
        let w = &v11 - &v12 * chol_v22.solve(&v12.transpose());
        let chol_w = cholesky_with_jitter(&w, 1e-8, "Schur complement")?;
        let logdet_v = logdet_from_cholesky(&chol_w) + logdet_from_cholesky(&chol_v22);
        Ok(SchurCov {
            v12,
            chol_v22,
            chol_w,
            logdet_v,
        })
    }

    /// Two-step block substitution for `V^-1 z`.
    fn apply_vinv(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let n1 = self.v12.nrows();
        let n2 = self.v12.ncols();
        let z1 = z.rows(0, n1).into_owned();
        let z2 = z.rows(n1, n2).into_owned();
        let b1 = self.chol_w.solve(&(&z1 - &self.v12 * self.chol_v22.solve(&z2)));
        let b2 = self.chol_v22.solve(&(&z2 - self.v12.transpose() * &b1));
        let mut out = DMatrix::zeros(n1 + n2, z.ncols());
        out.rows_mut(0, n1).copy_from(&b1);
        out.rows_mut(n1, n2).copy_from(&b2);
        out
    }
}

// ---------------------------------------------------------------------------
// common objective pieces

struct InterEval {
    objective: f64,
    mu: [f64; 2],
    quad: f64,
}

/// Design-column sums against the data vector and GLS pieces; the design
/// has one intercept column per region, so everything reduces to block sums.
fn gls_pieces(
    vinv_x: &DVector<f64>,
    vinv_z: &DMatrix<f64>,
    x: &DVector<f64>,
    n1: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, [f64; 2])> {
    let n = x.len();
    // Z' V^-1 Z and Z' V^-1 x from the two solved columns
    let mut ztvz = DMatrix::zeros(2, 2);
    let mut ztvx = DVector::zeros(2);
    for (col, range) in [(0usize, 0..n1), (1usize, n1..n)] {
        for i in range {
            ztvz[(col, 0)] += vinv_z[(i, 0)];
            ztvz[(col, 1)] += vinv_z[(i, 1)];
            ztvx[col] += vinv_x[i];
        }
    }
    // symmetrize the roundoff
    let z01 = 0.5 * (ztvz[(0, 1)] + ztvz[(1, 0)]);
    ztvz[(0, 1)] = z01;
    ztvz[(1, 0)] = z01;
    let chol = ztvz
        .clone()
        .cholesky()
        .ok_or_else(|| Error::linalg("singular Z'V^-1Z"))?;
    let mu = chol.solve(&ztvx);
    Ok((ztvz, ztvx, [mu[0], mu[1]]))
}

fn finish_eval(
    logdet_v: f64,
    vinv_x: &DVector<f64>,
    vinv_z: &DMatrix<f64>,
    x: &DVector<f64>,
    n1: usize,
) -> Result<InterEval> {
    let n = x.len();
    let (ztvz, ztvx, mu) = gls_pieces(vinv_x, vinv_z, x, n1)?;
    let muv = DVector::from_column_slice(&mu);
    // r' V^-1 r = x'V^-1x - 2 mu'Z'V^-1x + mu'Z'V^-1Z mu
    let quad = x.dot(vinv_x) - 2.0 * muv.dot(&ztvx) + (muv.transpose() * &ztvz * &muv)[(0, 0)];
    if quad <= 0.0 {
        return Err(Error::invalid("degenerate zero residual"));
    }
    let logdet_ztvz = ztvz
        .determinant()
        .max(f64::MIN_POSITIVE)
        .ln();
    let dof = (n - 2) as f64;
    Ok(InterEval {
        objective: 0.5 * logdet_v + 0.5 * logdet_ztvz + 0.5 * dof * quad.ln(),
        mu,
        quad,
    })
}

fn z_columns(n1: usize, n2: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n1 + n2, 2);
    z.view_mut((0, 0), (n1, 1)).fill(1.0);
    z.view_mut((n1, 1), (n2, 1)).fill(1.0);
    z
}

fn eval_inter(theta: &PairTheta, p: &PairProblem, path: EvalPath) -> Result<InterEval> {
    p.validate()?;
    let n1 = p.m() * p.l1();
    let n2 = p.m() * p.l2();
    let x = p.x_vec();
    match path {
        EvalPath::LowRank => {
            let cov = LowRankCov::new(theta, p)?;
            let vinv_x = cov.apply_vinv_vec(&x);
            let z = z_columns(n1, n2);
            let mut vinv_z = DMatrix::zeros(n1 + n2, 2);
            for c in 0..2 {
                let zc = z.column(c).into_owned();
                vinv_z.set_column(c, &cov.apply_vinv_vec(&zc));
            }
            finish_eval(cov.logdet_v, &vinv_x, &vinv_z, &x, n1)
        }
        EvalPath::Schur => {
            let cov = SchurCov::new(theta, p)?;
            let mut rhs = DMatrix::zeros(n1 + n2, 3);
            rhs.set_column(0, &x);
            let z = z_columns(n1, n2);
            rhs.set_column(1, &z.column(0).into_owned());
            rhs.set_column(2, &z.column(1).into_owned());
            let solved = cov.apply_vinv(&rhs);
            let vinv_x = solved.column(0).into_owned();
            let vinv_z = solved.columns(1, 2).into_owned();
            finish_eval(cov.logdet_v, &vinv_x, &vinv_z, &x, n1)
        }
        EvalPath::Dense => {
            let cov = DenseCov::new(theta, p)?;
            let vinv_x = cov.chol.solve(&x);
            let z = z_columns(n1, n2);
            let vinv_z = cov.chol.solve(&z);
            finish_eval(cov.logdet_v, &vinv_x, &vinv_z, &x, n1)
        }
    }
}

/// Negative ReML objective of the pair model (additive constants dropped).
pub fn neg_reml_inter(theta: &PairTheta, p: &PairProblem, path: EvalPath) -> Result<f64> {
    Ok(eval_inter(theta, p, path)?.objective)
}

/// GLS estimate of the two region means.
pub fn gls_mu(theta: &PairTheta, p: &PairProblem) -> Result<[f64; 2]> {
    Ok(eval_inter(theta, p, EvalPath::LowRank)?.mu)
}

/// Profiled error variance `r' V^-1 r / (M(L1+L2) - 2)`.
pub fn profile_sigma2_inter(theta: &PairTheta, p: &PairProblem) -> Result<f64> {
    let eval = eval_inter(theta, p, EvalPath::LowRank)?;
    Ok(eval.quad / (p.n() - 2) as f64)
}

/// Starting values for the pair fit, built from the two stage-1 fits.
pub fn init_theta(fit1: &Stage1Fit, fit2: &Stage1Fit) -> PairTheta {
    let rho0 = baselines::fe_correlation(&fit1.nu_hat, &fit2.nu_hat)
        .unwrap_or(0.0)
        .clamp(-0.95, 0.95);
    let sigma2 = 0.5 * (fit1.sigma2_hat + fit2.sigma2_hat);
    let var_of = |nu: &[f64]| {
        let m = nu.len() as f64;
        let mean = nu.iter().sum::<f64>() / m;
        nu.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m
    };
    // the fitted curves track mu + eta, so their temporal variance scaled by
    // the error variance approximates the shared-signal ratio
    let k_eta = (0.5 * (var_of(&fit1.nu_hat) + var_of(&fit2.nu_hat)) / sigma2).max(0.05);
    PairTheta {
        tau_eta: 0.25,
        k_eta_ratio: k_eta,
        phi_gamma_1: fit1.theta.phi_gamma,
        phi_gamma_2: fit2.theta.phi_gamma,
        tau_gamma_1: fit1.theta.tau_gamma,
        tau_gamma_2: fit2.theta.tau_gamma,
        k_gamma_ratio_1: fit1.theta.k_gamma_ratio,
        k_gamma_ratio_2: fit2.theta.k_gamma_ratio,
        rho: rho0,
        nugget_ratio: 0.1,
    }
}

/// Fit the pair model, warm-started from the stage-1 fits.
pub fn fit_pair(
    region1: &RegionData,
    region2: &RegionData,
    fit1: &Stage1Fit,
    fit2: &Stage1Fit,
    opts: &Stage2Options,
) -> Result<Stage2Fit> {
    let m = region1.n_times();
    if region2.n_times() != m {
        return Err(Error::invalid("regions have different time grids"));
    }
    let times: Vec<f64> = (1..=m).map(|t| t as f64).collect();
    let x1 = region1.time_major();
    let x2 = region2.time_major();
    let p = PairProblem {
        coords1: &region1.coords,
        coords2: &region2.coords,
        times: &times,
        x1: &x1,
        x2: &x2,
    };
    let init = init_theta(fit1, fit2);
    let path = opts.path;

    let (free_init, transforms, assemble): (
        Vec<f64>,
        Vec<Transform>,
        Box<dyn Fn(&[f64]) -> PairTheta>,
    ) = match opts.mode {
        Stage2Mode::Fixed => {
            let base = init;
            (
                vec![init.tau_eta, init.k_eta_ratio, init.rho, init.nugget_ratio],
                vec![
                    Transform::Log,
                    Transform::Log,
                    Transform::Arctanh,
                    Transform::Log,
                ],
                Box::new(move |v: &[f64]| PairTheta {
                    tau_eta: v[0],
                    k_eta_ratio: v[1],
                    rho: v[2],
                    nugget_ratio: v[3],
                    ..base
                }),
            )
        }
        Stage2Mode::Refine => {
            let mut tf = vec![Transform::Log; 10];
            tf[8] = Transform::Arctanh;
            (
                init.to_vec().to_vec(),
                tf,
                Box::new(|v: &[f64]| PairTheta::from_vec(v)),
            )
        }
    };

    let objective = |params: &[f64]| -> Option<f64> {
        let theta = assemble(params);
        neg_reml_inter(&theta, &p, path).ok()
    };
    let problem = OptProblem {
        dim: free_init.len(),
        transforms,
        objective: &objective,
    };
    let result = optimize::minimize(&problem, &free_init, &opts.opt)?;
    let theta = assemble(&result.argmin);
    let final_eval = eval_inter(&theta, &p, path)?;
    let sigma2_hat = final_eval.quad / (p.n() - 2) as f64;
    Ok(Stage2Fit {
        labels: [region1.label.clone(), region2.label.clone()],
        theta,
        mu_hat: final_eval.mu,
        sigma2_hat,
        objective: final_eval.objective,
        iterations: result.iterations,
        evaluations: result.evaluations,
        converged: result.status != OptStatus::MaxIter,
        boundary_rho: theta.rho.abs() > 0.999,
        mode: opts.mode,
    })
}
