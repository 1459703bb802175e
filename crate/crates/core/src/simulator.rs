//! Synthetic voxel-level datasets from the full mixed model, plus the exact
//! joint covariance used as a small-instance oracle.
//!
//! Sampling factors the covariance componentwise: the shared regional
//! signals are drawn through `chol(R) (x) chol(A)`, each idiosyncratic field
//! through `chol(C_j) (x) chol(B_j)`, and measurement error is added iid.
//! This is exact and costs `O(J^3 + L^3 + M^3)` instead of a full `N x N`
//! Cholesky. The generator is ChaCha8 (documented, seekable streams), with
//! replicate `q` drawn from stream `q` of the run seed.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, EtaCovParams};
use crate::linalg::{cholesky_with_jitter, kron};

/// Stage-1 variance-component parameters of one region's idiosyncratic field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionTheta {
    /// Spatial rate of the Matern-5/2 kernel.
    pub phi_gamma: f64,
    /// Variance ratio `k~_gamma = k_gamma / sigma^2`.
    pub k_gamma_ratio: f64,
    /// Temporal rate of the idiosyncratic field.
    pub tau_gamma: f64,
}

impl RegionTheta {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi_gamma > 0.0) {
            return Err(Error::invalid(format!(
                "phi_gamma must be > 0: {}",
                self.phi_gamma
            )));
        }
        if !(self.k_gamma_ratio >= 0.0) {
            return Err(Error::invalid(format!(
                "k_gamma_ratio must be >= 0: {}",
                self.k_gamma_ratio
            )));
        }
        if !(self.tau_gamma > 0.0) {
            return Err(Error::invalid(format!(
                "tau_gamma must be > 0: {}",
                self.tau_gamma
            )));
        }
        Ok(())
    }
}

/// Full generative configuration for a `J`-region dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub labels: Vec<String>,
    /// Region mean levels (length `J`).
    pub mu: Vec<f64>,
    /// `J x J` inter-regional correlation matrix (row-major).
    pub rho: Vec<Vec<f64>>,
    pub eta: EtaCovParams,
    /// Per-region idiosyncratic parameters (length `J`).
    pub regions: Vec<RegionTheta>,
    /// Measurement-error variance.
    pub sigma2: f64,
    /// Timepoints per signal.
    pub m: usize,
    /// Voxels per region.
    pub l: usize,
    /// Side length of the cubic sampling lattice.
    pub lattice_side: usize,
    pub seed: u64,
}

/// One region's voxel coordinates and signal matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionData {
    pub label: String,
    /// `L x 3` voxel coordinates.
    pub coords: Vec<[f64; 3]>,
    /// `L x M` signals; row `l` is the time series at `coords[l]`.
    /// The vectorized form is voxel-major with time fastest.
    pub x: DMatrix<f64>,
}

impl RegionData {
    pub fn n_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn n_times(&self) -> usize {
        self.x.ncols()
    }

    /// `M x L` working copy (time by voxel), the layout used by the
    /// Kronecker likelihood paths.
    pub fn time_major(&self) -> DMatrix<f64> {
        self.x.transpose()
    }
}

impl ModelConfig {
    pub fn n_regions(&self) -> usize {
        self.mu.len()
    }

    pub fn times(&self) -> Vec<f64> {
        (1..=self.m).map(|t| t as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_regions();
        if j == 0 {
            return Err(Error::invalid("at least one region required"));
        }
        if self.labels.len() != j || self.regions.len() != j || self.rho.len() != j {
            return Err(Error::invalid("mu, labels, regions, rho sizes disagree"));
        }
        for (i, row) in self.rho.iter().enumerate() {
            if row.len() != j {
                return Err(Error::invalid("rho is not square"));
            }
            if (row[i] - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("rho must have unit diagonal"));
            }
            for (k, &v) in row.iter().enumerate() {
                if (v - self.rho[k][i]).abs() > 1e-12 {
                    return Err(Error::invalid("rho must be symmetric"));
                }
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::invalid("rho entries must lie in [-1, 1]"));
                }
            }
        }
        if self.rho_matrix().clone().cholesky().is_none() {
            return Err(Error::invalid("rho must be positive definite"));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::invalid("sigma2 must be > 0"));
        }
        if self.m < 1 || self.l < 1 {
            return Err(Error::invalid("m and l must be >= 1"));
        }
        if self.l > self.lattice_side.pow(3) {
            return Err(Error::invalid(format!(
                "cannot place {} voxels on a lattice of {} cells",
                self.l,
                self.lattice_side.pow(3)
            )));
        }
        self.eta.validate()?;
        for r in &self.regions {
            if !(r.phi_gamma > 0.0) || !(r.tau_gamma > 0.0) || r.k_gamma_ratio < 0.0 {
                return Err(Error::invalid("regional kernel parameters out of domain"));
            }
        }
        Ok(())
    }

    pub fn rho_matrix(&self) -> DMatrix<f64> {
        let j = self.n_regions();
        DMatrix::from_fn(j, j, |a, b| self.rho[a][b])
    }

    /// RNG for replicate `replicate` of this configuration's seed.
    pub fn rng(&self, replicate: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate);
        rng
    }
}

/// Draw `l` distinct lattice points from `{0..side-1}^3`, uniform without
/// replacement.
pub fn sample_voxels(lattice_side: usize, l: usize, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
    let cells = lattice_side.pow(3);
    if l > cells {
        return Err(Error::invalid(format!(
            "requested {l} voxels from a lattice of {cells} cells"
        )));
    }
    let idx = rand::seq::index::sample(rng, cells, l);
    Ok(idx
        .iter()
        .map(|i| {
            let x = i % lattice_side;
            let y = (i / lattice_side) % lattice_side;
            let z = i / (lattice_side * lattice_side);
            [x as f64, y as f64, z as f64]
        })
        .collect())
}

fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Simulate one dataset for replicate 0 of `config.seed`.
pub fn simulate_dataset(config: &ModelConfig) -> Result<Vec<RegionData>> {
    simulate_replicate(config, 0)
}

/// Simulate one dataset from stream `replicate` of `config.seed`.
pub fn simulate_replicate(config: &ModelConfig, replicate: u64) -> Result<Vec<RegionData>> {
    config.validate()?;
    let mut rng = config.rng(replicate);
    let j = config.n_regions();
    let times = config.times();

    let coords: Vec<Vec<[f64; 3]>> = (0..j)
        .map(|_| sample_voxels(config.lattice_side, config.l, &mut rng))
        .collect::<Result<_>>()?;

    // shared signals: eta = chol(R) Z chol(A)^T, Cov = R (x) A
    let a_eta = kernels::build_eta_cov(&times, &config.eta)? * config.sigma2;
    let chol_r = cholesky_with_jitter(&config.rho_matrix(), 1e-8, "inter-regional correlation")?;
    let chol_a = cholesky_with_jitter(&a_eta, 1e-8, "shared-signal covariance")?;
    let z = standard_normal_matrix(j, config.m, &mut rng);
    let eta = chol_r.l() * z * chol_a.l().transpose();

    let sd_noise = config.sigma2.sqrt();
    let mut out = Vec::with_capacity(j);
    for (r, region) in config.regions.iter().enumerate() {
        let c = kernels::build_spatial_corr(&coords[r], region.phi_gamma, false)?;
        let b = kernels::build_temporal_corr(&times, region.tau_gamma)?
            * (region.k_gamma_ratio * config.sigma2);
        let gamma = if region.k_gamma_ratio > 0.0 {
            let chol_c = cholesky_with_jitter(&c, 1e-8, "spatial correlation")?;
            let chol_b = cholesky_with_jitter(&b, 1e-8, "idiosyncratic temporal covariance")?;
            let z = standard_normal_matrix(config.l, config.m, &mut rng);
            chol_c.l() * z * chol_b.l().transpose()
        } else {
            // keep the RNG stream layout identical whether or not gamma is active
            let _ = standard_normal_matrix(config.l, config.m, &mut rng);
            DMatrix::zeros(config.l, config.m)
        };
        let x = DMatrix::from_fn(config.l, config.m, |l_i, m_i| {
            config.mu[r]
                + eta[(r, m_i)]
                + gamma[(l_i, m_i)]
                + sd_noise * rng.sample::<f64, _>(StandardNormal)
        });
        out.push(RegionData {
            label: config.labels[r].clone(),
            coords: coords[r].clone(),
            x,
        });
    }
    Ok(out)
}

/// Exact joint covariance of the vectorized dataset (voxel-major, time
/// fastest, regions stacked in order). Intended for small oracle instances.
pub fn joint_covariance(
    config: &ModelConfig,
    coords: &[Vec<[f64; 3]>],
    times: &[f64],
) -> Result<DMatrix<f64>> {
    config.validate()?;
    let j = config.n_regions();
    if coords.len() != j {
        return Err(Error::invalid("coords count differs from region count"));
    }
    let m = times.len();
    let a_tilde = kernels::build_eta_cov(times, &config.eta)?;
    let sizes: Vec<usize> = coords.iter().map(|c| c.len() * m).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let out = *acc;
            *acc += s;
            Some(out)
        })
        .collect();
    let n: usize = sizes.iter().sum();
    let mut v = DMatrix::zeros(n, n);
    for r in 0..j {
        let lr = coords[r].len();
        let c = kernels::build_spatial_corr(&coords[r], config.regions[r].phi_gamma, false)?;
        let b = kernels::build_temporal_corr(times, config.regions[r].tau_gamma)?
            * config.regions[r].k_gamma_ratio;
        let ones_rr = DMatrix::from_element(lr, lr, 1.0);
        let mut diag_block = kron(&c, &b) + kron(&ones_rr, &a_tilde);
        for i in 0..sizes[r] {
            diag_block[(i, i)] += 1.0;
        }
        diag_block *= config.sigma2;
        v.view_mut((offsets[r], offsets[r]), (sizes[r], sizes[r]))
            .copy_from(&diag_block);
        for s in (r + 1)..j {
            let ls = coords[s].len();
            let ones_rs = DMatrix::from_element(lr, ls, 1.0);
            let cross = kron(&ones_rs, &a_tilde) * (config.rho[r][s] * config.sigma2);
            v.view_mut((offsets[r], offsets[s]), (sizes[r], sizes[s]))
                .copy_from(&cross);
            v.view_mut((offsets[s], offsets[r]), (sizes[s], sizes[r]))
                .copy_from(&cross.transpose());
        }
    }
    Ok(v)
}

/// The three-region simulation scenario used throughout the tests:
/// `mu = (1, 10, 20)`, `rho = (0.1, 0.35, 0.6)`, `k~_gamma = 2`,
/// `tau_gamma = 0.5`, `sigma^2 = 1`, `tau_eta = 0.25`, nugget `0.1`.
pub fn three_region_config(k_eta_ratio: f64, phi_gamma: f64, seed: u64) -> ModelConfig {
    let region = RegionTheta {
        phi_gamma,
        k_gamma_ratio: 2.0,
        tau_gamma: 0.5,
    };
    ModelConfig {
        labels: vec!["R1".into(), "R2".into(), "R3".into()],
        mu: vec![1.0, 10.0, 20.0],
        rho: vec![
            vec![1.0, 0.1, 0.35],
            vec![0.1, 1.0, 0.6],
            vec![0.35, 0.6, 1.0],
        ],
        eta: EtaCovParams {
            k_eta_ratio,
            tau_eta: 0.25,
            nugget_ratio: 0.1,
        },
        regions: vec![region; 3],
        sigma2: 1.0,
        m: 60,
        l: 50,
        lattice_side: 7,
        seed,
    }
}
