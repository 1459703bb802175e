//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! (visible with `--nocapture`); run with `cargo test --test acceptance`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fcmix::baselines::{ca_limit, corr_of_averages, CALimitInputs};
use fcmix::basis::make_basis;
use fcmix::inference::{dv_dtheta, fisher_info};
use fcmix::network::{fit_network, NetworkOptions};
use fcmix::simulator::{simulate_replicate, three_region_config, RegionTheta};
use fcmix::stage1::{fit_region, neg_reml_intra_dense, neg_reml_intra_fast, IntraProblem};
use fcmix::stage2::{
    build_pair_cov, fit_pair, neg_reml_inter, EvalPath, PairProblem, PairTheta, Stage2Mode,
};

fn check(criterion: usize, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn rand_coords(rng: &mut ChaCha8Rng, l: usize) -> Vec<[f64; 3]> {
    (0..l)
        .map(|_| {
            [
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            ]
        })
        .collect()
}

fn rand_region_theta(rng: &mut ChaCha8Rng) -> RegionTheta {
    RegionTheta {
        phi_gamma: rng.gen_range(0.3..1.5),
        k_gamma_ratio: rng.gen_range(0.5..2.5),
        tau_gamma: rng.gen_range(0.2..1.0),
    }
}

fn rand_pair_theta(rng: &mut ChaCha8Rng) -> PairTheta {
    PairTheta {
        tau_eta: rng.gen_range(0.1..0.6),
        k_eta_ratio: rng.gen_range(0.2..1.5),
        phi_gamma_1: rng.gen_range(0.3..1.5),
        phi_gamma_2: rng.gen_range(0.3..1.5),
        tau_gamma_1: rng.gen_range(0.2..1.0),
        k_gamma_ratio_1: rng.gen_range(0.5..2.5),
        tau_gamma_2: rng.gen_range(0.2..1.0),
        k_gamma_ratio_2: rng.gen_range(0.5..2.5),
        rho: rng.gen_range(-0.8..0.8),
        nugget_ratio: rng.gen_range(0.05..0.3),
    }
}

fn rand_signal(rng: &mut ChaCha8Rng, m: usize, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, l, |_, _| rng.sample(StandardNormal))
}

#[test]
fn c01_objective_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.gen_range(5..=6);
        let times: Vec<f64> = (1..=m).map(|t| t as f64).collect();
        let gtilde = make_basis(&times, 4).unwrap();

        // intra-regional: Kronecker fast path vs textbook dense assembly
        let l = rng.gen_range(3..=5);
        let coords = rand_coords(&mut rng, l);
        let x = rand_signal(&mut rng, m, l);
        let rt = rand_region_theta(&mut rng);
        let p1 = IntraProblem {
            coords: &coords,
            times: &times,
            x: &x,
            gtilde: &gtilde,
        };
        let fast = neg_reml_intra_fast(&rt, &p1).unwrap();
        let dense = neg_reml_intra_dense(&rt, &p1).unwrap();
        worst = worst.max((fast - dense).abs() / dense.abs().max(1.0));

        // inter-regional: Schur path vs dense assembly
        let (l1, l2) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
        let coords1 = rand_coords(&mut rng, l1);
        let coords2 = rand_coords(&mut rng, l2);
        let x1 = rand_signal(&mut rng, m, l1);
        let x2 = rand_signal(&mut rng, m, l2);
        let pt = rand_pair_theta(&mut rng);
        let p2 = PairProblem {
            coords1: &coords1,
            coords2: &coords2,
            times: &times,
            x1: &x1,
            x2: &x2,
        };
        let schur = neg_reml_inter(&pt, &p2, EvalPath::Schur).unwrap();
        let dense2 = neg_reml_inter(&pt, &p2, EvalPath::Dense).unwrap();
        worst = worst.max((schur - dense2).abs() / dense2.abs().max(1.0));
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        1,
        worst <= 1e-8 && elapsed < 60.0,
        &format!("worst rel err {worst:.2e} over 100 instances in {elapsed:.1}s"),
    );
}

fn assemble_dense_v(theta: &PairTheta, p: &PairProblem) -> DMatrix<f64> {
    let (v11, v12, v22) = build_pair_cov(theta, p.coords1, p.coords2, p.times).unwrap();
    let (n1, n2) = (v11.nrows(), v22.nrows());
    let mut v = DMatrix::zeros(n1 + n2, n1 + n2);
    v.view_mut((0, 0), (n1, n1)).copy_from(&v11);
    v.view_mut((0, n1), (n1, n2)).copy_from(&v12);
    v.view_mut((n1, 0), (n2, n1)).copy_from(&v12.transpose());
    v.view_mut((n1, n1), (n2, n2)).copy_from(&v22);
    v
}

#[test]
fn c02_covariance_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let m = 5;
    let times: Vec<f64> = (1..=m).map(|t| t as f64).collect();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let coords1 = rand_coords(&mut rng, 4);
        let coords2 = rand_coords(&mut rng, 4);
        let x1 = rand_signal(&mut rng, m, 4);
        let x2 = rand_signal(&mut rng, m, 4);
        let theta = rand_pair_theta(&mut rng);
        let p = PairProblem {
            coords1: &coords1,
            coords2: &coords2,
            times: &times,
            x1: &x1,
            x2: &x2,
        };
        let base = theta.to_vec();
        for i in 0..base.len() {
            let analytic = dv_dtheta(&theta, i, &p).unwrap();
            let h = 1e-5 * base[i].abs().max(1.0);
            let mut up = base.clone();
            let mut dn = base.clone();
            up[i] += h;
            dn[i] -= h;
            let vp = assemble_dense_v(&PairTheta::from_vec(&up), &p);
            let vm = assemble_dense_v(&PairTheta::from_vec(&dn), &p);
            let fd = (vp - vm) / (2.0 * h);
            let rel = (&fd - &analytic).norm() / analytic.norm().max(1e-12);
            worst = worst.max(rel);
        }
    }
    check(
        2,
        worst <= 1e-5,
        &format!("worst rel err {worst:.2e} over 20 draws x 10 parameters"),
    );
}

#[test]
fn c03_fisher_information_well_formed() {
    // fit one full-scale scenario pair, then examine the information matrix
    let cfg = three_region_config(1.0, 1.0, 303);
    let data = simulate_replicate(&cfg, 0).unwrap();
    let opts = NetworkOptions::default();
    let fit1 = fit_region(&data[1], &opts.stage1).unwrap();
    let fit2 = fit_region(&data[2], &opts.stage1).unwrap();
    let fit = fit_pair(&data[1], &data[2], &fit1, &fit2, &opts.stage2).unwrap();

    let times: Vec<f64> = (1..=data[1].n_times()).map(|t| t as f64).collect();
    let x1 = data[1].time_major();
    let x2 = data[2].time_major();
    let p = PairProblem {
        coords1: &data[1].coords,
        coords2: &data[2].coords,
        times: &times,
        x1: &x1,
        x2: &x2,
    };
    let info = fisher_info(&fit.theta, &p).unwrap();
    let asym = (&info - info.transpose()).abs().max();
    let min_eig = info
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    check(
        3,
        asym <= 1e-10 && min_eig >= -1e-8,
        &format!("asymmetry {asym:.2e}, min eigenvalue {min_eig:.3e}"),
    );
}

const TRUE_RHO: [f64; 3] = [0.1, 0.35, 0.6];

struct CellStats {
    /// Per edge (indexed as pairs (0,1),(0,2),(1,2)): ReML and CA estimates.
    reml: [Vec<f64>; 3],
    ca: [Vec<f64>; 3],
    /// Nominal 90% interval hits per edge.
    covered: [Vec<bool>; 3],
    failures: usize,
}

fn rmse(est: &[f64], truth: f64) -> f64 {
    (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / est.len() as f64).sqrt()
}

fn bias_abs(est: &[f64], truth: f64) -> f64 {
    (est.iter().sum::<f64>() / est.len() as f64 - truth).abs()
}

fn run_cell(k_eta: f64, phi: f64, seed: u64, reps: u64) -> CellStats {
    let cfg = three_region_config(k_eta, phi, seed);
    let opts = NetworkOptions {
        alpha: 0.10,
        ..Default::default()
    };
    let mut stats = CellStats {
        reml: [vec![], vec![], vec![]],
        ca: [vec![], vec![], vec![]],
        covered: [vec![], vec![], vec![]],
        failures: 0,
    };
    for q in 0..reps {
        let data = simulate_replicate(&cfg, q).unwrap();
        let result = fit_network(&data, &opts).unwrap();
        for (e, rec) in result.pairs.iter().enumerate() {
            match (rec.rho_hat, rec.ca, rec.ci_lower, rec.ci_upper) {
                (Some(rho), Some(ca), Some(lo), Some(hi)) => {
                    stats.reml[e].push(rho);
                    stats.ca[e].push(ca);
                    stats.covered[e].push(lo <= TRUE_RHO[e] && TRUE_RHO[e] <= hi);
                }
                _ => stats.failures += 1,
            }
        }
    }
    stats
}

#[test]
fn c04_c05_c06_replication_study() {
    let q = 50;
    // the three scenario cells needed by criteria 4-6
    let weak_intra = run_cell(1.0, 1.0, 404, q);
    let strong_intra_weak = run_cell(0.5, 0.25, 405, q);
    let strong_intra_strong = run_cell(1.0, 0.25, 406, q);
    let total_fits = 3 * 3 * q as usize;
    let failures =
        weak_intra.failures + strong_intra_weak.failures + strong_intra_strong.failures;
    assert!(
        failures <= total_fits / 20,
        "{failures} of {total_fits} pair fits failed"
    );

    // criterion 4: RMSE for the rho=0.6 edge in the weak-intra, strong-signal cell
    let reml_rmse = rmse(&weak_intra.reml[2], 0.6);
    let ca_rmse = rmse(&weak_intra.ca[2], 0.6);
    check(
        4,
        (reml_rmse - 0.1309).abs() <= 0.06 && (ca_rmse - 0.2602).abs() <= 0.08,
        &format!("reml rmse {reml_rmse:.4} (target 0.1309±0.06), ca rmse {ca_rmse:.4} (target 0.2602±0.08)"),
    );

    // criterion 5: bias separation in the strong-intra cells
    let ca_bias = bias_abs(&strong_intra_weak.ca[2], 0.6);
    let reml_bias = bias_abs(&strong_intra_weak.reml[2], 0.6);
    let mut dominated = true;
    for cell in [&strong_intra_weak, &strong_intra_strong] {
        for e in 0..3 {
            if rmse(&cell.reml[e], TRUE_RHO[e]) >= rmse(&cell.ca[e], TRUE_RHO[e]) {
                dominated = false;
            }
        }
    }
    check(
        5,
        ca_bias >= 0.30 && reml_bias <= 0.10 && dominated,
        &format!(
            "ca |bias| {ca_bias:.4} (>=0.30), reml |bias| {reml_bias:.4} (<=0.10), \
             reml rmse < ca rmse in all six strong-intra cells: {dominated}"
        ),
    );

    // criterion 6: interval coverage pooled over the three edges
    let coverage = |cell: &CellStats| {
        let hits: usize = cell
            .covered
            .iter()
            .map(|v| v.iter().filter(|c| **c).count())
            .sum();
        let n: usize = cell.covered.iter().map(Vec::len).sum();
        hits as f64 / n as f64
    };
    let cov_weak = coverage(&weak_intra);
    let cov_strong = coverage(&strong_intra_weak);
    check(
        6,
        (0.80..=0.97).contains(&cov_weak) && cov_strong < 0.90,
        &format!("coverage {cov_weak:.3} (in [0.80,0.97]) vs {cov_strong:.3} (< 0.90)"),
    );
}

#[test]
fn c07_null_network_false_discovery_control() {
    let mut cfg = three_region_config(1.0, 1.0, 707);
    for a in 0..3 {
        for b in 0..3 {
            cfg.rho[a][b] = if a == b { 1.0 } else { 0.0 };
        }
    }
    cfg.l = 20;
    cfg.m = 40;
    let opts = NetworkOptions {
        q: 0.01,
        stage1: fcmix::stage1::Stage1Options {
            basis_size: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut with_discovery = 0;
    for q in 0..100 {
        let data = simulate_replicate(&cfg, q).unwrap();
        let result = fit_network(&data, &opts).unwrap();
        if result.pairs.iter().any(|p| p.selected) {
            with_discovery += 1;
        }
    }
    check(
        7,
        with_discovery <= 5,
        &format!("{with_discovery}/100 null networks had a discovery (allow <= 5)"),
    );
}

#[test]
fn c08_ca_limit_law() {
    let m = 5000;
    let l = 10usize;
    let lf = l as f64;
    let settings: [(f64, f64, f64, f64); 3] = [
        (0.6, 0.4, 0.7, 0.5),
        (0.9, 0.8, 0.5, 0.2),
        (0.3, 0.3, 0.9, 1.0),
    ];
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for (c1, c2, r_f, sigma2) in settings {
        let rho_star = f64::sqrt(c1 * c2) * r_f;
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
        let inputs = CALimitInputs {
            alpha_1: (1.0 + (lf - 1.0) * c1) / lf,
            alpha_2: (1.0 + (lf - 1.0) * c2) / lf,
            beta_1: sigma2 / lf,
            beta_2: sigma2 / lf,
        };
        let limit = ca_limit(&inputs, rho_star).unwrap();
        let mc = corr_of_averages(&x1, &x2).unwrap();
        worst = worst.max((mc - limit).abs());
    }
    check(
        8,
        worst < 0.02,
        &format!("worst |mc - limit| {worst:.4} over 3 settings (< 0.02)"),
    );
}

#[test]
fn c09_performance_at_scale() {
    let cfg = three_region_config(1.0, 1.0, 909);
    let data = simulate_replicate(&cfg, 0).unwrap();
    let opts = NetworkOptions::default();

    let fit1 = fit_region(&data[0], &opts.stage1).unwrap();
    let fit2 = fit_region(&data[1], &opts.stage1).unwrap();
    assert_eq!(opts.stage2.mode, Stage2Mode::Refine);
    let start = Instant::now();
    let fit = fit_pair(&data[0], &data[1], &fit1, &fit2, &opts.stage2).unwrap();
    let stage2_secs = start.elapsed().as_secs_f64();
    assert!(fit.converged, "stage-2 fit did not converge");

    let times: Vec<f64> = (1..=data[0].n_times()).map(|t| t as f64).collect();
    let gtilde = make_basis(&times, opts.stage1.basis_size).unwrap();
    let x = data[0].time_major();
    let p = IntraProblem {
        coords: &data[0].coords,
        times: &times,
        x: &x,
        gtilde: &gtilde,
    };
    let start = Instant::now();
    let evals = 20;
    for _ in 0..evals {
        neg_reml_intra_fast(&fit1.theta, &p).unwrap();
    }
    let eval_ms = start.elapsed().as_secs_f64() * 1000.0 / evals as f64;
    check(
        9,
        stage2_secs <= 300.0 && eval_ms <= 50.0,
        &format!("stage-2 refine fit {stage2_secs:.1}s (<= 300s), stage-1 objective {eval_ms:.2}ms (<= 50ms)"),
    );
}

#[test]
fn c10_end_to_end_determinism() {
    let bin = env!("CARGO_BIN_EXE_fcmix");
    let run = |dir: &std::path::Path| {
        let data = dir.join("data");
        let status = std::process::Command::new(bin)
            .args(["simulate", "--preset", "k10-phi100", "--seed", "42"])
            .args(["--l", "8", "--m", "20"])
            .arg("--out")
            .arg(&data)
            .status()
            .unwrap();
        assert!(status.success());
        let net = dir.join("net.json");
        let status = std::process::Command::new(bin)
            .arg("fit-network")
            .arg("--manifest")
            .arg(data.join("manifest.json"))
            .args(["-k", "10", "--stage2-mode", "fixed"])
            .arg("--out")
            .arg(&net)
            .status()
            .unwrap();
        assert!(status.success());
        let report = dir.join("report");
        let status = std::process::Command::new(bin)
            .arg("report")
            .arg("--estimates")
            .arg(&net)
            .arg("--out")
            .arg(&report)
            .status()
            .unwrap();
        assert!(status.success());
        let mut bytes = std::fs::read(&net).unwrap();
        for file in ["estimates.json", "edges.csv", "adjacency.csv", "nodes.csv"] {
            bytes.extend(std::fs::read(report.join(file)).unwrap());
        }
        bytes
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let identical = run(d1.path()) == run(d2.path());
    check(
        10,
        identical,
        "two seeded simulate -> fit-network -> report runs produced identical artifacts",
    );
}
