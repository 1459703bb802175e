//! Network construction: all pairwise fits, FDR-controlled edge selection,
//! and node summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::inference::{self, PairInference, SeMode};
use crate::optimize::OptOptions;
use crate::simulator::RegionData;
use crate::stage1::{self, Stage1Fit, Stage1Options};
use crate::stage2::{self, PairProblem, Stage2Fit, Stage2Options};

#[derive(Debug, Clone)]
pub struct NetworkOptions {
    pub stage1: Stage1Options,
    pub stage2: Stage2Options,
    pub se_mode: SeMode,
    /// Confidence level complement for the per-edge intervals.
    pub alpha: f64,
    /// FDR level of the edge selection.
    pub q: f64,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions {
            stage1: Stage1Options::default(),
            stage2: Stage2Options::default(),
            se_mode: SeMode::FullInverse,
            alpha: 0.05,
            q: 0.05,
        }
    }
}

/// Outcome of one pair: either a full fit or a recorded failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum PairStatus {
    Ok,
    Failed { message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    /// Region indices, `i < j`.
    pub i: usize,
    pub j: usize,
    pub labels: [String; 2],
    pub status: PairStatus,
    pub rho_hat: Option<f64>,
    pub se_rho: Option<f64>,
    pub z_score: Option<f64>,
    pub p_value: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    /// Correlation of averages baseline.
    pub ca: Option<f64>,
    /// Fixed-effect correlation baseline.
    pub fe: Option<f64>,
    pub selected: bool,
    pub stage2: Option<Stage2Fit>,
    pub inference: Option<PairInference>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkResult {
    pub labels: Vec<String>,
    pub q: f64,
    pub stage1: Vec<Stage1Fit>,
    pub pairs: Vec<PairRecord>,
    pub node_degree: Vec<usize>,
    pub fcs: Vec<f64>,
}

/// Benjamini-Yekutieli step-up selection: indices of the rejected p-values.
///
/// Rejects the `k*` smallest where
/// `k* = max{k : p_(k) <= k q / (m c(m))}` and `c(m)` is the `m`-th
/// harmonic number.
pub fn by_threshold(p_values: &[f64], q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid("q must be in (0,1)"));
    }
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("p-value out of range: {p}")));
        }
    }
    let m = p_values.len();
    if m == 0 {
        return Ok(vec![]);
    }
    let c_m: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut k_star = 0;
    for (rank, &idx) in order.iter().enumerate() {
        let k = rank + 1;
        if p_values[idx] <= k as f64 * q / (m as f64 * c_m) {
            k_star = k;
        }
    }
    let mut selected: Vec<usize> = order[..k_star].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Node degree and functional connectivity strength over selected edges.
pub fn summarize(j: usize, pairs: &[PairRecord]) -> (Vec<usize>, Vec<f64>) {
    let mut degree = vec![0usize; j];
    let mut sums = vec![0.0f64; j];
    for rec in pairs {
        if !rec.selected {
            continue;
        }
        let Some(rho) = rec.rho_hat else { continue };
        degree[rec.i] += 1;
        degree[rec.j] += 1;
        sums[rec.i] += rho;
        sums[rec.j] += rho;
    }
    let fcs = (0..j)
        .map(|n| {
            if degree[n] == 0 {
                0.0
            } else {
                sums[n] / degree[n] as f64
            }
        })
        .collect();
    (degree, fcs)
}

fn fit_one_pair(
    regions: &[RegionData],
    fits: &[Option<Stage1Fit>],
    i: usize,
    j: usize,
    opts: &NetworkOptions,
) -> PairRecord {
    let labels = [regions[i].label.clone(), regions[j].label.clone()];
    let mut rec = PairRecord {
        i,
        j,
        labels,
        status: PairStatus::Ok,
        rho_hat: None,
        se_rho: None,
        z_score: None,
        p_value: None,
        ci_lower: None,
        ci_upper: None,
        ca: None,
        fe: None,
        selected: false,
        stage2: None,
        inference: None,
    };
    let x1 = regions[i].time_major();
    let x2 = regions[j].time_major();
    rec.ca = baselines::corr_of_averages(&x1, &x2).ok();
    let (Some(f1), Some(f2)) = (&fits[i], &fits[j]) else {
        rec.status = PairStatus::Failed {
            message: "stage-1 fit unavailable for one of the regions".into(),
        };
        return rec;
    };
    rec.fe = baselines::fe_correlation(&f1.nu_hat, &f2.nu_hat).ok();
    let fit = match stage2::fit_pair(&regions[i], &regions[j], f1, f2, &opts.stage2) {
        Ok(fit) => fit,
        Err(e) => {
            rec.status = PairStatus::Failed {
                message: format!("stage-2 fit failed: {e}"),
            };
            return rec;
        }
    };
    let times: Vec<f64> = (1..=regions[i].n_times()).map(|t| t as f64).collect();
    let p = PairProblem {
        coords1: &regions[i].coords,
        coords2: &regions[j].coords,
        times: &times,
        x1: &x1,
        x2: &x2,
    };
    match inference::infer_pair(&fit.theta, &p, opts.se_mode, opts.alpha) {
        Ok(inf) => {
            rec.rho_hat = Some(inf.rho_hat);
            rec.se_rho = Some(inf.se_rho);
            rec.z_score = Some(inf.z_score);
            rec.p_value = Some(inf.p_value);
            rec.ci_lower = Some(inf.ci_lower);
            rec.ci_upper = Some(inf.ci_upper);
            rec.inference = Some(inf);
            rec.stage2 = Some(fit);
        }
        Err(e) => {
            rec.status = PairStatus::Failed {
                message: format!("inference failed: {e}"),
            };
            rec.stage2 = Some(fit);
        }
    }
    rec
}

/// Fit the full network: stage 1 once per region, stage 2 and inference once
/// per unordered pair, then FDR selection and summaries. Pair failures are
/// recorded in the result rather than aborting the run.
pub fn fit_network(regions: &[RegionData], opts: &NetworkOptions) -> Result<NetworkResult> {
    let j = regions.len();
    if j < 2 {
        return Err(Error::invalid("need at least two regions"));
    }
    let m = regions[0].n_times();
    if regions.iter().any(|r| r.n_times() != m) {
        return Err(Error::invalid("regions have different time grids"));
    }

    let fits: Vec<Option<Stage1Fit>> = regions
        .par_iter()
        .map(|r| match stage1::fit_region(r, &opts.stage1) {
            Ok(fit) => Some(fit),
            Err(e) => {
                log::warn!("stage-1 fit failed for region {}: {e}", r.label);
                None
            }
        })
        .collect();

    let index_pairs: Vec<(usize, usize)> = (0..j)
        .flat_map(|a| ((a + 1)..j).map(move |b| (a, b)))
        .collect();
    let mut pairs: Vec<PairRecord> = index_pairs
        .par_iter()
        .map(|&(a, b)| fit_one_pair(regions, &fits, a, b, opts))
        .collect();

    // BY family: only pairs with a valid p-value
    let tested: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.p_value.is_some())
        .map(|(k, _)| k)
        .collect();
    let p_values: Vec<f64> = tested.iter().map(|&k| pairs[k].p_value.unwrap()).collect();
    for &sel in &by_threshold(&p_values, opts.q)? {
        pairs[tested[sel]].selected = true;
    }

    let (node_degree, fcs) = summarize(j, &pairs);
    Ok(NetworkResult {
        labels: regions.iter().map(|r| r.label.clone()).collect(),
        q: opts.q,
        stage1: fits.into_iter().flatten().collect(),
        pairs,
        node_degree,
        fcs,
    })
}

/// Convenience constructor for reduced-size options used in smoke tests and
/// quick runs.
pub fn quick_options(basis_size: usize) -> NetworkOptions {
    NetworkOptions {
        stage1: Stage1Options {
            basis_size,
            ..Default::default()
        },
        stage2: Stage2Options {
            opt: OptOptions::default(),
            ..Default::default()
        },
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate_replicate, three_region_config};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn by_hand_computed_thresholds() {
        // m=3: c(3) = 1 + 1/2 + 1/3 = 11/6; thresholds k q / (m c) for
        // q=0.05 are 0.0090909, 0.0181818, 0.0272727
        let p = [0.001, 0.02, 0.5];
        let sel = by_threshold(&p, 0.05).unwrap();
        assert_eq!(sel, vec![0]);
        let c3 = 11.0 / 6.0;
        assert_relative_eq!(0.05 / (3.0 * c3), 0.00909090909, epsilon = 1e-9);
    }

    #[test]
    fn by_rejects_nothing_at_unit_pvalues() {
        assert!(by_threshold(&[1.0, 1.0, 1.0], 0.05).unwrap().is_empty());
        assert!(by_threshold(&[], 0.05).unwrap().is_empty());
    }

    #[test]
    fn by_step_up_takes_all_below_kstar() {
        // second threshold passes even though the first does not
        let c2 = 1.5;
        let t2 = 2.0 * 0.05 / (2.0 * c2); // 0.0333
        let p = [t2 - 1e-6, t2 - 2e-6];
        let sel = by_threshold(&p, 0.05).unwrap();
        assert_eq!(sel.len(), 2);
    }

    #[test]
    fn by_monotone_in_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..0.2f64).powi(2)).collect();
        let mut prev: Vec<usize> = vec![];
        for q in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let sel = by_threshold(&p, q).unwrap();
            assert!(
                prev.iter().all(|i| sel.contains(i)),
                "selection not monotone in q"
            );
            prev = sel;
        }
    }

    #[test]
    fn by_never_beats_bh() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = rng.gen_range(3..30);
            let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
            let q = 0.05;
            let by = by_threshold(&p, q).unwrap().len();
            // Benjamini-Hochberg count
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            let bh = (0..m)
                .filter(|&k| sorted[k] <= (k + 1) as f64 * q / m as f64)
                .max()
                .map(|k| k + 1)
                .unwrap_or(0);
            assert!(by <= bh, "BY rejected {by} > BH {bh}");
        }
    }

    fn blank_record(i: usize, j: usize, rho: Option<f64>, selected: bool) -> PairRecord {
        PairRecord {
            i,
            j,
            labels: [format!("r{i}"), format!("r{j}")],
            status: PairStatus::Ok,
            rho_hat: rho,
            se_rho: None,
            z_score: None,
            p_value: None,
            ci_lower: None,
            ci_upper: None,
            ca: None,
            fe: None,
            selected,
            stage2: None,
            inference: None,
        }
    }

    #[test]
    fn summarize_hand_cases() {
        // no selected edges
        let pairs = vec![blank_record(0, 1, Some(0.5), false)];
        let (deg, fcs) = summarize(3, &pairs);
        assert_eq!(deg, vec![0, 0, 0]);
        assert_eq!(fcs, vec![0.0, 0.0, 0.0]);

        // single selected edge (0,1) with rho 0.4
        let pairs = vec![
            blank_record(0, 1, Some(0.4), true),
            blank_record(0, 2, Some(0.9), false),
            blank_record(1, 2, Some(0.9), false),
        ];
        let (deg, fcs) = summarize(3, &pairs);
        assert_eq!(deg, vec![1, 1, 0]);
        assert_relative_eq!(fcs[0], 0.4);
        assert_relative_eq!(fcs[1], 0.4);
        assert_eq!(fcs[2], 0.0);

        // complete graph, all rho 0.5
        let pairs = vec![
            blank_record(0, 1, Some(0.5), true),
            blank_record(0, 2, Some(0.5), true),
            blank_record(1, 2, Some(0.5), true),
        ];
        let (deg, fcs) = summarize(3, &pairs);
        assert_eq!(deg, vec![2, 2, 2]);
        for f in fcs {
            assert_relative_eq!(f, 0.5);
        }
    }

    #[test]
    fn pair_count_is_combinatorial() {
        // enumeration matches J choose 2 without running any fits
        let pairs: Vec<(usize, usize)> = (0..21)
            .flat_map(|a| ((a + 1)..21).map(move |b| (a, b)))
            .collect();
        assert_eq!(pairs.len(), 210);
    }

    #[test]
    fn two_region_network_smoke() {
        let mut cfg = three_region_config(1.0, 1.0, 202);
        cfg.l = 10;
        cfg.m = 24;
        let mut data = simulate_replicate(&cfg, 0).unwrap();
        data.truncate(2);
        let opts = quick_options(12);
        let result = fit_network(&data, &opts).unwrap();
        assert_eq!(result.pairs.len(), 1);
        assert_eq!(result.stage1.len(), 2);
        assert_eq!(result.labels.len(), 2);
        let rec = &result.pairs[0];
        assert!(matches!(rec.status, PairStatus::Ok), "{:?}", rec.status);
        let rho = rec.rho_hat.unwrap();
        assert!(rho > -1.0 && rho < 1.0);
        assert!(rec.p_value.unwrap() >= 0.0 && rec.p_value.unwrap() <= 1.0);
        let (lo, hi) = (rec.ci_lower.unwrap(), rec.ci_upper.unwrap());
        assert!(lo < rho && rho < hi);
    }
}
