use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fcmix::inference::infer_pair;
use fcmix::io::{self, RunConfig};
use fcmix::network::fit_network;
use fcmix::simulator::{simulate_replicate, three_region_config};
use fcmix::stage1::fit_region;
use fcmix::stage2::{fit_pair, PairProblem};
use fcmix::{Error, Result};

/// Regional functional connectivity from voxel-level signals.
#[derive(Parser)]
#[command(name = "fcmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic three-region dataset.
    Simulate(SimulateArgs),
    /// Fit the intra-regional model for one region.
    FitRegion(FitRegionArgs),
    /// Fit the inter-regional model for one region pair.
    FitPair(FitPairArgs),
    /// Fit all pairs and select edges by FDR.
    FitNetwork(FitNetworkArgs),
    /// Render CSV summaries from a saved network fit.
    Report(ReportArgs),
}

/// Settings shared by the fitting commands; flags override `--config`.
#[derive(Args)]
struct FitFlags {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// B-spline basis size.
    #[arg(long, short = 'k')]
    basis_size: Option<usize>,
    /// Optimizer: trust-region or quasi-newton.
    #[arg(long)]
    optimizer: Option<String>,
    /// Stage-2 mode: fixed or refine.
    #[arg(long)]
    stage2_mode: Option<String>,
    /// Standard-error mode: marginal or full-inverse.
    #[arg(long)]
    se_mode: Option<String>,
    /// FDR level for edge selection.
    #[arg(long)]
    q: Option<f64>,
    /// Complement of the confidence level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Worker threads (env: FCMIX_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

impl FitFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(k) = self.basis_size {
            cfg.basis_size = k;
        }
        if let Some(v) = &self.optimizer {
            cfg.optimizer = v.clone();
        }
        if let Some(v) = &self.stage2_mode {
            cfg.stage2_mode = v.clone();
        }
        if let Some(v) = &self.se_mode {
            cfg.se_mode = v.clone();
        }
        if let Some(q) = self.q {
            cfg.q = q;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        } else if let Ok(w) = std::env::var("FCMIX_WORKERS") {
            cfg.workers = w
                .parse()
                .map_err(|_| Error::invalid(format!("bad FCMIX_WORKERS: {w}")))?;
        }
        cfg.validate()?;
        if cfg.workers > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build_global()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

/// Default output directory honoring the FCMIX_OUT override.
fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("FCMIX_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario cell: one of k05-phi025, k10-phi025, k15-phi025,
    /// k05-phi100, k10-phi100, k15-phi100.
    #[arg(long, default_value = "k10-phi100")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replicate index within the seed's stream.
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    /// Override voxels per region.
    #[arg(long)]
    l: Option<usize>,
    /// Override timepoints per signal.
    #[arg(long)]
    m: Option<usize>,
    /// Output directory (env: FCMIX_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn preset_config(name: &str, seed: u64) -> Result<fcmix::simulator::ModelConfig> {
    let (k_eta, phi) = match name {
        "k05-phi025" => (0.5, 0.25),
        "k10-phi025" => (1.0, 0.25),
        "k15-phi025" => (1.5, 0.25),
        "k05-phi100" => (0.5, 1.0),
        "k10-phi100" => (1.0, 1.0),
        "k15-phi100" => (1.5, 1.0),
        other => return Err(Error::invalid(format!("unknown preset: {other}"))),
    };
    Ok(three_region_config(k_eta, phi, seed))
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = preset_config(&args.preset, args.seed)?;
    if let Some(l) = args.l {
        cfg.l = l;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    let data = simulate_replicate(&cfg, args.replicate)?;
    let dir = out_dir(args.out);
    let manifest = io::save_dataset(&dir, &data)?;
    io::write_json(&dir.join("sim-config.json"), &cfg)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

#[derive(Args)]
struct FitRegionArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Region label; defaults to the first region.
    #[arg(long)]
    region: Option<String>,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitFlags,
}

fn pick<'a>(
    regions: &'a [fcmix::simulator::RegionData],
    label: Option<&str>,
) -> Result<&'a fcmix::simulator::RegionData> {
    match label {
        None => Ok(&regions[0]),
        Some(l) => regions
            .iter()
            .find(|r| r.label == l)
            .ok_or_else(|| Error::invalid(format!("no region labeled {l}"))),
    }
}

fn run_fit_region(args: FitRegionArgs) -> Result<()> {
    let cfg = args.fit.resolve()?;
    let regions = io::load_dataset(&args.manifest)?;
    let region = pick(&regions, args.region.as_deref())?;
    let opts = cfg.network_options()?;
    let fit = fit_region(region, &opts.stage1)?;
    io::write_json(&args.out, &fit)?;
    println!(
        "{}: sigma2={:.4} converged={} ({} iters)",
        fit.label, fit.sigma2_hat, fit.converged, fit.iterations
    );
    Ok(())
}

#[derive(Args)]
struct FitPairArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Two region labels, comma separated; defaults to the first two.
    #[arg(long)]
    regions: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitFlags,
}

fn run_fit_pair(args: FitPairArgs) -> Result<()> {
    let cfg = args.fit.resolve()?;
    let regions = io::load_dataset(&args.manifest)?;
    let (label1, label2) = match &args.regions {
        Some(spec) => {
            let mut it = spec.splitn(2, ',');
            let a = it.next().unwrap_or_default().trim().to_string();
            let b = it
                .next()
                .ok_or_else(|| Error::invalid("expected two labels: A,B"))?
                .trim()
                .to_string();
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let r1 = pick(&regions, label1.as_deref())?;
    let r2 = match label2.as_deref() {
        Some(l) => pick(&regions, Some(l))?,
        None => regions
            .get(1)
            .ok_or_else(|| Error::invalid("dataset has fewer than two regions"))?,
    };
    let opts = cfg.network_options()?;
    let fit1 = fit_region(r1, &opts.stage1)?;
    let fit2 = fit_region(r2, &opts.stage1)?;
    let fit = fit_pair(r1, r2, &fit1, &fit2, &opts.stage2)?;

    let times: Vec<f64> = (1..=r1.n_times()).map(|t| t as f64).collect();
    let x1 = r1.time_major();
    let x2 = r2.time_major();
    let p = PairProblem {
        coords1: &r1.coords,
        coords2: &r2.coords,
        times: &times,
        x1: &x1,
        x2: &x2,
    };
    let inference = infer_pair(&fit.theta, &p, opts.se_mode, opts.alpha)?;
    io::write_json(
        &args.out,
        &json!({ "stage2": fit, "inference": inference }),
    )?;
    println!(
        "{}-{}: rho={:.4} se={:.4} p={:.4}",
        fit.labels[0], fit.labels[1], inference.rho_hat, inference.se_rho, inference.p_value
    );
    Ok(())
}

#[derive(Args)]
struct FitNetworkArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output JSON path for the full network fit.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitFlags,
}

fn run_fit_network(args: FitNetworkArgs) -> Result<()> {
    let cfg = args.fit.resolve()?;
    let regions = io::load_dataset(&args.manifest)?;
    let opts = cfg.network_options()?;
    let result = fit_network(&regions, &opts)?;
    io::write_json(&args.out, &result)?;
    let selected = result.pairs.iter().filter(|p| p.selected).count();
    println!(
        "{} regions, {} pairs, {} selected at q={}",
        result.labels.len(),
        result.pairs.len(),
        selected,
        result.q
    );
    Ok(())
}

#[derive(Args)]
struct ReportArgs {
    /// Network fit JSON produced by fit-network.
    #[arg(long)]
    estimates: PathBuf,
    /// Output directory (env: FCMIX_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.estimates)?;
    let artifact: io::Artifact<fcmix::network::NetworkResult> = serde_json::from_str(&text)?;
    if artifact.schema_version != io::SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "unsupported schema version {}",
            artifact.schema_version
        )));
    }
    let dir = out_dir(args.out);
    io::write_report(&dir, &artifact.payload)?;
    println!("wrote report to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::FitRegion(args) => run_fit_region(args),
        Command::FitPair(args) => run_fit_pair(args),
        Command::FitNetwork(args) => run_fit_network(args),
        Command::Report(args) => run_report(args),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = match &err {
                Error::InvalidInput(_) => "invalid-input",
                Error::LinearAlgebra(_) => "linear-algebra",
                Error::Optimization(_) => "optimization",
                Error::Parse { .. } => "parse",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
            };
            eprintln!(
                "{}",
                json!({
                    "schema_version": io::SCHEMA_VERSION,
                    "error": { "kind": kind, "message": err.to_string() },
                })
            );
            ExitCode::FAILURE
        }
    }
}
