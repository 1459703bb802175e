//! File formats: per-region signal CSVs with a JSON manifest, run
//! configuration, and plot-ready result artifacts.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SeMode;
use crate::network::{NetworkOptions, NetworkResult, PairStatus};
use crate::optimize::{Method, OptOptions};
use crate::simulator::RegionData;
use crate::stage1::Stage1Options;
use crate::stage2::{Stage2Mode, Stage2Options};

/// Version stamp written into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// Timepoint count shared by all regions.
    pub m: usize,
    pub regions: Vec<ManifestRegion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRegion {
    pub label: String,
    /// CSV path, relative to the manifest file.
    pub path: String,
}

/// Run settings shared by the fitting commands. Loadable from JSON with
/// unknown keys rejected; command-line flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// B-spline basis size.
    pub basis_size: usize,
    /// `trust-region` or `quasi-newton`.
    pub optimizer: String,
    /// `fixed` or `refine`.
    pub stage2_mode: String,
    /// `marginal` or `full-inverse`.
    pub se_mode: String,
    /// FDR level of edge selection.
    pub q: f64,
    /// Complement of the confidence level.
    pub alpha: f64,
    pub seed: u64,
    /// Worker threads; 0 keeps the library default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            basis_size: 30,
            optimizer: "trust-region".into(),
            stage2_mode: "refine".into(),
            se_mode: "full-inverse".into(),
            q: 0.05,
            alpha: 0.05,
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::invalid("q must be in (0,1)"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must be in (0,1)"));
        }
        self.method()?;
        self.stage2_mode()?;
        self.se_mode()?;
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        match self.optimizer.as_str() {
            "trust-region" => Ok(Method::TrustRegion),
            "quasi-newton" => Ok(Method::QuasiNewton),
            other => Err(Error::invalid(format!("unknown optimizer: {other}"))),
        }
    }

    pub fn stage2_mode(&self) -> Result<Stage2Mode> {
        match self.stage2_mode.as_str() {
            "fixed" => Ok(Stage2Mode::Fixed),
            "refine" => Ok(Stage2Mode::Refine),
            other => Err(Error::invalid(format!("unknown stage-2 mode: {other}"))),
        }
    }

    pub fn se_mode(&self) -> Result<SeMode> {
        match self.se_mode.as_str() {
            "marginal" => Ok(SeMode::Marginal),
            "full-inverse" => Ok(SeMode::FullInverse),
            other => Err(Error::invalid(format!("unknown se mode: {other}"))),
        }
    }

    pub fn network_options(&self) -> Result<NetworkOptions> {
        let opt = OptOptions {
            method: self.method()?,
            ..Default::default()
        };
        Ok(NetworkOptions {
            stage1: Stage1Options {
                basis_size: self.basis_size,
                opt: opt.clone(),
                ..Default::default()
            },
            stage2: Stage2Options {
                mode: self.stage2_mode()?,
                opt,
                ..Default::default()
            },
            se_mode: self.se_mode()?,
            alpha: self.alpha,
            q: self.q,
        })
    }
}

/// Write one region's signals as `voxel_id,x,y,z,t1..tM`, one row per voxel.
fn write_region_csv(path: &Path, region: &RegionData) -> Result<()> {
    let m = region.n_times();
    let mut out = String::new();
    out.push_str("voxel_id,x,y,z");
    for t in 1..=m {
        out.push_str(&format!(",t{t}"));
    }
    out.push('\n');
    for (vid, coord) in region.coords.iter().enumerate() {
        out.push_str(&format!("{vid},{},{},{}", coord[0], coord[1], coord[2]));
        for mi in 0..m {
            out.push_str(&format!(",{}", region.x[(vid, mi)]));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Save a dataset as one CSV per region plus `manifest.json` in `dir`;
/// returns the manifest path.
pub fn save_dataset(dir: &Path, regions: &[RegionData]) -> Result<PathBuf> {
    if regions.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let m = regions[0].n_times();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        m,
        regions: Vec::with_capacity(regions.len()),
    };
    for region in regions {
        if region.n_times() != m {
            return Err(Error::invalid("regions have different time grids"));
        }
        let file = format!("{}.csv", region.label);
        write_region_csv(&dir.join(&file), region)?;
        manifest.regions.push(ManifestRegion {
            label: region.label.clone(),
            path: file,
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn load_region_csv(path: &Path, label: &str, m: usize) -> Result<RegionData> {
    let text = fs::read_to_string(path)
        .map_err(|e| parse_err(path, 0, format!("cannot read file: {e}")))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != 4 + m
        || cols[..4] != ["voxel_id", "x", "y", "z"]
        || !cols[4..]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("t{}", i + 1))
    {
        return Err(parse_err(
            path,
            1,
            format!("expected header voxel_id,x,y,z,t1..t{m}"),
        ));
    }
    let mut coords = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (lineno0, line) in lines {
        let lineno = lineno0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + m {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", 4 + m, fields.len()),
            ));
        }
        let vid: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad voxel_id: {}", fields[0])))?;
        if !seen_ids.insert(vid) {
            return Err(parse_err(path, lineno, format!("duplicate voxel_id: {vid}")));
        }
        let mut nums = Vec::with_capacity(3 + m);
        for f in &fields[1..] {
            nums.push(
                f.parse::<f64>()
                    .map_err(|_| parse_err(path, lineno, format!("bad number: {f}")))?,
            );
        }
        coords.push([nums[0], nums[1], nums[2]]);
        rows.push(nums[3..].to_vec());
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no voxel rows"));
    }
    let l = rows.len();
    let x = DMatrix::from_fn(l, m, |li, mi| rows[li][mi]);
    Ok(RegionData {
        label: label.to_string(),
        coords,
        x,
    })
}

/// Load a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<RegionData>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| parse_err(manifest_path, 0, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::with_capacity(manifest.regions.len());
    for mr in &manifest.regions {
        let path = base.join(&mr.path);
        if !path.exists() {
            return Err(Error::invalid(format!(
                "manifest references missing file: {}",
                path.display()
            )));
        }
        out.push(load_region_csv(&path, &mr.label, manifest.m)?);
    }
    Ok(out)
}

/// Versioned envelope for JSON artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub payload: T,
}

pub fn write_json<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let artifact = Artifact {
        schema_version: SCHEMA_VERSION,
        payload,
    };
    fs::write(path, serde_json::to_string_pretty(&artifact)?)?;
    Ok(())
}

/// Emit the report artifacts for a fitted network: edge-list CSV, adjacency
/// CSV, node summary CSV, and the full estimates JSON.
pub fn write_report(dir: &Path, result: &NetworkResult) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut edges = String::from(
        "i,j,label_i,label_j,status,rho_hat,se_rho,z,p,ci_lower,ci_upper,ca,fe,selected\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for rec in &result.pairs {
        let status = match &rec.status {
            PairStatus::Ok => "ok",
            PairStatus::Failed { .. } => "failed",
        };
        edges.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            rec.i,
            rec.j,
            rec.labels[0],
            rec.labels[1],
            status,
            opt(rec.rho_hat),
            opt(rec.se_rho),
            opt(rec.z_score),
            opt(rec.p_value),
            opt(rec.ci_lower),
            opt(rec.ci_upper),
            opt(rec.ca),
            opt(rec.fe),
            rec.selected,
        ));
    }
    fs::write(dir.join("edges.csv"), edges)?;

    // adjacency of selected edges, weighted by rho_hat
    let j = result.labels.len();
    let mut adj = DMatrix::zeros(j, j);
    for rec in &result.pairs {
        if rec.selected {
            if let Some(rho) = rec.rho_hat {
                adj[(rec.i, rec.j)] = rho;
                adj[(rec.j, rec.i)] = rho;
            }
        }
    }
    let mut adj_csv = String::from("label");
    for label in &result.labels {
        adj_csv.push_str(&format!(",{label}"));
    }
    adj_csv.push('\n');
    for a in 0..j {
        adj_csv.push_str(&result.labels[a]);
        for b in 0..j {
            adj_csv.push_str(&format!(",{}", adj[(a, b)]));
        }
        adj_csv.push('\n');
    }
    fs::write(dir.join("adjacency.csv"), adj_csv)?;

    let mut nodes = String::from("label,node_degree,fcs\n");
    for a in 0..j {
        nodes.push_str(&format!(
            "{},{},{}\n",
            result.labels[a], result.node_degree[a], result.fcs[a]
        ));
    }
    fs::write(dir.join("nodes.csv"), nodes)?;

    write_json(&dir.join("estimates.json"), result)?;
    Ok(())
}
