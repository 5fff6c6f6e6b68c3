//! On-disk formats: model documents, surfaces, profile databases, traces and reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use joulemodel_core::estimator::{EstimateReport, SurfaceSet};
use joulemodel_core::gp::{GpSurface, SurfaceParams};
use joulemodel_core::{ModelDocument, ModelSpec, ProfileDb, SimDeviceConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const PROFILE_DB: &str = "profile_db.json";
pub const SURFACES_DIR: &str = "surfaces";
pub const PARTIAL_MARKER: &str = ".partial";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Pretty JSON with a trailing newline. Output is a pure function of `value`.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_model(path: &Path) -> Result<ModelSpec> {
    let doc: ModelDocument = read_json(path)?;
    ModelSpec::from_document(&doc).with_context(|| format!("invalid model {}", path.display()))
}

pub fn write_model(path: &Path, model: &ModelSpec) -> Result<()> {
    write_json(path, &model.to_document())
}

pub fn read_sim_config(path: &Path) -> Result<SimDeviceConfig> {
    let cfg: SimDeviceConfig = read_json(path)?;
    cfg.validate().with_context(|| format!("invalid simulator config {}", path.display()))?;
    Ok(cfg)
}

/// Maps an arbitrary name onto a portable file stem.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Accepts either a surfaces directory or a profiling output directory
/// containing one.
pub fn surfaces_dir(path: &Path) -> PathBuf {
    let nested = path.join(SURFACES_DIR);
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

pub fn save_surfaces(dir: &Path, surfaces: &SurfaceSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (key, s) in surfaces {
        write_json(&dir.join(format!("{}.json", file_stem(&key.to_string()))), s.params())?;
    }
    Ok(())
}

/// Loads every `*.json` surface in `dir`, refactorizing each one.
pub fn load_surfaces(dir: &Path) -> Result<SurfaceSet> {
    let dir = surfaces_dir(dir);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = SurfaceSet::new();
    for p in paths {
        let params: SurfaceParams = read_json(&p)?;
        let key = params.key.clone();
        let surface = GpSurface::from_params(params).with_context(|| format!("loading {}", p.display()))?;
        if out.insert(key.clone(), surface).is_some() {
            bail!("duplicate surface for {key} in {}", dir.display());
        }
    }
    Ok(out)
}

pub fn read_profile_db(path: &Path) -> Result<ProfileDb> {
    read_json(path)
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    t_s: f64,
    p_w: f64,
}

/// Reads a `t_s,p_w` power trace.
pub fn read_trace_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t_s", "p_w"] {
        bail!("{}: expected header t_s,p_w", path.display());
    }
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: TraceRow = row.with_context(|| format!("parsing {}", path.display()))?;
        out.push((row.t_s, row.p_w));
    }
    Ok(out)
}

pub fn write_trace_csv(path: &Path, samples: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_s", "p_w"])?;
    for (t, p) in samples {
        w.write_record([t.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-precision table of an estimate, one row per block.
pub fn render_estimate(report: &EstimateReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{:>5}  {:<60} {:>12} {:>14} {:>12}", "block", "key", "coord", "J/iter", "std")?;
    for b in &report.per_block {
        writeln!(
            out,
            "{:>5}  {:<60} {:>12} {:>14.6} {:>12.6}",
            b.block,
            b.key.to_string(),
            b.coordinate.to_string(),
            b.mean,
            b.variance.sqrt()
        )?;
    }
    writeln!(
        out,
        "total {:.6} J/iter (std {:.6}), {:.3} J over {} iterations",
        report.total_mean,
        report.total_variance.sqrt(),
        report.total_joules,
        report.iterations
    )?;
    for k in &report.missing_keys {
        writeln!(out, "missing surface: {k}")?;
    }
    for (i, c) in &report.out_of_bounds {
        writeln!(out, "out of bounds: block {i} at {c}")?;
    }
    Ok(())
}
