//! One function per subcommand. Artifacts go under the configured output
//! directory; human-readable summaries go to `stdout`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use joulemodel_core::evaluation::{mean_stderr, run_comparison, EvalResult};
use joulemodel_core::flops::FlopsModel;
use joulemodel_core::profiler::{fit_from_db, KeySummary};
use joulemodel_core::pruning::{guidance_report, prune_to_budget, Guidance, PruneOptions, PruneTrace};
use joulemodel_core::{estimate as estimate_model, integrate_trace, measure, run_profiling, PowerTrace, ProfilePlan};
use serde::{Deserialize, Serialize};

use crate::backends;
use crate::config::RunConfig;
use crate::io::{self, PARTIAL_MARKER, PROFILE_DB, SURFACES_DIR};

fn open_backend(cfg: &RunConfig) -> Result<Box<dyn joulemodel_core::EnergyBackend>> {
    let spec = cfg.require_backend()?;
    backends::open(spec, cfg.seed_given.then_some(cfg.seed), cfg.trace)
}

fn clear_surfaces(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|x| x == "json") {
            fs::remove_file(&p)?;
        }
    }
    Ok(())
}

/// Profiles every layer key of the model and writes `profile_db.json`,
/// `summary.json` and one surface file per key. With `append`, the new
/// measurements are merged into an existing database and all keys refitted.
pub fn profile(model_path: &Path, cfg: &RunConfig, append: bool, stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let model = io::read_model(model_path)?;
    let plan = ProfilePlan::for_model(&model, cfg.settings.clone())?;
    let mut backend = open_backend(cfg)?;

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let db_path = cfg.out.join(PROFILE_DB);
    let marker = cfg.out.join(PARTIAL_MARKER);
    let previous = if append && db_path.exists() {
        Some(io::read_profile_db(&db_path)?)
    } else {
        None
    };

    let outcome = match run_profiling(&model, &mut *backend, &plan) {
        Ok(o) => o,
        Err(failure) => {
            let mut db = previous.unwrap_or_default();
            db.append(failure.partial.clone());
            io::write_json(&db_path, &db)?;
            fs::write(&marker, format!("{}\n", failure.error))?;
            bail!("profiling failed: {failure}");
        }
    };

    let surfaces_dir = cfg.out.join(SURFACES_DIR);
    let (db, surfaces) = match previous {
        Some(mut db) => {
            db.append(outcome.db);
            let surfaces = fit_from_db(&db, &plan)?;
            (db, surfaces)
        }
        None => {
            clear_surfaces(&surfaces_dir)?;
            (outcome.db, outcome.surfaces)
        }
    };
    io::write_json(&db_path, &db)?;
    io::save_surfaces(&surfaces_dir, &surfaces)?;
    io::write_json(&cfg.out.join("summary.json"), &outcome.summary)?;
    if marker.exists() {
        fs::remove_file(&marker)?;
    }

    write_profile_summary(stdout, &outcome.summary)?;
    writeln!(
        stdout,
        "{} measurement(s), {} clamped layer cost(s), {:.2}s",
        db.measurement_count(),
        db.clamp_count(),
        started.elapsed().as_secs_f64()
    )?;
    Ok(())
}

fn write_profile_summary(out: &mut dyn Write, summary: &[KeySummary]) -> std::io::Result<()> {
    for s in summary {
        writeln!(out, "{:<60} {:>3} point(s)  stop: {:<14} clamped: {}", s.key.to_string(), s.points, s.stop.to_string(), s.clamped)?;
    }
    Ok(())
}

/// Writes `estimate.json` and prints a table. Returns whether every block
/// was covered by a surface.
pub fn estimate(model_path: &Path, surfaces: &Path, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<bool> {
    let model = io::read_model(model_path)?;
    let set = io::load_surfaces(surfaces)?;
    let report = estimate_model(&model, &set);
    fs::create_dir_all(&cfg.out)?;
    io::write_json(&cfg.out.join("estimate.json"), &report)?;
    io::render_estimate(&report, stdout)?;
    Ok(report.is_complete())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub baseline: FlopsModel,
    pub runs: Vec<EvalResult>,
    pub mape_gp_mean: f64,
    pub mape_gp_stderr: f64,
    pub mape_flops_mean: f64,
    pub mape_flops_stderr: f64,
}

/// Compares surface estimates and the FLOPs baseline against fresh
/// measurements of sampled architectures. The baseline is trained on the
/// profiling database found next to the surfaces.
pub fn evaluate(model_path: &Path, profile_dir: &Path, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<EvaluationReport> {
    let model = io::read_model(model_path)?;
    let set = io::load_surfaces(profile_dir)?;
    let db = io::read_profile_db(&profile_dir.join(PROFILE_DB))?;
    let pairs: Vec<(f64, f64)> = db.samples().map(|s| (s.flops, s.joules_per_iter)).collect();
    let baseline = FlopsModel::fit(&pairs)?;
    let mut backend = open_backend(cfg)?;

    let mut runs = Vec::new();
    for r in 0..cfg.outer_repeats {
        let seed = cfg.seed + u64::from(r);
        runs.push(run_comparison(
            &model,
            &mut *backend,
            &set,
            &baseline,
            cfg.n,
            cfg.settings.repeats,
            model.iterations,
            seed,
        )?);
    }
    let gp: Vec<f64> = runs.iter().map(|r| r.mape_gp).collect();
    let fl: Vec<f64> = runs.iter().map(|r| r.mape_flops).collect();
    let (mape_gp_mean, mape_gp_stderr) = mean_stderr(&gp);
    let (mape_flops_mean, mape_flops_stderr) = mean_stderr(&fl);
    let report = EvaluationReport {
        baseline,
        runs,
        mape_gp_mean,
        mape_gp_stderr,
        mape_flops_mean,
        mape_flops_stderr,
    };

    fs::create_dir_all(&cfg.out)?;
    io::write_json(&cfg.out.join("evaluation.json"), &report)?;
    write_cdf(&cfg.out.join("cdf.csv"), &report.runs)?;
    for r in &report.runs {
        writeln!(
            stdout,
            "seed {:>4}: {} architecture(s), {} excluded, MAPE surfaces {:.2}%, FLOPs {:.2}%",
            r.seed,
            r.rows.len(),
            r.excluded,
            r.mape_gp,
            r.mape_flops
        )?;
    }
    writeln!(
        stdout,
        "MAPE surfaces {:.2}% ± {:.2}, FLOPs {:.2}% ± {:.2}",
        mape_gp_mean, mape_gp_stderr, mape_flops_mean, mape_flops_stderr
    )?;
    Ok(report)
}

fn write_cdf(path: &Path, runs: &[EvalResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "estimator", "error_pct", "fraction"])?;
    for r in runs {
        for (name, cdf) in [("surfaces", &r.cdf_gp), ("flops", &r.cdf_flops)] {
            for (e, f) in cdf {
                w.write_record([r.seed.to_string(), name.to_string(), format!("{e:.6}"), format!("{f:.6}")])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredPrune {
    pub original: f64,
    pub pruned: f64,
    pub ratio: f64,
}

/// Prunes to `target_fraction` of the estimated energy and writes the pruned
/// model, the step trace and a gradient ranking of the original model. When
/// a backend is configured both models are also measured.
pub fn prune(
    model_path: &Path,
    surfaces: &Path,
    cfg: &RunConfig,
    stdout: &mut dyn Write,
) -> Result<(PruneTrace, Option<MeasuredPrune>)> {
    let model = io::read_model(model_path)?;
    let set = io::load_surfaces(surfaces)?;
    let guidance: Vec<Guidance> = guidance_report(&model, &set)?;
    let (pruned, trace) = prune_to_budget(&model, &set, cfg.target_fraction, cfg.seed, &PruneOptions::default())?;
    fs::create_dir_all(&cfg.out)?;
    io::write_model(&cfg.out.join("pruned_model.json"), &pruned)?;
    io::write_json(&cfg.out.join("prune_trace.json"), &trace)?;
    io::write_json(&cfg.out.join("guidance.json"), &guidance)?;

    let measured = match &cfg.backend {
        Some(_) => {
            let mut backend = open_backend(cfg)?;
            let reps = cfg.settings.repeats;
            let original = measure(&mut *backend, &model, model.iterations, reps)?.joules_per_iter;
            let after = measure(&mut *backend, &pruned, pruned.iterations, reps)?.joules_per_iter;
            let m = MeasuredPrune {
                original,
                pruned: after,
                ratio: after / original,
            };
            io::write_json(&cfg.out.join("prune_measured.json"), &m)?;
            Some(m)
        }
        None => None,
    };

    writeln!(
        stdout,
        "{} step(s) over {} proposal(s): {:.6} -> {:.6} J/iter ({:.1}% of start){}",
        trace.steps.len(),
        trace.proposals,
        trace.start,
        trace.final_estimate,
        100.0 * trace.final_estimate / trace.start,
        if trace.converged { "" } else { ", budget not reached" }
    )?;
    let widths: Vec<String> = pruned.blocks[..pruned.blocks.len() - 1]
        .iter()
        .map(|b| b.out_channels.to_string())
        .collect();
    writeln!(stdout, "widths: {}", widths.join(" "))?;
    if let Some(m) = &measured {
        writeln!(stdout, "measured: {:.6} -> {:.6} J/iter ({:.1}%)", m.original, m.pruned, 100.0 * m.ratio)?;
    }
    Ok((trace, measured))
}

/// Net joules per iteration of a recorded trace.
pub fn integrate(trace_path: &Path, standby_power: f64, iterations: u64, stdout: &mut dyn Write) -> Result<f64> {
    let trace = PowerTrace {
        samples: io::read_trace_csv(trace_path)?,
        standby_power,
        iterations,
    };
    let j = integrate_trace(&trace)?;
    writeln!(stdout, "{j:.6} J/iter")?;
    Ok(j)
}
