//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use joulemodel::commands;
use joulemodel::config::{RunConfig, RunOptions};
use joulemodel_core::evaluation::{run_comparison, EvalResult};
use joulemodel_core::flops::FlopsModel;
use joulemodel_core::gp::FitOptions;
use joulemodel_core::measurement::{energy_time_correlation, Primitive};
use joulemodel_core::model::{Axis, Bounds, Coord};
use joulemodel_core::profiler::{
    extract_layer_cost, Acquisition, PlanSettings, ProfileOutcome, StopReason, Surrogate, VariantFactory,
};
use joulemodel_core::pruning::{prune_to_budget, PruneOptions};
use joulemodel_core::{
    estimate, fit, fixtures, integrate_trace, measure, run_profiling, KernelFamily, KernelSpec, ModelSpec, PowerTrace,
    ProfilePlan, Role, SimDevice, SimDeviceConfig,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn profile(model: &ModelSpec, cfg: SimDeviceConfig, settings: PlanSettings) -> (ProfileOutcome, SimDevice) {
    let plan = ProfilePlan::for_model(model, settings).unwrap();
    let mut sim = SimDevice::new(cfg).unwrap();
    let out = run_profiling(model, &mut sim, &plan).unwrap();
    (out, sim)
}

fn baseline_from(out: &ProfileOutcome) -> FlopsModel {
    let pairs: Vec<(f64, f64)> = out.db.samples().map(|s| (s.flops, s.joules_per_iter)).collect();
    FlopsModel::fit(&pairs).unwrap()
}

fn evaluate(model: &ModelSpec, cfg: SimDeviceConfig, settings: PlanSettings, seed: u64) -> (EvalResult, ProfileOutcome) {
    let (out, mut sim) = profile(model, cfg, settings);
    let baseline = baseline_from(&out);
    let r = run_comparison(model, &mut sim, &out.surfaces, &baseline, 100, 3, model.iterations, seed).unwrap();
    (r, out)
}

/// Matérn through its general Bessel form, `K_{5/2}` written out for a half-integer order.
fn matern_via_bessel(r: f64, l: f64, sv: f64) -> f64 {
    let nu: f64 = 2.5;
    let z = (2.0 * nu).sqrt() * r / l;
    let k52 = (PI / (2.0 * z)).sqrt() * (-z).exp() * (1.0 + 3.0 / z + 3.0 / (z * z));
    let gamma_nu = 0.75 * PI.sqrt();
    sv * 2f64.powf(1.0 - nu) / gamma_nu * z.powf(nu) * k52
}

fn kernel_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let r: f64 = rng.gen_range(0.01..3.0);
        let l: f64 = rng.gen_range(0.05..2.0);
        let sv: f64 = rng.gen_range(0.1..5.0);
        let got = KernelSpec::matern25(l, sv).eval(&[0.0], &[r]).unwrap();
        let want = matern_via_bessel(r, l, sv);
        worst = worst.max((got - want).abs() / want.abs());
    }

    let spec = prop_oneof![
        (0.01f64..5.0, 0.1f64..10.0).prop_map(|(l, v)| KernelSpec::matern25(l, v)),
        (0.01f64..5.0, 0.1f64..10.0).prop_map(|(l, v)| KernelSpec::rbf(l, v)),
        (0.0f64..10.0, 0.1f64..10.0).prop_map(|(s, v)| KernelSpec::dot_product(s, v)),
    ];
    let points = proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 2), 1..64);
    let mut runner = TestRunner::new(Config { cases: 128, ..Config::default() });
    let props = runner.run(&(spec, points), |(k, pts)| {
        let n = pts.len();
        let g = DMatrix::from_fn(n, n, |i, j| k.eval(&pts[i], &pts[j]).unwrap());
        prop_assert_eq!(&g, &g.transpose());
        let scale = g.diagonal().max().max(1.0);
        prop_assert!(g.symmetric_eigenvalues().min() >= -1e-9 * scale * n as f64);
        Ok(())
    });
    outcome(
        worst <= 1e-12 && props.is_ok(),
        format!("max rel err {worst:.2e} over 20 pairs (tol 1e-12); symmetry/PSD suite {}", if props.is_ok() { "ok" } else { "failed" }),
    )
}

fn gp_interpolation() -> Outcome {
    let key = fixtures::single_fc(8, 10).blocks[0].key();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for family in [KernelFamily::Matern25, KernelFamily::Rbf] {
        for _ in 0..5 {
            let bounds = Bounds(vec![(1, 64)]);
            let mut xs: Vec<u32> = (1..=64).collect();
            let mut pts = Vec::new();
            for _ in 0..8 {
                let c = xs.remove(rng.gen_range(0..xs.len()));
                pts.push((Coord::One(c), rng.gen_range(0.5..20.0)));
            }
            let s = fit(&key, &pts, &bounds, &FitOptions::noiseless(family)).unwrap();
            for (c, y) in &pts {
                worst = worst.max((s.predict_mean(c).unwrap() - y).abs() / y.abs());
            }
        }
    }
    // 2-D
    let hidden = fixtures::five_layer_cnn().blocks[1].key();
    let bounds = Bounds(vec![(1, 32), (1, 64)]);
    let pts: Vec<(Coord, f64)> = (0..10)
        .map(|_| {
            let c = Coord::Two(rng.gen_range(1..=32), rng.gen_range(1..=64));
            (c, rng.gen_range(1.0..10.0))
        })
        .collect::<BTreeMap<_, _>>()
        .into_iter()
        .collect();
    let s = fit(&hidden, &pts, &bounds, &FitOptions::noiseless(KernelFamily::Matern25)).unwrap();
    for (c, y) in &pts {
        worst = worst.max((s.predict_mean(c).unwrap() - y).abs() / y.abs());
    }

    // far from data the posterior returns to the prior
    let l = 0.02;
    let pts: Vec<(Coord, f64)> = (1..=5).map(|c| (Coord::One(c), 2.0 + f64::from(c))).collect();
    let opts = FitOptions::noiseless(KernelFamily::Matern25).with_length_scales(&[l]);
    let s = fit(&key, &pts, &Bounds(vec![(1, 64)]), &opts).unwrap();
    let far = Coord::One(64);
    let distance = 59.0 / 63.0;
    let (_, var) = s.predict(&far).unwrap();
    let prior = s.prior_variance(&far).unwrap();
    let prior_err = (var - prior).abs() / prior;
    outcome(
        worst <= 1e-6 && prior_err <= 0.01 && distance > 10.0 * l,
        format!("max rel interpolation err {worst:.2e} (tol 1e-6); prior variance err {:.3}% at {:.0}ℓ (tol 1%)", 100.0 * prior_err, distance / l),
    )
}

fn subtractivity() -> Outcome {
    let model = fixtures::five_layer_cnn();
    let cfg = fixtures::affine_oracle(&model, 0.0, 1);
    let plan = ProfilePlan::for_model(&model, PlanSettings::default()).unwrap();
    let (out, mut sim) = profile(&model, cfg.clone(), PlanSettings::default());
    let factory = VariantFactory::new(&model, &plan).unwrap();
    let input_key = model.blocks[0].key();
    let hidden_key = model.blocks[1].key();
    let output = &out.surfaces[&model.blocks[4].key()];
    let input = &out.surfaces[&input_key];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (key, role, coord, template) = if i % 2 == 0 {
            (&input_key, Role::Input, Coord::One(rng.gen_range(1..=32)), &model.blocks[0])
        } else {
            (&hidden_key, Role::Hidden, Coord::Two(rng.gen_range(1..=32), rng.gen_range(1..=64)), &model.blocks[1])
        };
        let variant = factory.make_variant(key, &coord).unwrap();
        let measured = measure(&mut sim, &variant, 500, 1).unwrap().joules_per_iter;
        let (cost, _) = extract_layer_cost(role, &coord, measured, Some(input), Some(output)).unwrap();
        let truth = cfg.surface_at(template, &coord).unwrap();
        worst = worst.max((cost - truth).abs() / truth);
    }
    outcome(worst <= 0.02, format!("max rel err {:.3}% over 50 coordinates (tol 2%)", 100.0 * worst))
}

fn additivity() -> Outcome {
    let model = fixtures::five_layer_cnn();
    let mapes: Vec<f64> = (0..3)
        .map(|seed| evaluate(&model, fixtures::stepped_oracle(&model, 0.02, seed), PlanSettings::default(), 1000 + seed).0.mape_gp)
        .collect();
    outcome(
        mapes.iter().all(|m| *m <= 12.0),
        format!("MAPE per seed {} (tol 12%)", fmt_pcts(&mapes)),
    )
}

fn fmt_pcts(v: &[f64]) -> String {
    v.iter().map(|m| format!("{m:.2}%")).collect::<Vec<_>>().join(" / ")
}

fn baseline_ordering() -> Outcome {
    let model = fixtures::five_layer_cnn();
    let mut wins = 0;
    let mut signature = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let (r, _) = evaluate(&model, fixtures::stepped_oracle(&model, 0.02, seed), PlanSettings::default(), 2000 + seed);
        let ((low_meas, low_pred), (high_meas, high_pred)) = r.flops_quartiles();
        if r.mape_gp < r.mape_flops {
            wins += 1;
        }
        if low_pred > low_meas && high_pred < high_meas {
            signature += 1;
        }
        parts.push(format!(
            "{:.1}% vs {:.1}% (low q {:.2}/{:.2}, high q {:.2}/{:.2})",
            r.mape_gp, r.mape_flops, low_pred, low_meas, high_pred, high_meas
        ));
    }
    outcome(
        wins == 3 && signature == 3,
        format!("surfaces beat FLOPs {wins}/3, quartile signature {signature}/3: {}", parts.join("; ")),
    )
}

fn acquisition_efficiency() -> Outcome {
    let model = fixtures::single_fc(64, 10);
    let surfaces: Vec<Vec<Primitive>> = vec![
        vec![Primitive::Affine { a: 1.0, b_in: 0.2, d_out: 0.0 }],
        vec![
            Primitive::Affine { a: 0.8, b_in: 0.03, d_out: 0.0 },
            Primitive::SoftPlateau { height: 1.5, threshold: 40.0, steepness: 0.3, axis: Axis::In },
        ],
        vec![
            Primitive::Affine { a: 2.0, b_in: 0.05, d_out: 0.0 },
            Primitive::Ridge { amplitude: 1.2, center: 20.0, width: 4.0, axis: Axis::In },
        ],
        vec![
            Primitive::Affine { a: 1.0, b_in: 0.04, d_out: 0.0 },
            Primitive::TileStep { quantum: 16, cost: 0.4, axis: Axis::In },
        ],
        vec![
            Primitive::Affine { a: 0.5, b_in: 0.1, d_out: 0.0 },
            Primitive::SoftPlateau { height: 2.0, threshold: 24.0, steepness: 0.2, axis: Axis::In },
            Primitive::Ridge { amplitude: 0.8, center: 50.0, width: 5.0, axis: Axis::In },
        ],
    ];
    let mut ok = 0;
    let mut runs = 0;
    let mut totals = (0, 0);
    for prims in &surfaces {
        for seed in 0..5 {
            let cfg = fixtures::oracle_for(&model, vec![], vec![], prims.clone(), 0.02, seed);
            let points = |acquisition| {
                let settings = PlanSettings { budget: 64, acquisition, ..PlanSettings::default() };
                let (out, _) = profile(&model, cfg.clone(), settings);
                let s = &out.summary[0];
                (s.points, s.stop)
            };
            let (mv, mv_stop) = points(Acquisition::MaxVariance);
            let (rnd, rnd_stop) = points(Acquisition::UniformRandom { seed: 100 + seed });
            if std::env::var_os("ACCEPTANCE_VERBOSE").is_some() {
                println!("    {seed}: max-variance {mv} {mv_stop:?}, random {rnd} {rnd_stop:?}");
            }
            runs += 1;
            totals.0 += mv;
            totals.1 += rnd;
            if mv <= rnd && mv_stop == StopReason::VarianceStop {
                ok += 1;
            }
        }
    }
    outcome(
        ok >= 20,
        format!("max-variance used no more points in {ok}/{runs} runs (need 20); total points {} vs {}", totals.0, totals.1),
    )
}

fn trace_integration() -> Outcome {
    let constant = PowerTrace {
        samples: (0..4).map(|i| (f64::from(i) * 0.004, 5.0)).collect(),
        standby_power: 0.0,
        iterations: 1,
    };
    let c = integrate_trace(&constant).unwrap();
    // triangle 0 -> 10 W -> 0 over 10 s, sampled at 10 Hz
    let ramp = PowerTrace {
        samples: (0..=100)
            .map(|i| {
                let t = f64::from(i) * 0.1;
                (t, if t <= 5.0 { 2.0 * t } else { 2.0 * (10.0 - t) })
            })
            .collect(),
        standby_power: 0.0,
        iterations: 1,
    };
    let r = integrate_trace(&ramp).unwrap();
    outcome(
        (c - 0.08).abs() <= 1e-15 && (r - 50.0).abs() / 50.0 <= 0.005,
        format!("constant {c:.6} J/iter (want 0.080000); ramp {r:.4} J (want 50 ±0.5%)"),
    )
}

fn pruning_budget() -> Outcome {
    let model = fixtures::five_layer_cnn();
    let (out, mut sim) = profile(&model, fixtures::affine_oracle(&model, 0.02, 5), PlanSettings::default());
    let (pruned, trace) = prune_to_budget(&model, &out.surfaces, 0.5, 5, &PruneOptions::default()).unwrap();
    let before = measure(&mut sim, &model, 500, 3).unwrap().joules_per_iter;
    let after = measure(&mut sim, &pruned, 500, 3).unwrap().joules_per_iter;
    let ratio = after / before;
    outcome(
        trace.converged && ratio <= 0.52,
        format!(
            "converged {} in {} step(s), estimate {:.1}%, measured {:.1}% of original (tol 52%)",
            trace.converged,
            trace.steps.len(),
            100.0 * trace.final_estimate / trace.start,
            100.0 * ratio
        ),
    )
}

fn time_surrogate() -> Outcome {
    let model = fixtures::five_layer_cnn();
    let mut energy = Vec::new();
    let mut time = Vec::new();
    let mut min_r = f64::INFINITY;
    for seed in 0..3 {
        let cfg = fixtures::stepped_oracle(&model, 0.05, seed);
        energy.push(evaluate(&model, cfg.clone(), PlanSettings::default(), 3000 + seed).0.mape_gp);
        let settings = PlanSettings { surrogate: Surrogate::Time, ..PlanSettings::default() };
        let (r, out) = evaluate(&model, cfg, settings, 3000 + seed);
        time.push(r.mape_gp);
        let samples: Vec<_> = out.db.samples().cloned().collect();
        min_r = min_r.min(energy_time_correlation(&samples).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let degradation = mean(&time) - mean(&energy);
    outcome(
        degradation <= 3.0 && min_r > 0.9,
        format!(
            "MAPE energy {} time {} (degradation {degradation:+.2} pp, tol 3); min Pearson r {min_r:.4} (need > 0.9)",
            fmt_pcts(&energy),
            fmt_pcts(&time)
        ),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let model = fixtures::five_layer_cnn();
    let (out, _) = profile(&model, fixtures::stepped_oracle(&model, 0.02, 8), PlanSettings::default());
    let tmp = tempfile::tempdir().unwrap();
    joulemodel::io::save_surfaces(tmp.path(), &out.surfaces).unwrap();
    let loaded = joulemodel::io::load_surfaces(tmp.path()).unwrap();
    let mut worst: f64 = 0.0;
    for arch in joulemodel_core::evaluation::sample_architectures(&model, 100, 8) {
        let a = estimate(&arch, &out.surfaces).total_mean;
        let b = estimate(&arch, &loaded).total_mean;
        worst = worst.max((a - b).abs() / a.abs());
    }

    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let sim = data.join("sim_stepped.json");
    let model_path = data.join("cnn5.json");
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let cfg = RunConfig::from_options(RunOptions {
            backend: Some(format!("sim:{}", sim.display())),
            out: Some(tmp.path().join(name)),
            seed: Some(12),
            n: Some(20),
            outer_repeats: Some(1),
            ..RunOptions::default()
        })
        .unwrap();
        let mut sink = Vec::new();
        commands::profile(&model_path, &cfg, false, &mut sink).unwrap();
        commands::estimate(&model_path, &cfg.out, &cfg, &mut sink).unwrap();
        commands::evaluate(&model_path, &cfg.out, &cfg, &mut sink).unwrap();
        commands::prune(&model_path, &cfg.out, &cfg, &mut sink).unwrap();
        trees.push(tree(&cfg.out));
    }
    let identical = trees[0] == trees[1];
    outcome(
        worst <= 1e-9 && identical,
        format!(
            "save/load max rel diff {worst:.1e} (tol 1e-9); {} artifact file(s) {}",
            trees[0].len(),
            if identical { "byte-identical" } else { "DIFFER" }
        ),
    )
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let checks: [(&str, Check, u64); 10] = [
        ("kernel math", kernel_math, 1),
        ("GP interpolation", gp_interpolation, 1),
        ("subtractivity recovery", subtractivity, 10),
        ("additivity end-to-end", additivity, 120),
        ("baseline ordering", baseline_ordering, 120),
        ("acquisition efficiency", acquisition_efficiency, 60),
        ("trace integration", trace_integration, 1),
        ("pruning budget", pruning_budget, 30),
        ("time surrogate", time_surrogate, 120),
        ("determinism and persistence", determinism, 30),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in checks.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*limit);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {}: {} [{:.2}s, limit {}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            name,
            o.detail,
            elapsed.as_secs_f64(),
            limit
        );
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
