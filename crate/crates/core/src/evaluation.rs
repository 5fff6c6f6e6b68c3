//! Accuracy evaluation on randomly sampled architectures.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{estimate, SurfaceSet};
use crate::flops::{count_flops, FlopsModel};
use crate::measurement::{measure, EnergyBackend};
use crate::model::{LayerKind, ModelSpec, Role};

/// Draws `n` variants of `base`: each block boundary width uniformly from
/// `[1, original]`, and for encoder stacks the number of encoder blocks
/// uniformly from `[1, original count]`.
pub fn sample_architectures(base: &ModelSpec, n: usize, seed: u64) -> Vec<ModelSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoders: Vec<usize> = base
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.role == Role::Hidden && b.kind == LayerKind::AttentionEncoder)
        .map(|(i, _)| i)
        .collect();
    (0..n)
        .map(|_| {
            let mut m = base.clone();
            if !encoders.is_empty() {
                let keep = rng.gen_range(1..=encoders.len());
                for &i in encoders[keep..].iter().rev() {
                    m.blocks.remove(i);
                }
            }
            for i in 0..m.blocks.len().saturating_sub(1) {
                let original = m.blocks[i].out_channels;
                let w = rng.gen_range(1..=original);
                m.set_boundary_width(i, w);
            }
            m
        })
        .collect()
}

/// Mean absolute percentage error, in percent.
pub fn mape(actual: &[f64], estimated: &[f64]) -> Result<f64> {
    if actual.len() != estimated.len() {
        return Err(Error::LengthMismatch(actual.len(), estimated.len()));
    }
    if actual.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut sum = 0.0;
    for (i, (a, e)) in actual.iter().zip(estimated).enumerate() {
        if *a == 0.0 {
            return Err(Error::ZeroActual(i));
        }
        sum += libm::fabs(a - e) / libm::fabs(*a);
    }
    Ok(sum / actual.len() as f64 * 100.0)
}

/// Absolute percentage errors, sorted, paired with their cumulative fraction.
pub fn error_cdf(actual: &[f64], estimated: &[f64]) -> Result<Vec<(f64, f64)>> {
    if actual.len() != estimated.len() {
        return Err(Error::LengthMismatch(actual.len(), estimated.len()));
    }
    let mut errors = Vec::with_capacity(actual.len());
    for (i, (a, e)) in actual.iter().zip(estimated).enumerate() {
        if *a == 0.0 {
            return Err(Error::ZeroActual(i));
        }
        errors.push(libm::fabs(a - e) / libm::fabs(*a) * 100.0);
    }
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    Ok(errors
        .into_iter()
        .enumerate()
        .map(|(i, e)| (e, (i + 1) as f64 / n))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Widths at each block boundary.
    pub channels: Vec<u32>,
    pub measured: f64,
    pub estimated: f64,
    pub flops: f64,
    pub flops_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
    pub mape_gp: f64,
    pub mape_flops: f64,
    pub cdf_gp: Vec<(f64, f64)>,
    pub cdf_flops: Vec<(f64, f64)>,
    /// Sampled architectures dropped because their estimate was incomplete.
    pub excluded: usize,
    pub seed: u64,
    pub repeats: u32,
}

impl EvalResult {
    /// Mean of measured and FLOPs-predicted energy in the lowest and highest
    /// FLOP quartiles: `((measured, predicted) low, (measured, predicted) high)`.
    pub fn flops_quartiles(&self) -> ((f64, f64), (f64, f64)) {
        let mut rows: Vec<&EvalRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.flops.total_cmp(&b.flops));
        let q = (rows.len() / 4).max(1);
        let avg = |rs: &[&EvalRow]| {
            let n = rs.len() as f64;
            (
                rs.iter().map(|r| r.measured).sum::<f64>() / n,
                rs.iter().map(|r| r.flops_estimate).sum::<f64>() / n,
            )
        };
        (avg(&rows[..q]), avg(&rows[rows.len() - q..]))
    }
}

/// Measures sampled architectures and scores both estimators against the
/// measurements.
#[allow(clippy::too_many_arguments)]
pub fn run_comparison<B: EnergyBackend + ?Sized>(
    base: &ModelSpec,
    backend: &mut B,
    surfaces: &SurfaceSet,
    baseline: &FlopsModel,
    n: usize,
    repeats: u32,
    iterations: u64,
    seed: u64,
) -> Result<EvalResult> {
    let mut rows = Vec::with_capacity(n);
    let mut excluded = 0;
    for arch in sample_architectures(base, n, seed) {
        let report = estimate(&arch, surfaces);
        if !report.is_complete() {
            excluded += 1;
            continue;
        }
        let measured = measure(backend, &arch, iterations, repeats)?.joules_per_iter;
        let flops = count_flops(&arch);
        rows.push(EvalRow {
            channels: arch.blocks[..arch.blocks.len() - 1].iter().map(|b| b.out_channels).collect(),
            measured,
            estimated: report.total_mean,
            flops,
            flops_estimate: baseline.predict_flops(flops),
        });
    }
    let actual: Vec<f64> = rows.iter().map(|r| r.measured).collect();
    let gp: Vec<f64> = rows.iter().map(|r| r.estimated).collect();
    let fl: Vec<f64> = rows.iter().map(|r| r.flops_estimate).collect();
    Ok(EvalResult {
        mape_gp: mape(&actual, &gp)?,
        mape_flops: mape(&actual, &fl)?,
        cdf_gp: error_cdf(&actual, &gp)?,
        cdf_flops: error_cdf(&actual, &fl)?,
        rows,
        excluded,
        seed,
        repeats,
    })
}

/// Mean and standard error over outer repeats.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn mape_examples() {
        assert!((mape(&[100.0, 200.0], &[110.0, 180.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(mape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mape(&[50.0], &[75.0]).unwrap(), 50.0);
        assert_eq!(mape(&[0.0], &[1.0]), Err(Error::ZeroActual(0)));
        assert_eq!(mape(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2)));
    }

    #[test]
    fn samples_are_valid_and_deterministic() {
        let base = fixtures::five_layer_cnn();
        let a = sample_architectures(&base, 100, 11);
        assert_eq!(a.len(), 100);
        for m in &a {
            m.validate().unwrap();
            for (b, o) in m.blocks.iter().zip(&base.blocks) {
                assert!(b.out_channels <= o.out_channels && b.out_channels >= 1);
            }
            assert_eq!(m.blocks[0].in_channels, 3);
            assert_eq!(m.blocks[4].out_channels, 10);
        }
        assert_eq!(a, sample_architectures(&base, 100, 11));
        assert_ne!(a, sample_architectures(&base, 100, 12));
    }

    #[test]
    fn unit_widths_sample_to_the_base() {
        let mut base = fixtures::five_layer_cnn();
        for i in 0..4 {
            base.set_boundary_width(i, 1);
        }
        assert_eq!(sample_architectures(&base, 1, 3), vec![base]);
    }

    #[test]
    fn encoder_depth_is_sampled() {
        let base = fixtures::encoder_model(6);
        let depths: Vec<usize> = sample_architectures(&base, 200, 5).iter().map(|m| m.blocks.len() - 2).collect();
        assert!(depths.iter().all(|d| (1..=6).contains(d)));
        assert!(depths.contains(&1) && depths.contains(&6));
        for m in sample_architectures(&base, 20, 5) {
            m.validate().unwrap();
        }
    }

    #[test]
    fn cdf_ends_at_one() {
        let cdf = error_cdf(&[1.0, 2.0, 4.0], &[1.5, 2.0, 3.0]).unwrap();
        assert_eq!(cdf.last().unwrap().1, 1.0);
        assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }

    proptest! {
        #[test]
        fn mape_is_scale_invariant(
            pairs in proptest::collection::vec((0.1f64..100.0, 0.0f64..200.0), 1..20),
            k in 0.01f64..100.0,
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let e: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let ka: Vec<f64> = a.iter().map(|x| x * k).collect();
            let ke: Vec<f64> = e.iter().map(|x| x * k).collect();
            let m1 = mape(&a, &e).unwrap();
            let m2 = mape(&ka, &ke).unwrap();
            prop_assert!((m1 - m2).abs() <= 1e-9 * (1.0 + m1));
        }

        #[test]
        fn cdf_is_monotone(pairs in proptest::collection::vec((0.1f64..100.0, 0.0f64..200.0), 1..40)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let e: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let cdf = error_cdf(&a, &e).unwrap();
            prop_assert_eq!(cdf.last().unwrap().1, 1.0);
            prop_assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
        }
    }
}
