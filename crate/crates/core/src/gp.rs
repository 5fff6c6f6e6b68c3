//! Exact Gaussian-process regression over channel coordinates.
//!
//! Inputs are normalized to `[0, 1]` per axis using the surface's channel
//! bounds and targets are standardized before fitting, so the length-scale
//! grid means the same thing for every layer key. Hyperparameters are chosen
//! by maximizing the log marginal likelihood over a fixed grid; for each grid
//! point the signal variance takes its closed-form optimum.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::model::{Bounds, Coord, LayerKey};

/// Length scales searched, in normalized coordinates.
pub const LENGTH_SCALE_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
/// Noise variances searched, as fractions of the signal variance.
pub const NOISE_RATIO_GRID: [f64; 4] = [1e-6, 1e-4, 1e-2, 0.05];
/// Offsets searched for the dot-product kernel.
pub const SIGMA0_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const SIGNAL_FLOOR: f64 = 1e-6;
const FACTOR_TOLERANCE: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub family: KernelFamily,
    /// Used by `Matern25` and `Rbf`.
    pub length_scales: Vec<f64>,
    /// Used by `DotProduct`.
    pub sigma0_grid: Vec<f64>,
    pub noise_ratios: Vec<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions::for_family(KernelFamily::Matern25)
    }
}

impl FitOptions {
    pub fn for_family(family: KernelFamily) -> Self {
        FitOptions {
            family,
            length_scales: LENGTH_SCALE_GRID.to_vec(),
            sigma0_grid: SIGMA0_GRID.to_vec(),
            noise_ratios: NOISE_RATIO_GRID.to_vec(),
        }
    }

    /// Interpolating fit: no noise term beyond the jitter floor.
    pub fn noiseless(family: KernelFamily) -> Self {
        FitOptions {
            noise_ratios: alloc::vec![0.0],
            ..FitOptions::for_family(family)
        }
    }

    pub fn with_length_scales(mut self, scales: &[f64]) -> Self {
        self.length_scales = scales.to_vec();
        self
    }

    fn candidate_kernels(&self) -> Vec<KernelSpec> {
        match self.family {
            KernelFamily::Matern25 => self
                .length_scales
                .iter()
                .map(|&l| KernelSpec::matern25(l, 1.0))
                .collect(),
            KernelFamily::Rbf => self.length_scales.iter().map(|&l| KernelSpec::rbf(l, 1.0)).collect(),
            KernelFamily::DotProduct => self
                .sigma0_grid
                .iter()
                .map(|&s| KernelSpec::dot_product(s, 1.0))
                .collect(),
        }
    }
}

/// Everything needed to rebuild a surface. Hyperparameters, noise and jitter
/// are in standardized target units; training pairs are raw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub key: LayerKey,
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    pub jitter: f64,
    pub x_bounds: Bounds,
    pub train: Vec<(Coord, f64)>,
    pub y_mean: f64,
    pub y_std: f64,
}

/// A fitted GP posterior for one layer key.
#[derive(Debug, Clone)]
pub struct GpSurface {
    params: SurfaceParams,
    x: Vec<[f64; 2]>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpSurface {
    /// Factorizes the covariance described by `params` and checks the factor
    /// reproduces it.
    pub fn from_params(params: SurfaceParams) -> Result<Self> {
        params.kernel.validate()?;
        if params.train.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        if !(params.noise_variance >= 0.0 && params.jitter >= 0.0 && params.y_std > 0.0) {
            return Err(Error::InvalidParameters(alloc::format!(
                "noise {} jitter {} y_std {}",
                params.noise_variance,
                params.jitter,
                params.y_std
            )));
        }
        for (c, _) in &params.train {
            check_bounds(&params.x_bounds, c)?;
        }
        let x: Vec<[f64; 2]> = params
            .train
            .iter()
            .map(|(c, _)| normalize(&params.x_bounds, c))
            .collect();
        let dims = params.x_bounds.dims();
        let y = DVector::from_iterator(
            params.train.len(),
            params.train.iter().map(|(_, v)| (v - params.y_mean) / params.y_std),
        );
        let mut cov = gram(&params.kernel, &x, dims);
        let diag = params.noise_variance + params.jitter;
        for i in 0..cov.nrows() {
            cov[(i, i)] += diag;
        }
        let chol = cov.clone().cholesky().ok_or(Error::SingularCovariance {
            jitter: params.jitter,
        })?;
        let l = chol.l();
        let residual = (&l * l.transpose() - &cov).norm();
        if residual > FACTOR_TOLERANCE * cov.norm() {
            return Err(Error::SingularCovariance {
                jitter: params.jitter,
            });
        }
        let alpha = chol.solve(&y);
        Ok(GpSurface {
            params,
            x,
            chol,
            alpha,
        })
    }

    pub fn params(&self) -> &SurfaceParams {
        &self.params
    }

    pub fn key(&self) -> &LayerKey {
        &self.params.key
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.params.kernel
    }

    pub fn bounds(&self) -> &Bounds {
        &self.params.x_bounds
    }

    pub fn train(&self) -> &[(Coord, f64)] {
        &self.params.train
    }

    pub fn len(&self) -> usize {
        self.params.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.train.is_empty()
    }

    /// Lower-triangular factor of `K + noise·I` in standardized units.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Prior variance at `query`, in de-standardized units.
    pub fn prior_variance(&self, query: &Coord) -> Result<f64> {
        check_bounds(&self.params.x_bounds, query)?;
        let q = normalize(&self.params.x_bounds, query);
        let d = self.params.x_bounds.dims();
        Ok(self.params.kernel.eval_unchecked(&q[..d], &q[..d]) * self.params.y_std * self.params.y_std)
    }

    /// Posterior mean and variance at `query`, de-standardized.
    pub fn predict(&self, query: &Coord) -> Result<(f64, f64)> {
        check_bounds(&self.params.x_bounds, query)?;
        let d = self.params.x_bounds.dims();
        let q = normalize(&self.params.x_bounds, query);
        let kernel = &self.params.kernel;
        let k_star = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|x| kernel.eval_unchecked(&x[..d], &q[..d])),
        );
        let mean = k_star.dot(&self.alpha);
        let l = self.chol.l_dirty();
        let v = l
            .solve_lower_triangular(&k_star)
            .ok_or(Error::SingularCovariance {
                jitter: self.params.jitter,
            })?;
        let var = (kernel.eval_unchecked(&q[..d], &q[..d]) - v.norm_squared()).max(0.0);
        let s = self.params.y_std;
        Ok((mean * s + self.params.y_mean, var * s * s))
    }

    pub fn predict_mean(&self, query: &Coord) -> Result<f64> {
        self.predict(query).map(|(m, _)| m)
    }

    /// Log marginal likelihood of the standardized training targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = DVector::from_iterator(
            self.params.train.len(),
            self.params
                .train
                .iter()
                .map(|(_, v)| (v - self.params.y_mean) / self.params.y_std),
        );
        lml_from_factor(&self.chol, &y)
    }
}

/// `−½ yᵀα − Σ log Lᵢᵢ − (n/2) log 2π` for covariance `gram + noise·I`.
pub fn log_marginal_likelihood(gram: &DMatrix<f64>, noise_variance: f64, y: &DVector<f64>) -> Result<f64> {
    if gram.nrows() != y.len() || gram.ncols() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: gram.nrows(),
            got: y.len(),
        });
    }
    let mut cov = gram.clone();
    for i in 0..cov.nrows() {
        cov[(i, i)] += noise_variance;
    }
    let chol = cov
        .cholesky()
        .ok_or(Error::SingularCovariance { jitter: 0.0 })?;
    Ok(lml_from_factor(&chol, y))
}

fn lml_from_factor(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let alpha = chol.solve(y);
    let n = y.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| libm::log(*d)).sum();
    -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n * LN_2PI
}

/// Fits a surface for `key` to `(coordinate, value)` samples.
///
/// Repeated coordinates are averaged before fitting.
pub fn fit(key: &LayerKey, samples: &[(Coord, f64)], bounds: &Bounds, options: &FitOptions) -> Result<GpSurface> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let mut grouped: BTreeMap<Coord, (f64, usize)> = BTreeMap::new();
    for (c, v) in samples {
        if c.dims() != bounds.dims() {
            return Err(Error::DimensionMismatch {
                expected: bounds.dims(),
                got: c.dims(),
            });
        }
        check_bounds(bounds, c)?;
        if !v.is_finite() {
            return Err(Error::InvalidParameters(alloc::format!("non-finite target {v} at {c}")));
        }
        let e = grouped.entry(*c).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let train: Vec<(Coord, f64)> = grouped
        .into_iter()
        .map(|(c, (sum, n))| (c, sum / n as f64))
        .collect();

    let n = train.len() as f64;
    let y_mean = train.iter().map(|(_, v)| v).sum::<f64>() / n;
    let spread = libm::sqrt(train.iter().map(|(_, v)| (v - y_mean) * (v - y_mean)).sum::<f64>() / n);
    let y_std = if spread > 1e-12 * y_mean.abs().max(1e-300) {
        spread
    } else if y_mean != 0.0 {
        y_mean.abs()
    } else {
        1.0
    };

    let dims = bounds.dims();
    let x: Vec<[f64; 2]> = train.iter().map(|(c, _)| normalize(bounds, c)).collect();
    let y = DVector::from_iterator(train.len(), train.iter().map(|(_, v)| (v - y_mean) / y_std));

    let mut best: Option<(f64, KernelSpec, f64, f64)> = None;
    for unit in options.candidate_kernels() {
        unit.validate()?;
        let k = gram(&unit, &x, dims);
        for &ratio in &options.noise_ratios {
            let Some((chol, jitter)) = factor_with_jitter(&k, ratio) else {
                continue;
            };
            let alpha = chol.solve(&y);
            let quad = y.dot(&alpha);
            let scale = (quad / n).max(SIGNAL_FLOOR);
            let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| libm::log(*d)).sum();
            let lml = -0.5 * quad / scale - log_det_half - 0.5 * n * libm::log(scale) - 0.5 * n * LN_2PI;
            if best.as_ref().map_or(true, |(b, ..)| lml > *b) {
                let kernel = KernelSpec {
                    signal_variance: scale,
                    ..unit
                };
                best = Some((lml, kernel, ratio * scale, jitter * scale));
            }
        }
    }
    let (_, kernel, noise_variance, jitter) = best.ok_or(Error::SingularCovariance { jitter: JITTER_MAX })?;
    GpSurface::from_params(SurfaceParams {
        key: key.clone(),
        kernel,
        noise_variance,
        jitter,
        x_bounds: bounds.clone(),
        train,
        y_mean,
        y_std,
    })
}

fn factor_with_jitter(k: &DMatrix<f64>, noise_ratio: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut cov = k.clone();
        for i in 0..cov.nrows() {
            cov[(i, i)] += noise_ratio + jitter;
        }
        if let Some(chol) = cov.cholesky() {
            return Some((chol, jitter));
        }
        jitter *= 10.0;
    }
    None
}

fn gram(kernel: &KernelSpec, x: &[[f64; 2]], dims: usize) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval_unchecked(&x[i][..dims], &x[j][..dims]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub(crate) fn check_bounds(bounds: &Bounds, c: &Coord) -> Result<()> {
    if bounds.contains(c) {
        Ok(())
    } else {
        Err(Error::OutOfBounds {
            query: c.to_vec(),
            bounds: bounds.0.clone(),
        })
    }
}

fn normalize(bounds: &Bounds, c: &Coord) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (axis, (lo, hi)) in bounds.0.iter().enumerate() {
        let span = f64::from(hi - lo).max(1.0);
        out[axis] = f64::from(c.get(axis) - lo) / span;
    }
    out
}
