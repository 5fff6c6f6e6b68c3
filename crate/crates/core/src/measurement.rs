//! Energy accounting and measurement backends.
//!
//! A backend runs a variant model for some iterations and reports joules and
//! seconds per iteration. [`SimDevice`] is a deterministic synthetic device
//! whose per-layer energy is a configured sum of primitives; trace replay and
//! external-command backends live in the std companion crate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::count_flops;
use crate::model::{Axis, Coord, LayerBlock, LayerKey, ModelSpec};

/// Sampled power draw of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    /// `(seconds, watts)`, strictly increasing in time.
    pub samples: Vec<(f64, f64)>,
    pub standby_power: f64,
    pub iterations: u64,
}

impl PowerTrace {
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::ShortTrace);
        }
        if self.iterations == 0 {
            return Err(Error::InvalidTrace("iterations must be positive".into()));
        }
        if !(self.standby_power >= 0.0) {
            return Err(Error::InvalidTrace("standby power must be nonnegative".into()));
        }
        for (i, w) in self.samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::NonMonotoneTrace(i + 1));
            }
        }
        if let Some(i) = self.samples.iter().position(|(_, p)| !(*p >= 0.0)) {
            return Err(Error::InvalidTrace(alloc::format!("negative power at sample {i}")));
        }
        Ok(())
    }

    /// Wall time covered by the trace; the last sample is held for its
    /// predecessor's interval.
    pub fn duration(&self) -> f64 {
        let n = self.samples.len();
        let last_dt = self.samples[n - 1].0 - self.samples[n - 2].0;
        self.samples[n - 1].0 - self.samples[0].0 + last_dt
    }
}

/// Net energy per iteration: left Riemann sum of `(p − standby)` clamped at
/// zero, divided by the iteration count.
pub fn integrate_trace(trace: &PowerTrace) -> Result<f64> {
    trace.validate()?;
    let s = &trace.samples;
    let n = s.len();
    let mut total = 0.0;
    let mut compensation = 0.0;
    for i in 0..n {
        let dt = if i + 1 < n { s[i + 1].0 - s[i].0 } else { s[i].0 - s[i - 1].0 };
        let term = (s[i].1 - trace.standby_power).max(0.0) * dt;
        // Neumaier summation
        let t = total + term;
        if libm::fabs(total) >= libm::fabs(term) {
            compensation += (total - t) + term;
        } else {
            compensation += (term - t) + total;
        }
        total = t;
    }
    Ok((total + compensation) / trace.iterations as f64)
}

/// One backend run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunReading {
    pub joules_per_iter: f64,
    pub seconds_per_iter: f64,
}

/// Something that can train a variant model and report its cost.
pub trait EnergyBackend {
    fn run(&mut self, variant: &ModelSpec, iterations: u64) -> Result<RunReading>;
}

impl<B: EnergyBackend + ?Sized> EnergyBackend for &mut B {
    fn run(&mut self, variant: &ModelSpec, iterations: u64) -> Result<RunReading> {
        (**self).run(variant, iterations)
    }
}

impl<B: EnergyBackend + ?Sized> EnergyBackend for alloc::boxed::Box<B> {
    fn run(&mut self, variant: &ModelSpec, iterations: u64) -> Result<RunReading> {
        (**self).run(variant, iterations)
    }
}

/// A profiled observation averaged over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub variant: String,
    /// Coordinate of the layer the variant was built to isolate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinate: Option<Coord>,
    pub joules_per_iter: f64,
    pub seconds_per_iter: f64,
    pub repeats: u32,
    /// Relative standard deviation of joules over the repeats.
    pub spread: f64,
    /// Training FLOPs per iteration of the variant.
    pub flops: f64,
}

/// Runs `variant` `repeats` times and averages.
pub fn measure<B: EnergyBackend + ?Sized>(
    backend: &mut B,
    variant: &ModelSpec,
    iterations: u64,
    repeats: u32,
) -> Result<EnergySample> {
    let repeats = repeats.max(1);
    let mut joules = Vec::with_capacity(repeats as usize);
    let mut seconds = 0.0;
    for _ in 0..repeats {
        let r = backend.run(variant, iterations)?;
        if !(r.joules_per_iter >= 0.0 && r.seconds_per_iter >= 0.0) {
            return Err(Error::Backend(alloc::format!(
                "negative or non-finite reading {} J, {} s",
                r.joules_per_iter,
                r.seconds_per_iter
            )));
        }
        joules.push(r.joules_per_iter);
        seconds += r.seconds_per_iter;
    }
    let n = f64::from(repeats);
    let mean = joules.iter().sum::<f64>() / n;
    let var = joules.iter().map(|j| (j - mean) * (j - mean)).sum::<f64>() / n;
    Ok(EnergySample {
        variant: variant.name.clone(),
        coordinate: None,
        joules_per_iter: mean,
        seconds_per_iter: seconds / n,
        repeats,
        spread: if mean > 0.0 { libm::sqrt(var) / mean } else { 0.0 },
        flops: count_flops(variant),
    })
}

/// Pearson correlation between energy and time over samples.
pub fn energy_time_correlation(samples: &[EnergySample]) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.joules_per_iter, s.seconds_per_iter)).collect();
    pearson(&pairs)
}

pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// A term of a simulated per-layer energy surface, in joules per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// `a + b_in·c_in + d_out·c_out`
    Affine { a: f64, b_in: f64, d_out: f64 },
    /// Sigmoid step `height / (1 + exp(−steepness·(c − threshold)))`.
    SoftPlateau {
        height: f64,
        threshold: f64,
        steepness: f64,
        axis: Axis,
    },
    /// Gaussian bump `amplitude·exp(−(c − center)² / (2·width²))`.
    Ridge {
        amplitude: f64,
        center: f64,
        width: f64,
        axis: Axis,
    },
    /// `cost·ceil(c / quantum)`, mimicking tiled kernel launches.
    TileStep { quantum: u32, cost: f64, axis: Axis },
}

impl Primitive {
    pub fn eval(&self, c_in: u32, c_out: u32) -> f64 {
        let pick = |axis: &Axis| match axis {
            Axis::In => f64::from(c_in),
            Axis::Out => f64::from(c_out),
        };
        match self {
            Primitive::Affine { a, b_in, d_out } => a + b_in * f64::from(c_in) + d_out * f64::from(c_out),
            Primitive::SoftPlateau {
                height,
                threshold,
                steepness,
                axis,
            } => height / (1.0 + libm::exp(-steepness * (pick(axis) - threshold))),
            Primitive::Ridge {
                amplitude,
                center,
                width,
                axis,
            } => {
                let d = pick(axis) - center;
                amplitude * libm::exp(-d * d / (2.0 * width * width))
            }
            Primitive::TileStep { quantum, cost, axis } => {
                cost * libm::ceil(pick(axis) / f64::from(*quantum))
            }
        }
    }

    fn is_nonnegative(&self) -> bool {
        match self {
            Primitive::Affine { a, b_in, d_out } => *a >= 0.0 && *b_in >= 0.0 && *d_out >= 0.0,
            Primitive::SoftPlateau { height, steepness, .. } => *height >= 0.0 && steepness.is_finite(),
            Primitive::Ridge { amplitude, width, .. } => *amplitude >= 0.0 && *width > 0.0,
            Primitive::TileStep { quantum, cost, .. } => *quantum >= 1 && *cost >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDeviceConfig {
    pub surfaces: BTreeMap<LayerKey, Vec<Primitive>>,
    pub noise_rel: f64,
    /// Converts energy into the simulated time channel.
    pub avg_power_w: f64,
    pub seed: u64,
}

impl SimDeviceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.2).contains(&self.noise_rel) {
            return Err(Error::InvalidSimConfig(alloc::format!("noise_rel {} outside [0, 0.2]", self.noise_rel)));
        }
        if !(self.avg_power_w > 0.0) {
            return Err(Error::InvalidSimConfig("avg_power_w must be positive".into()));
        }
        for (key, prims) in &self.surfaces {
            if prims.iter().any(|p| !p.is_nonnegative()) {
                return Err(Error::InvalidSimConfig(alloc::format!("surface {key} can go negative")));
            }
        }
        Ok(())
    }

    /// Noise-free energy of one block.
    pub fn block_energy(&self, block: &LayerBlock) -> Result<f64> {
        let key = block.key();
        let prims = self.surfaces.get(&key).ok_or(Error::SimKeyMissing(key))?;
        Ok(prims.iter().map(|p| p.eval(block.in_channels, block.out_channels)).sum())
    }

    /// Noise-free energy of a whole model: the sum over its blocks.
    pub fn model_energy(&self, model: &ModelSpec) -> Result<f64> {
        model.blocks.iter().map(|b| self.block_energy(b)).sum()
    }

    /// Noise-free energy of the surface for `key` at `coord`, with the axes not
    /// in the coordinate fixed by `template`.
    pub fn surface_at(&self, template: &LayerBlock, coord: &Coord) -> Result<f64> {
        let mut block = template.clone();
        crate::profiler::apply_coordinate(&mut block, coord);
        self.block_energy(&block)
    }
}

/// Synthetic device: additive per-block energy with truncated Gaussian noise.
#[derive(Debug, Clone)]
pub struct SimDevice {
    config: SimDeviceConfig,
    rng: ChaCha8Rng,
}

impl SimDevice {
    pub fn new(config: SimDeviceConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(SimDevice { config, rng })
    }

    pub fn config(&self) -> &SimDeviceConfig {
        &self.config
    }

    /// Relative noise `ε ~ N(0, noise_rel²)` truncated to ±3σ by rejection.
    fn noise(&mut self) -> f64 {
        let sigma = self.config.noise_rel;
        if sigma == 0.0 {
            return 0.0;
        }
        loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if libm::fabs(z) <= 3.0 {
                return sigma * z;
            }
        }
    }
}

impl EnergyBackend for SimDevice {
    fn run(&mut self, variant: &ModelSpec, _iterations: u64) -> Result<RunReading> {
        let truth = self.config.model_energy(variant)?;
        let joules = truth * (1.0 + self.noise());
        let seconds = joules / self.config.avg_power_w * (1.0 + self.noise());
        Ok(RunReading {
            joules_per_iter: joules,
            seconds_per_iter: seconds,
        })
    }
}
