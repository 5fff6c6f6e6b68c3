//! Whole-model estimates as the sum of per-block surface predictions.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpSurface;
use crate::model::{Axis, Coord, LayerKey, ModelSpec};

pub type SurfaceSet = BTreeMap<LayerKey, GpSurface>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEstimate {
    pub block: usize,
    pub key: LayerKey,
    pub coordinate: Coord,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub model: alloc::string::String,
    pub per_block: Vec<BlockEstimate>,
    /// Joules per iteration.
    pub total_mean: f64,
    /// Sum of per-block variances (independent surfaces).
    pub total_variance: f64,
    pub total_joules: f64,
    pub iterations: u64,
    /// Keys with no fitted surface, deduplicated, in block order.
    pub missing_keys: Vec<LayerKey>,
    /// Blocks whose coordinate lies outside their surface's bounds.
    pub out_of_bounds: Vec<(usize, Coord)>,
}

impl EstimateReport {
    pub fn is_complete(&self) -> bool {
        self.missing_keys.is_empty() && self.out_of_bounds.is_empty()
    }

    pub fn require_complete(self) -> Result<Self> {
        if self.is_complete() {
            Ok(self)
        } else {
            Err(Error::IncompleteEstimate(
                self.missing_keys.len() + self.out_of_bounds.len(),
            ))
        }
    }
}

/// Queries each block's own surface at its coordinate and sums the results.
/// Blocks without a surface are reported, never approximated.
pub fn estimate(model: &ModelSpec, surfaces: &SurfaceSet) -> EstimateReport {
    let mut per_block = Vec::with_capacity(model.blocks.len());
    let mut missing_keys: Vec<LayerKey> = Vec::new();
    let mut out_of_bounds = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        let key = block.key();
        let coordinate = block.coordinate();
        let Some(surface) = surfaces.get(&key) else {
            if !missing_keys.contains(&key) {
                missing_keys.push(key);
            }
            continue;
        };
        match surface.predict(&coordinate) {
            Ok((mean, variance)) => per_block.push(BlockEstimate {
                block: i,
                key,
                coordinate,
                mean,
                variance,
            }),
            Err(_) => out_of_bounds.push((i, coordinate)),
        }
    }
    let total_mean: f64 = per_block.iter().map(|b| b.mean).sum();
    let total_variance = per_block.iter().map(|b| b.variance).sum();
    EstimateReport {
        model: model.name.clone(),
        per_block,
        total_mean,
        total_variance,
        total_joules: total_mean * model.iterations as f64,
        iterations: model.iterations,
        missing_keys,
        out_of_bounds,
    }
}

/// Finite-difference slope of block `block`'s posterior mean along `axis`,
/// in joules per channel. Central difference with a one-channel step,
/// one-sided at the surface bounds.
pub fn energy_gradient(model: &ModelSpec, surfaces: &SurfaceSet, block: usize, axis: Axis) -> Result<f64> {
    let b = model
        .blocks
        .get(block)
        .ok_or_else(|| Error::InvalidParameters(alloc::format!("no block {block}")))?;
    let key = b.key();
    let surface = surfaces.get(&key).ok_or(Error::MissingSurface(key))?;
    let pos = b
        .coordinate_axes()
        .iter()
        .position(|a| *a == axis)
        .ok_or_else(|| Error::InvalidParameters(alloc::format!("{:?} block has no {axis:?} coordinate", b.role)))?;
    let coord = b.coordinate();
    let c = coord.get(pos);
    let (lo, hi) = surface.bounds().0[pos];
    let at = |w: u32| surface.predict_mean(&coord.with(pos, w));
    if c > lo && c < hi {
        Ok((at(c + 1)? - at(c - 1)?) / 2.0)
    } else if c < hi {
        Ok(at(c + 1)? - at(c)?)
    } else if c > lo {
        Ok(at(c)? - at(c - 1)?)
    } else {
        // single-width surface
        surface.predict(&coord).map(|_| 0.0)
    }
}
