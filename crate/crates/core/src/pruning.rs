//! Energy-budgeted random channel pruning.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{energy_gradient, estimate, SurfaceSet};
use crate::model::{Axis, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub min_width: u32,
    pub max_proposals: usize,
    /// Fraction of the current width removed per proposal (at least one channel).
    pub step_fraction: f64,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            min_width: 1,
            max_proposals: 10_000,
            step_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub block: usize,
    pub axis: Axis,
    pub old_width: u32,
    pub new_width: u32,
    /// Estimated joules per iteration after the step.
    pub estimate_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub steps: Vec<PruneStep>,
    pub start: f64,
    pub target_fraction: f64,
    #[serde(rename = "final")]
    pub final_estimate: f64,
    pub converged: bool,
    pub proposals: usize,
    pub seed: u64,
}

fn total(model: &ModelSpec, surfaces: &SurfaceSet) -> Option<f64> {
    let r = estimate(model, surfaces);
    r.is_complete().then_some(r.total_mean)
}

/// Shrinks randomly chosen block boundaries until the estimated energy per
/// iteration is at most `target_fraction` of the original.
///
/// A proposal narrows one boundary (the output of block `i` and the input of
/// block `i + 1`) by `max(1, ceil(step_fraction·width))` and is kept only if
/// the estimate strictly drops. The model's input channels and the output
/// block's output dimension are never touched. Stops without converging once
/// every boundary is at `min_width` or has been rejected since the last
/// accepted step.
pub fn prune_to_budget(
    model: &ModelSpec,
    surfaces: &SurfaceSet,
    target_fraction: f64,
    seed: u64,
    options: &PruneOptions,
) -> Result<(ModelSpec, PruneTrace)> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::InvalidParameters(alloc::format!(
            "target fraction {target_fraction} outside (0, 1]"
        )));
    }
    let report = estimate(model, surfaces).require_complete()?;
    let start = report.total_mean;
    let budget = target_fraction * start;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = model.clone();
    let mut energy = start;
    let mut steps = Vec::new();
    let mut proposals = 0;
    // a proposal depends only on the current widths, so a rejected boundary
    // stays rejected until some other step is accepted
    let mut rejected: Vec<usize> = Vec::new();
    let boundaries = model.blocks.len().saturating_sub(1);

    let converged = loop {
        if energy <= budget {
            break true;
        }
        if proposals >= options.max_proposals {
            break false;
        }
        let open: Vec<usize> = (0..boundaries)
            .filter(|&i| current.blocks[i].out_channels > options.min_width && !rejected.contains(&i))
            .collect();
        if open.is_empty() {
            break false;
        }
        proposals += 1;
        let i = open[rng.gen_range(0..open.len())];
        let old = current.blocks[i].out_channels;
        let delta = (libm::ceil(options.step_fraction * f64::from(old)) as u32).max(1);
        let new = old.saturating_sub(delta).max(options.min_width);
        let mut candidate = current.clone();
        candidate.set_boundary_width(i, new);
        match total(&candidate, surfaces) {
            Some(e) if e < energy => {
                current = candidate;
                energy = e;
                steps.push(PruneStep {
                    block: i,
                    axis: Axis::Out,
                    old_width: old,
                    new_width: new,
                    estimate_after: e,
                });
                rejected.clear();
            }
            _ => rejected.push(i),
        }
    };
    Ok((
        current,
        PruneTrace {
            steps,
            start,
            target_fraction,
            final_estimate: energy,
            converged,
            proposals,
            seed,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub block: usize,
    pub axis: Axis,
    /// Joules per iteration per channel.
    pub gradient: f64,
}

/// Every (block, axis) ranked by descending gradient magnitude, ties by block
/// index then axis.
pub fn guidance_report(model: &ModelSpec, surfaces: &SurfaceSet) -> Result<Vec<Guidance>> {
    estimate(model, surfaces).require_complete()?;
    let mut out = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        for &axis in block.coordinate_axes() {
            out.push(Guidance {
                block: i,
                axis,
                gradient: energy_gradient(model, surfaces, i, axis)?,
            });
        }
    }
    out.sort_by(|a, b| {
        libm::fabs(b.gradient)
            .total_cmp(&libm::fabs(a.gradient))
            .then(a.block.cmp(&b.block))
            .then(a.axis.cmp(&b.axis))
    });
    Ok(out)
}
