//! FLOP counting and the FLOPs-to-energy linear regression baseline.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerBlock, LayerKind, ModelSpec};

/// Backward pass plus weight update, counted as twice the forward work.
pub const TRAINING_MULTIPLIER: f64 = 3.0;

/// Forward FLOPs of one block. Multiply–accumulates count as 2 FLOPs; bias
/// terms and non-parametric layers are ignored.
///
/// For sequence layers the block's spatial extent `height × width` is the
/// token count.
pub fn block_forward_flops(block: &LayerBlock) -> f64 {
    let batch = f64::from(block.batch_size);
    let c_in = f64::from(block.in_channels);
    let c_out = f64::from(block.out_channels);
    let (h, w) = (f64::from(block.spatial.0), f64::from(block.spatial.1));
    let tokens = h * w;
    match block.kind {
        LayerKind::Conv2d => {
            let k = f64::from(block.kernel_size.unwrap_or(1));
            let s = f64::from(block.stride.unwrap_or(1));
            let h_out = libm::ceil(h / s);
            let w_out = libm::ceil(w / s);
            2.0 * k * k * c_in * c_out * h_out * w_out * batch
        }
        LayerKind::FullyConnected => 2.0 * c_in * c_out * batch,
        // gather of one row per token
        LayerKind::Embedding => 2.0 * tokens * c_out * batch,
        // four gates over [x, h]
        LayerKind::LstmCell => 2.0 * 4.0 * (c_in + c_out) * c_out * tokens * batch,
        // QKV + output projections, attention scores and mix, 4x FFN
        LayerKind::AttentionEncoder => {
            let per_token = 3.0 * c_in * c_out + c_out * c_out + 2.0 * tokens * c_out + 8.0 * c_out * c_out;
            2.0 * per_token * tokens * batch
        }
        LayerKind::BatchNorm | LayerKind::MaxPool | LayerKind::Dropout | LayerKind::Relu | LayerKind::Flatten => 0.0,
    }
}

/// Training FLOPs per iteration.
pub fn count_flops(model: &ModelSpec) -> f64 {
    TRAINING_MULTIPLIER * model.blocks.iter().map(block_forward_flops).sum::<f64>()
}

/// Ordinary least squares from FLOPs to joules per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub slope: f64,
    pub intercept: f64,
    pub pairs: Vec<(f64, f64)>,
}

impl FlopsModel {
    pub fn fit(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: pairs.len(),
            });
        }
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if !(sxx > 0.0) {
            return Err(Error::DegenerateDesign);
        }
        let slope = sxy / sxx;
        Ok(FlopsModel {
            slope,
            intercept: my - slope * mx,
            pairs: pairs.to_vec(),
        })
    }

    pub fn predict_flops(&self, flops: f64) -> f64 {
        (self.slope * flops + self.intercept).max(0.0)
    }

    pub fn predict(&self, model: &ModelSpec) -> f64 {
        self.predict_flops(count_flops(model))
    }

    pub fn squared_error(&self) -> f64 {
        sse(self.slope, self.intercept, &self.pairs)
    }
}

fn sse(slope: f64, intercept: f64, pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    #[test]
    fn unit_fc_counts_one_mac() {
        let m = fixtures::single_fc(1, 1);
        let mut m = m;
        m.blocks[0].batch_size = 1;
        assert_eq!(block_forward_flops(&m.blocks[0]), 2.0);
        assert_eq!(count_flops(&m), 6.0);
    }

    #[test]
    fn unit_conv_counts_one_mac() {
        let mut m = fixtures::five_layer_cnn();
        m.blocks.truncate(1);
        let b = &mut m.blocks[0];
        b.kernel_size = Some(1);
        b.stride = Some(1);
        b.in_channels = 1;
        b.out_channels = 1;
        b.spatial = (1, 1);
        b.batch_size = 1;
        assert_eq!(block_forward_flops(&m.blocks[0]), 2.0);
        assert_eq!(count_flops(&m), 6.0);
    }

    #[test]
    fn batch_is_linear() {
        let m = fixtures::five_layer_cnn();
        let mut doubled = m.clone();
        for b in &mut doubled.blocks {
            b.batch_size *= 2;
        }
        assert_eq!(count_flops(&doubled), 2.0 * count_flops(&m));
    }

    #[test]
    fn exact_line_fit() {
        let f = FlopsModel::fit(&[(100.0, 10.0), (200.0, 20.0)]).unwrap();
        assert!((f.slope - 0.1).abs() < 1e-15);
        assert!(f.intercept.abs() < 1e-12);
        assert!((f.predict_flops(150.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(FlopsModel::fit(&[(1.0, 2.0)]), Err(Error::TooFewSamples { needed: 2, got: 1 }));
        assert_eq!(FlopsModel::fit(&[(5.0, 2.0), (5.0, 3.0)]), Err(Error::DegenerateDesign));
    }

    #[test]
    fn prediction_clamps_at_zero() {
        let f = FlopsModel::fit(&[(100.0, 1.0), (200.0, 3.0)]).unwrap();
        assert_eq!(f.predict_flops(0.0), 0.0);
    }

    proptest! {
        #[test]
        fn ols_is_locally_optimal(pts in proptest::collection::vec((1.0f64..1e6, 0.0f64..100.0), 2..30)) {
            prop_assume!(pts.iter().any(|p| (p.0 - pts[0].0).abs() > 1.0));
            let f = FlopsModel::fit(&pts).unwrap();
            let base = f.squared_error();
            for (ds, di) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                let e = sse(f.slope + ds, f.intercept + di, &pts);
                prop_assert!(e >= base * (1.0 - 1e-12) - 1e-12);
            }
        }

        #[test]
        fn flops_monotone_in_width(block in 0usize..5, extra in 1u32..64) {
            let m = fixtures::five_layer_cnn();
            let mut wider = m.clone();
            if block < 4 {
                let w = wider.blocks[block].out_channels + extra;
                wider.set_boundary_width(block, w);
            } else {
                wider.blocks[4].out_channels += extra;
            }
            prop_assert!(count_flops(&wider) >= count_flops(&m));
        }
    }
}
