//! Reference models and simulated-device oracles.
//!
//! These are the fixed benchmark inputs used by the test suites and shipped
//! with the CLI as example data.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::measurement::{Primitive, SimDeviceConfig};
use crate::model::{dedup_keys, Axis, LayerKind, ModelDocument, ModelSpec, RawLayer, Role};

fn conv(c_in: u32, c_out: u32, side: u32) -> RawLayer {
    RawLayer {
        kernel_size: Some(3),
        stride: Some(1),
        in_channels: Some(c_in),
        out_channels: Some(c_out),
        height: Some(side),
        width: Some(side),
        ..RawLayer::bare(LayerKind::Conv2d)
    }
}

fn fc(c_in: u32, c_out: u32) -> RawLayer {
    RawLayer {
        in_channels: Some(c_in),
        out_channels: Some(c_out),
        ..RawLayer::bare(LayerKind::FullyConnected)
    }
}

/// Four conv+batch-norm+max-pool groups and a classifier.
pub fn five_layer_cnn_document() -> ModelDocument {
    let mut layers = Vec::new();
    for (c_in, c_out) in [(3, 16), (16, 32), (32, 32), (32, 64)] {
        layers.push(conv(c_in, c_out, 32));
        layers.push(RawLayer::bare(LayerKind::BatchNorm));
        layers.push(RawLayer::bare(LayerKind::MaxPool));
    }
    layers.push(fc(64, 10));
    ModelDocument {
        name: "cnn5".into(),
        iterations: 500,
        batch_size: 16,
        layers,
    }
}

pub fn five_layer_cnn() -> ModelSpec {
    ModelSpec::from_document(&five_layer_cnn_document()).expect("reference model is valid")
}

/// A lone fully connected layer, which parses to an output block.
pub fn single_fc(c_in: u32, c_out: u32) -> ModelSpec {
    ModelSpec::from_document(&ModelDocument {
        name: "fc1".into(),
        iterations: 500,
        batch_size: 4,
        layers: vec![fc(c_in, c_out)],
    })
    .expect("valid")
}

/// `16 → c → 10` fully connected pair.
pub fn two_block_fc(c: u32) -> ModelSpec {
    ModelSpec::from_document(&ModelDocument {
        name: "fc2".into(),
        iterations: 500,
        batch_size: 4,
        layers: vec![fc(16, c), RawLayer::bare(LayerKind::Relu), fc(c, 10)],
    })
    .expect("valid")
}

/// Embedding, a stack of attention encoders and a classifier head.
pub fn encoder_model(layers: usize) -> ModelSpec {
    let mut raw = vec![RawLayer {
        in_channels: Some(1000),
        out_channels: Some(64),
        height: Some(32),
        width: Some(1),
        ..RawLayer::bare(LayerKind::Embedding)
    }];
    for _ in 0..layers {
        raw.push(RawLayer {
            in_channels: Some(64),
            out_channels: Some(64),
            height: Some(32),
            width: Some(1),
            ..RawLayer::bare(LayerKind::AttentionEncoder)
        });
        raw.push(RawLayer::bare(LayerKind::Dropout));
    }
    raw.push(fc(64, 2));
    ModelSpec::from_document(&ModelDocument {
        name: "encoder".into(),
        iterations: 500,
        batch_size: 8,
        layers: raw,
    })
    .expect("valid")
}

/// Assigns one primitive list per role to every key of `model`.
pub fn oracle_for(
    model: &ModelSpec,
    input: Vec<Primitive>,
    hidden: Vec<Primitive>,
    output: Vec<Primitive>,
    noise_rel: f64,
    seed: u64,
) -> SimDeviceConfig {
    let mut surfaces = BTreeMap::new();
    for (key, _) in dedup_keys(model) {
        let prims = match key.role {
            Role::Input => input.clone(),
            Role::Hidden => hidden.clone(),
            Role::Output => output.clone(),
        };
        surfaces.insert(key, prims);
    }
    SimDeviceConfig {
        surfaces,
        noise_rel,
        avg_power_w: 8.0,
        seed,
    }
}

/// Smooth oracle: every layer cost is affine in its channel widths.
pub fn affine_oracle(model: &ModelSpec, noise_rel: f64, seed: u64) -> SimDeviceConfig {
    oracle_for(
        model,
        vec![Primitive::Affine { a: 3.0, b_in: 0.0, d_out: 0.1 }],
        vec![Primitive::Affine { a: 2.0, b_in: 0.05, d_out: 0.08 }],
        vec![Primitive::Affine { a: 1.0, b_in: 0.2, d_out: 0.0 }],
        noise_rel,
        seed,
    )
}

/// Oracle with tiling steps, a mid-range ridge and a saturating plateau,
/// shapes a FLOP count cannot express.
pub fn stepped_oracle(model: &ModelSpec, noise_rel: f64, seed: u64) -> SimDeviceConfig {
    oracle_for(
        model,
        vec![
            Primitive::Affine { a: 2.0, b_in: 0.0, d_out: 0.05 },
            Primitive::TileStep { quantum: 8, cost: 0.3, axis: Axis::Out },
            Primitive::Ridge { amplitude: 1.2, center: 10.0, width: 2.5, axis: Axis::Out },
        ],
        vec![
            Primitive::Affine { a: 1.5, b_in: 0.02, d_out: 0.03 },
            Primitive::TileStep { quantum: 16, cost: 0.5, axis: Axis::Out },
            Primitive::TileStep { quantum: 8, cost: 0.2, axis: Axis::In },
            Primitive::Ridge { amplitude: 2.0, center: 20.0, width: 4.0, axis: Axis::In },
            Primitive::SoftPlateau { height: 2.0, threshold: 40.0, steepness: 0.25, axis: Axis::Out },
        ],
        vec![
            Primitive::Affine { a: 0.8, b_in: 0.03, d_out: 0.0 },
            Primitive::TileStep { quantum: 16, cost: 0.4, axis: Axis::In },
            Primitive::SoftPlateau { height: 1.5, threshold: 40.0, steepness: 0.3, axis: Axis::In },
        ],
        noise_rel,
        seed,
    )
}
