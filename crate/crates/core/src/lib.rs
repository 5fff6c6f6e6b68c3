//! Layer-wise training-energy modelling.
//!
//! A model is split into input, hidden and output blocks. Small variant
//! networks isolate each block population on a measurement backend, layer
//! costs are recovered by subtracting already-fitted neighbours, and a
//! Gaussian process per [`LayerKey`](model::LayerKey) is fitted over channel
//! widths with maximum-variance guided sampling. Whole-model estimates are the
//! sum of per-block posterior means.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]

extern crate alloc;

pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod fixtures;
pub mod flops;
pub mod gp;
pub mod kernel;
pub mod measurement;
pub mod model;
pub mod profiler;
pub mod pruning;

pub use error::{Error, Result};
pub use estimator::{estimate, EstimateReport, SurfaceSet};
pub use gp::{fit, FitOptions, GpSurface, SurfaceParams};
pub use kernel::{KernelFamily, KernelSpec};
pub use measurement::{integrate_trace, measure, EnergyBackend, EnergySample, PowerTrace, SimDevice, SimDeviceConfig};
pub use model::{dedup_keys, Axis, Bounds, Coord, LayerKey, ModelDocument, ModelSpec, Role};
pub use profiler::{run_profiling, ProfileDb, ProfilePlan};
