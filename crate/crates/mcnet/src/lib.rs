//! Point-cloud semantic segmentation at desk scale.
//!
//! The pipeline: class-aware weighted patch sampling, a multilateral
//! cascading attention encoder over dual position/color streams, a
//! cross-stage-partial decoder, two prediction heads refined by
//! neighborhood voting, and confusion-matrix evaluation — all on top of a
//! small reverse-mode tensor tape and an exact uniform-grid KNN index.
//!
//! Per-point kernels are data-parallel (rayon, `parallel` feature, on by
//! default) with a sequential fallback that produces bitwise-identical
//! results.

pub mod cloud;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod voting;

pub use error::{Error, Result};
