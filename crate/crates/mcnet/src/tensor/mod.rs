//! Minimal reverse-mode differentiable array engine.
//!
//! Provides exactly the operations the segmentation network's forward and
//! backward passes need, on 64-bit floats, with a single-writer tape per
//! training step.

mod array;
mod nn;
mod tape;

pub use array::NDArray;
pub use nn::{
    cbl, cbl_no_activation, residual_block, sgd_step, CBLBound, CBLParams, ResidualBound,
    ResidualParams, BN_EPS, BN_MOMENTUM, DEFAULT_LEAKY_SLOPE,
};
pub use tape::{BatchStats, GradientMap, Tape, ValueId};
