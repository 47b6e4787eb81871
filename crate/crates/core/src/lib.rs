//! Desk-scale neural radiance field trainer with online hard sample mining.
//!
//! The training loop runs an inference-mode forward pass over the full
//! sample batch, ranks samples by the norm of the pixel-loss gradient at the
//! network's pre-activation outputs, and builds the computational graph only
//! for the hard subset. See the `trainer` module for the schedule and the
//! `hardmine` module for the batch-size estimator.

pub mod encoding;
pub mod evalbench;
pub mod field;
pub mod hardmine;
pub mod image;
pub mod io;
pub mod math;
pub mod renderer;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod trainer;
