//! Continuous-time range-only pose estimation.
//!
//! Full SE(2)/SE(3) trajectories are recovered from asynchronous
//! point-to-point range measurements alone. A white-noise-on-acceleration
//! Gaussian-process prior links consecutive state knots, each range is a
//! unary factor on the knot at its timestamp, and the resulting sparse
//! least-squares problem is solved in batch or with a fixed-lag smoother.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod lie;
pub mod motion_prior;
pub mod pipeline;
pub mod range_model;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use eval::{evaluate, Alignment, Estimate, EvaluationReport};
pub use lie::{Dim, Pose, Rotation, Tangent};
pub use pipeline::{estimate, EstimateOutput, EstimationMode};
