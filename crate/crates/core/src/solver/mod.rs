//! MAP estimation over a chain of state knots.
//!
//! Batch smoothing solves the whole trajectory at once; the fixed-lag
//! smoother keeps a sliding window and folds older knots into a dense prior
//! on the oldest retained knot by Schur complement.

pub mod covariance;
pub mod fls;
pub mod graph;
pub mod init;
pub mod linalg;
pub mod marginalize;
pub mod optimize;

pub use covariance::{covariance, covariances, rank_deficiency, Covariances};
pub use fls::{run_fls, FixedLagSmoother, FlsEstimate, FlsRun};
pub use graph::{build_graph, FactorGraph, FirstKnotPrior, LinearSystem, MarginalPrior};
pub use init::{initialize, multilaterate, InitReport};
pub use marginalize::marginalize;
pub use optimize::{optimize, retract, OptimizeReport, OptimizeStatus};
