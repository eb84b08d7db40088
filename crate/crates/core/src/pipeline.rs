//! End-to-end estimation: preprocess, validate, build, initialize, solve.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ProblemConfig;
use crate::error::{arg_err, Error, Result};
use crate::eval::Estimate;
use crate::motion_prior::StateKnot;
use crate::range_model::{preprocess, RangeMeasurement};
use crate::solver::fls::fls_trajectory;
use crate::solver::{
    build_graph, covariances, initialize, optimize, run_fls, FlsEstimate, InitReport,
    OptimizeReport,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    #[default]
    Batch,
    Fls,
}

impl std::str::FromStr for EstimationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(EstimationMode::Batch),
            "fls" => Ok(EstimationMode::Fls),
            other => Err(arg_err(format!("unknown mode {other:?} (batch | fls)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub mode: EstimationMode,
    /// Batch: every knot with its marginal covariance. Fixed-lag: the newest
    /// knot after each measurement (the filtered stream).
    pub estimates: Vec<Estimate>,
    /// Fixed-lag only: each knot as it left the window.
    pub smoothed: Vec<Estimate>,
    /// Batch only.
    pub report: Option<OptimizeReport>,
    pub init: Option<InitReport>,
    /// Measurements removed by the outlier gate.
    pub rejected: usize,
    /// Fixed-lag: out-of-order drops and window updates that hit the
    /// iteration limit.
    pub dropped: usize,
    pub unconverged: usize,
    pub runtime_seconds: f64,
}

fn to_estimates(v: Vec<FlsEstimate>) -> Vec<Estimate> {
    v.into_iter()
        .map(|e| Estimate {
            knot: e.knot,
            covariance: Some(e.covariance),
        })
        .collect()
}

/// Runs the estimator on time-ordered measurements.
pub fn estimate(
    measurements: &[RangeMeasurement],
    config: &ProblemConfig,
    mode: EstimationMode,
) -> Result<EstimateOutput> {
    let start = Instant::now();
    config.validate()?;
    let clean = preprocess(
        measurements,
        config.preprocess.calibration.as_ref(),
        &config.preprocess.outliers,
    )?;
    let rejected = measurements.len() - clean.len();
    if rejected > 0 {
        log::info!(
            "outlier gate removed {rejected} of {} measurements",
            measurements.len()
        );
    }
    match mode {
        EstimationMode::Fls => {
            let run = run_fls(&clean, config)?;
            Ok(EstimateOutput {
                mode,
                estimates: to_estimates(run.filtered),
                smoothed: to_estimates(run.smoothed),
                report: None,
                init: None,
                rejected,
                dropped: run.dropped,
                unconverged: run.unconverged,
                runtime_seconds: start.elapsed().as_secs_f64(),
            })
        }
        EstimationMode::Batch => {
            let graph = build_graph(&clean, config)?;
            let (mut initial, init) = initialize(&graph, config)?;
            if config.solver.warm_start {
                initial = align_warm_start(&initial, &fls_trajectory(&clean, config)?);
            }
            let (x, report) = optimize(&graph, &initial, &config.solver)?;
            log::info!(
                "batch solve: {:?} after {} iterations, final cost {:.3e}",
                report.status,
                report.iterations,
                report.final_cost
            );
            if let crate::solver::OptimizeStatus::NumericalFailure = report.status {
                return Err(Error::Numerical(
                    report
                        .message
                        .clone()
                        .unwrap_or_else(|| "solver failed".into()),
                ));
            }
            let cov = covariances(&graph, &x)?;
            let estimates = x
                .into_iter()
                .zip(cov.diag)
                .map(|(knot, c)| Estimate {
                    knot,
                    covariance: Some(c),
                })
                .collect();
            Ok(EstimateOutput {
                mode,
                estimates,
                smoothed: Vec::new(),
                report: Some(report),
                init: Some(init),
                rejected,
                dropped: 0,
                unconverged: 0,
                runtime_seconds: start.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Replaces each initial knot by the fixed-lag estimate at the same time;
/// knots the smoother never saw keep their static initialization.
fn align_warm_start(initial: &[StateKnot], smoothed: &[StateKnot]) -> Vec<StateKnot> {
    let mut j = 0;
    initial
        .iter()
        .map(|k| {
            while j < smoothed.len() && smoothed[j].time < k.time - 1e-9 {
                j += 1;
            }
            match smoothed.get(j) {
                Some(s) if (s.time - k.time).abs() <= 1e-9 => {
                    let mut w = s.clone();
                    w.time = k.time;
                    w
                }
                _ => k.clone(),
            }
        })
        .collect()
}
