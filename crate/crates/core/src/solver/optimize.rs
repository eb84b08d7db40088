use nalgebra::DVector;
use serde::Serialize;

use super::graph::FactorGraph;
use crate::config::SolverSettings;
use crate::error::{Error, Result};
use crate::motion_prior::StateKnot;

/// Lower bound on the diagonal used to scale LM damping, so directions with
/// no curvature still receive some.
const DAMPING_FLOOR: f64 = 1e-6;
const MIN_DAMPING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeStatus {
    Converged,
    MaxIterations,
    /// No cost-decreasing step exists up to the maximum damping.
    NotConverged,
    NumericalFailure,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeReport {
    pub status: OptimizeStatus,
    pub iterations: usize,
    /// Cost before the first iteration and after every accepted step.
    pub costs: Vec<f64>,
    pub final_cost: f64,
    pub damping: f64,
    pub message: Option<String>,
}

impl OptimizeReport {
    pub fn converged(&self) -> bool {
        self.status == OptimizeStatus::Converged
    }
}

/// Applies `T ← T·exp(δξ^)`, `ϖ ← ϖ + δϖ` knot by knot.
pub fn retract(estimates: &[StateKnot], step: &[DVector<f64>]) -> Vec<StateKnot> {
    estimates
        .iter()
        .zip(step)
        .map(|(k, d)| k.perturbed(d))
        .collect()
}

/// Levenberg–Marquardt on the graph objective. The cost sequence in the
/// report is non-increasing.
pub fn optimize(
    graph: &FactorGraph,
    initial: &[StateKnot],
    settings: &SolverSettings,
) -> Result<(Vec<StateKnot>, OptimizeReport)> {
    optimize_with_limit(graph, initial, settings, settings.max_iterations)
}

pub(crate) fn optimize_with_limit(
    graph: &FactorGraph,
    initial: &[StateKnot],
    settings: &SolverSettings,
    max_iterations: usize,
) -> Result<(Vec<StateKnot>, OptimizeReport)> {
    graph.check_estimates(initial)?;
    let mut x = initial.to_vec();
    let mut cost = graph.cost(&x)?;
    let mut report = OptimizeReport {
        status: OptimizeStatus::MaxIterations,
        iterations: 0,
        costs: vec![cost],
        final_cost: cost,
        damping: settings.initial_damping,
        message: None,
    };
    if !cost.is_finite() {
        report.status = OptimizeStatus::NumericalFailure;
        report.message = Some("initial cost is not finite".into());
        return Ok((x, report));
    }
    let mut lambda = settings.initial_damping;

    'outer: for iter in 0..max_iterations {
        report.iterations = iter + 1;
        let sys = match graph.linearize(&x) {
            Ok(s) => s,
            Err(Error::Argument(m)) => {
                report.status = OptimizeStatus::NumericalFailure;
                report.message = Some(m);
                break;
            }
            Err(e) => return Err(e),
        };
        loop {
            let damped = sys.matrix.damped(lambda, DAMPING_FLOOR);
            let step = match damped.cholesky() {
                Ok(chol) => chol.solve(&sys.rhs),
                Err(_) => {
                    lambda *= settings.damping_scale;
                    if lambda > settings.max_damping {
                        report.status = OptimizeStatus::NumericalFailure;
                        report.message =
                            Some("normal equations are indefinite at every damping level".into());
                        break 'outer;
                    }
                    continue;
                }
            };
            let step_norm = step.iter().map(|s| s.amax()).fold(0.0, f64::max);
            if !step_norm.is_finite() {
                report.status = OptimizeStatus::NumericalFailure;
                report.message = Some("non-finite step".into());
                break 'outer;
            }
            let candidate = retract(&x, &step);
            // An invalid trial state (e.g. knot twist blowing up) counts as a rejected step.
            let new_cost = graph.cost(&candidate).unwrap_or(f64::INFINITY);
            if new_cost.is_finite() && new_cost <= cost {
                let decrease = cost - new_cost;
                x = candidate;
                let prev = cost;
                cost = new_cost;
                report.costs.push(cost);
                lambda = (lambda / settings.damping_scale).max(MIN_DAMPING);
                log::debug!(
                    "iteration {}: cost {cost:.6e}, step {step_norm:.3e}, λ {lambda:.1e}",
                    iter + 1
                );
                if step_norm < settings.step_tolerance || decrease <= settings.cost_tolerance * prev
                {
                    report.status = OptimizeStatus::Converged;
                    break 'outer;
                }
                break;
            }
            if step_norm < settings.step_tolerance {
                // Rounding noise around the optimum.
                report.status = OptimizeStatus::Converged;
                break 'outer;
            }
            lambda *= settings.damping_scale;
            if lambda > settings.max_damping {
                report.status = OptimizeStatus::NotConverged;
                report.message = Some("no cost-decreasing step at maximum damping".into());
                break 'outer;
            }
        }
    }
    report.final_cost = cost;
    report.damping = lambda;
    Ok((x, report))
}
