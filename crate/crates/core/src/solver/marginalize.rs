use super::graph::{FactorGraph, FirstKnotPrior, MarginalPrior};
use super::linalg::schur_eliminate;
use crate::error::Result;
use crate::motion_prior::StateKnot;

/// Folds the first knot into a dense prior on the second.
///
/// Only the factors touching the first knot (its prior, its ranges and the
/// motion prior to the second knot) are linearized at the current estimates;
/// the Schur complement onto the second knot becomes its new first-knot
/// prior, with the linearization point frozen at the current estimate.
pub(crate) fn eliminate_first(
    graph: &FactorGraph,
    estimates: &[StateKnot],
) -> Result<MarginalPrior> {
    let times = graph.times()[..2].to_vec();
    let mut pair = FactorGraph::new(
        graph.dim(),
        times,
        vec![graph.ranges(0).to_vec(), Vec::new()],
        graph.prior_params().clone(),
        graph.first_prior.clone(),
    )?;
    pair.robust = graph.robust;
    let sys = pair.linearize(&estimates[..2])?;
    let (information, info_vector) = schur_eliminate(
        &sys.matrix.diag[0],
        &sys.matrix.upper[0],
        &sys.matrix.diag[1],
        &sys.rhs[0],
        &sys.rhs[1],
    )?;
    Ok(MarginalPrior {
        mean: estimates[1].clone(),
        information,
        info_vector,
    })
}

/// Eliminates every knot older than `horizon` (always keeping the newest),
/// returning the reduced graph and the retained estimates. A no-op when no
/// knot is old enough.
pub fn marginalize(
    graph: &FactorGraph,
    estimates: &[StateKnot],
    horizon: f64,
) -> Result<(FactorGraph, Vec<StateKnot>)> {
    graph.check_estimates(estimates)?;
    let count = graph
        .times()
        .iter()
        .take(graph.len() - 1)
        .take_while(|&&t| t < horizon)
        .count();
    let mut g = graph.clone();
    let mut x = estimates.to_vec();
    for _ in 0..count {
        let prior = eliminate_first(&g, &x)?;
        g.drop_front(1, FirstKnotPrior::Gaussian(prior));
        x.remove(0);
    }
    Ok((g, x))
}
