use nalgebra::{DMatrix, DVector};

use super::graph::{FactorGraph, FirstKnotPrior, MarginalPrior};
use super::linalg::BlockTridiagonal;
use crate::error::{arg_err, Error, Result};
use crate::motion_prior::StateKnot;

/// Diagonal blocks (per-knot covariances) and first off-diagonal blocks
/// (covariances between consecutive knots) of the posterior.
pub type Covariances = BlockTridiagonal;

/// Eigenvalue threshold of the probe below; a direction the data does not
/// inform keeps exactly the unit prior variance.
const PROBE_TOLERANCE: f64 = 1e-6;

/// Number of first-knot directions that no factor other than the first-knot
/// prior constrains.
///
/// The gauge prior is swapped for a unit-information prior and the marginal
/// covariance of the first knot is examined: eigenvalues that stay at one
/// belong to unobservable directions. The Gauss–Newton information along a
/// cost symmetry is proportional to the residuals, so the count is exact at
/// zero-residual estimates and a lower bound otherwise.
pub fn rank_deficiency(graph: &FactorGraph, estimates: &[StateKnot]) -> Result<usize> {
    graph.check_estimates(estimates)?;
    let s = graph.dim().state_dim();
    let mut probe = graph.clone();
    probe.first_prior = FirstKnotPrior::Gaussian(MarginalPrior {
        mean: estimates[0].clone(),
        information: DMatrix::identity(s, s),
        info_vector: DVector::zeros(s),
    });
    let sys = probe.linearize(estimates)?;
    let sigma0 = sys
        .matrix
        .cholesky()?
        .selected_inverse()
        .diag
        .swap_remove(0);
    let eig = sigma0.symmetric_eigen().eigenvalues;
    Ok(eig.iter().filter(|&&e| e >= 1.0 - PROBE_TOLERANCE).count())
}

/// Posterior covariance blocks of every knot from the Gauss–Newton
/// information at `estimates`, computed by sparse selected inversion.
///
/// With a gauge prior on the first knot, unobservable directions are reported
/// as [`Error::Unobservable`] instead of returning gauge-sized variances.
pub fn covariances(graph: &FactorGraph, estimates: &[StateKnot]) -> Result<Covariances> {
    if let FirstKnotPrior::Gauge { .. } = graph.first_prior {
        let null_dim = rank_deficiency(graph, estimates)?;
        if null_dim > 0 {
            return Err(Error::Unobservable { null_dim });
        }
    }
    let sys = graph.linearize(estimates)?;
    let chol = sys.matrix.cholesky().map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("information matrix is singular: {m}")),
        other => other,
    })?;
    Ok(chol.selected_inverse())
}

/// Covariance blocks of the requested knots.
pub fn covariance(
    graph: &FactorGraph,
    estimates: &[StateKnot],
    knots: &[usize],
) -> Result<Vec<DMatrix<f64>>> {
    if let Some(&bad) = knots.iter().find(|&&k| k >= graph.len()) {
        return Err(arg_err(format!("knot index {bad} out of range")));
    }
    let all = covariances(graph, estimates)?;
    Ok(knots.iter().map(|&k| all.diag[k].clone()).collect())
}
