use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::linalg::BlockTridiagonal;
use crate::config::{ProblemConfig, RobustKernel};
use crate::error::{arg_err, config_err, Error, Result};
use crate::lie::{right_jacobian_inv, Dim, Tangent};
use crate::motion_prior::{prior_cost, prior_factor, PriorParams, StateKnot};
use crate::range_model::{RangeFactor, RangeMeasurement};

/// Dense Gaussian prior on one knot's perturbation about a frozen
/// linearization point: `½·δᵀ·H·δ − gᵀ·δ` with `δ = mean ⊟ x`.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    pub mean: StateKnot,
    pub information: DMatrix<f64>,
    pub info_vector: DVector<f64>,
}

impl MarginalPrior {
    pub fn from_covariance(mean: StateKnot, covariance: &DMatrix<f64>) -> Result<Self> {
        let s = mean.dim().state_dim();
        if covariance.shape() != (s, s) {
            return Err(config_err(format!("prior covariance must be {s}x{s}")));
        }
        let information = covariance
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("prior covariance is singular".into()))?;
        Ok(MarginalPrior {
            mean,
            information,
            info_vector: DVector::zeros(s),
        })
    }

    fn offset(&self, knot: &StateKnot) -> DVector<f64> {
        self.mean.difference(knot)
    }

    pub fn cost(&self, knot: &StateKnot) -> f64 {
        let d = self.offset(knot);
        0.5 * d.dot(&(&self.information * &d)) - self.info_vector.dot(&d)
    }

    /// Normal-equation contribution `(MᵀHM, Mᵀ(g − Hδ))` at `knot`.
    pub fn linearize(&self, knot: &StateKnot) -> (DMatrix<f64>, DVector<f64>) {
        let d = knot.dim().dof();
        let delta = self.offset(knot);
        let mut m = DMatrix::identity(2 * d, 2 * d);
        let xi = Tangent::new(delta.rows(0, d).into_owned()).expect("pose offset size");
        m.view_mut((0, 0), (d, d))
            .copy_from(&right_jacobian_inv(&xi));
        let a = m.transpose() * (&self.information * &m);
        let b = m.tr_mul(&(&self.info_vector - &self.information * &delta));
        (a, b)
    }
}

/// Prior attached to the first knot of a graph.
#[derive(Debug, Clone)]
pub enum FirstKnotPrior {
    /// Isotropic `σ`-wide prior centred on the current estimate; it only
    /// regularizes otherwise unconstrained directions.
    Gauge {
        sigma: f64,
    },
    Gaussian(MarginalPrior),
}

/// Linearized normal equations `A·δ = b` of a graph at some estimate.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: BlockTridiagonal,
    pub rhs: Vec<DVector<f64>>,
    pub cost: f64,
}

/// Chain of knots linked by motion-prior factors, with range factors on the
/// knot nearest their timestamp.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    dim: Dim,
    times: Vec<f64>,
    ranges: Vec<Vec<RangeFactor>>,
    prior: PriorParams,
    pub first_prior: FirstKnotPrior,
    pub robust: RobustKernel,
}

impl FactorGraph {
    pub fn new(
        dim: Dim,
        times: Vec<f64>,
        ranges: Vec<Vec<RangeFactor>>,
        prior: PriorParams,
        first_prior: FirstKnotPrior,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(arg_err("a graph needs at least one knot"));
        }
        if times.len() != ranges.len() {
            return Err(arg_err("one range-factor list per knot is required"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(arg_err("knot times must be strictly increasing"));
        }
        if prior.dim() != dim {
            return Err(config_err("prior dimension disagrees with graph"));
        }
        Ok(FactorGraph {
            dim,
            times,
            ranges,
            prior,
            first_prior,
            robust: RobustKernel::None,
        })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn ranges(&self, knot: usize) -> &[RangeFactor] {
        &self.ranges[knot]
    }

    pub fn prior_params(&self) -> &PriorParams {
        &self.prior
    }

    pub fn prior_factor_count(&self) -> usize {
        self.times.len() - 1
    }

    pub fn range_factor_count(&self) -> usize {
        self.ranges.iter().map(Vec::len).sum()
    }

    /// Every consecutive pair is linked by exactly one prior factor, so the
    /// chain is connected whenever knot times are strictly ordered.
    pub fn is_connected(&self) -> bool {
        !self.times.is_empty() && self.times.windows(2).all(|w| w[1] > w[0])
    }

    /// Measurements in knot order.
    pub fn measurements(&self) -> impl Iterator<Item = &RangeMeasurement> {
        self.ranges.iter().flatten().map(|f| &f.measurement)
    }

    pub(crate) fn push_knot(&mut self, time: f64) -> Result<()> {
        let last = *self.times.last().expect("nonempty graph");
        if !(time > last) {
            return Err(arg_err(format!("knot time {time} does not follow {last}")));
        }
        self.times.push(time);
        self.ranges.push(Vec::new());
        Ok(())
    }

    pub(crate) fn add_range(&mut self, knot: usize, factor: RangeFactor) {
        self.ranges[knot].push(factor);
    }

    /// Drops the first `count` knots and their factors.
    pub(crate) fn drop_front(&mut self, count: usize, first_prior: FirstKnotPrior) {
        self.times.drain(..count);
        self.ranges.drain(..count);
        self.first_prior = first_prior;
    }

    pub fn check_estimates(&self, estimates: &[StateKnot]) -> Result<()> {
        if estimates.len() != self.times.len() {
            return Err(arg_err(format!(
                "{} estimates for {} knots",
                estimates.len(),
                self.times.len()
            )));
        }
        for (k, t) in estimates.iter().zip(&self.times) {
            if k.dim() != self.dim {
                return Err(config_err("estimate dimension disagrees with graph"));
            }
            if (k.time - t).abs() > 1e-12 {
                return Err(arg_err(format!(
                    "estimate at {} does not match knot at {t}",
                    k.time
                )));
            }
        }
        Ok(())
    }

    fn robust_cost_and_weight(&self, whitened: f64) -> (f64, f64) {
        match self.robust {
            RobustKernel::None => (0.5 * whitened * whitened, 1.0),
            RobustKernel::Huber { width } => {
                let a = whitened.abs();
                if a <= width {
                    (0.5 * a * a, 1.0)
                } else {
                    (width * a - 0.5 * width * width, width / a)
                }
            }
        }
    }

    fn range_cost(&self, knot: usize, est: &StateKnot) -> f64 {
        self.ranges[knot]
            .iter()
            .map(|f| self.robust_cost_and_weight(f.whitened_error(&est.pose)).0)
            .sum()
    }

    /// Total objective: range and prior terms plus the first-knot prior.
    pub fn cost(&self, estimates: &[StateKnot]) -> Result<f64> {
        self.check_estimates(estimates)?;
        let n = self.len();
        let range: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| self.range_cost(i, &estimates[i]))
            .collect();
        let prior: Vec<Result<f64>> = (0..n.saturating_sub(1))
            .into_par_iter()
            .map(|i| prior_cost(&estimates[i], &estimates[i + 1], &self.prior))
            .collect();
        let mut total = 0.0;
        for c in range {
            total += c;
        }
        for c in prior {
            total += c?;
        }
        if let FirstKnotPrior::Gaussian(p) = &self.first_prior {
            total += p.cost(&estimates[0]);
        }
        Ok(total)
    }

    /// Gauss–Newton normal equations at `estimates`.
    pub fn linearize(&self, estimates: &[StateKnot]) -> Result<LinearSystem> {
        self.check_estimates(estimates)?;
        let n = self.len();
        let d = self.dim.dof();
        let s = 2 * d;

        let unary: Vec<(DMatrix<f64>, DVector<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut a = DMatrix::zeros(d, d);
                let mut b = DVector::zeros(d);
                let mut cost = 0.0;
                for f in &self.ranges[i] {
                    let (e, j) = f.linearize(&estimates[i].pose);
                    let sigma = f.measurement.sigma();
                    let (c, w) = self.robust_cost_and_weight(e / sigma);
                    let w = w / (sigma * sigma);
                    a.ger(w, &j, &j, 1.0);
                    b.axpy(-w * e, &j, 1.0);
                    cost += c;
                }
                (a, b, cost)
            })
            .collect();
        let binary: Vec<Result<_>> = (0..n.saturating_sub(1))
            .into_par_iter()
            .map(|i| {
                let pf = prior_factor(&estimates[i], &estimates[i + 1], &self.prior)?;
                let wp = &pf.information * &pf.jac_prev;
                let wn = &pf.information * &pf.jac_next;
                let we = &pf.information * &pf.error;
                Ok((
                    pf.jac_prev.transpose() * &wp,
                    pf.jac_prev.transpose() * &wn,
                    pf.jac_next.transpose() * &wn,
                    -pf.jac_prev.tr_mul(&we),
                    -pf.jac_next.tr_mul(&we),
                    pf.cost(),
                ))
            })
            .collect();

        let mut matrix = BlockTridiagonal::zeros(n, s);
        let mut rhs = vec![DVector::zeros(s); n];
        let mut cost = 0.0;
        for (i, (a, b, c)) in unary.into_iter().enumerate() {
            let mut block = matrix.diag[i].view_mut((0, 0), (d, d));
            block += a;
            let mut r = rhs[i].rows_mut(0, d);
            r += b;
            cost += c;
        }
        for (i, item) in binary.into_iter().enumerate() {
            let (a00, a01, a11, b0, b1, c) = item?;
            matrix.diag[i] += a00;
            matrix.upper[i] += a01;
            matrix.diag[i + 1] += a11;
            rhs[i] += b0;
            rhs[i + 1] += b1;
            cost += c;
        }
        match &self.first_prior {
            FirstKnotPrior::Gauge { sigma } => {
                for k in 0..s {
                    matrix.diag[0][(k, k)] += 1.0 / (sigma * sigma);
                }
            }
            FirstKnotPrior::Gaussian(p) => {
                let (a, b) = p.linearize(&estimates[0]);
                matrix.diag[0] += a;
                rhs[0] += b;
                cost += p.cost(&estimates[0]);
            }
        }
        Ok(LinearSystem { matrix, rhs, cost })
    }
}

/// Grid knots strictly between `a` and `b`, at multiples of `gap`, keeping
/// clear of both ends by more than `tol`.
pub(crate) fn filler_times(a: f64, b: f64, gap: f64, tol: f64) -> Vec<f64> {
    if b - a <= gap {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut k = (a / gap).floor() as i64 + 1;
    loop {
        let t = k as f64 * gap;
        if t >= b - tol {
            break;
        }
        if t > a + tol {
            out.push(t);
        }
        k += 1;
    }
    out
}

/// One knot per distinct measurement time (merging within the tolerance),
/// plus grid knots inside long gaps; each range becomes a unary factor.
pub fn build_graph(
    measurements: &[RangeMeasurement],
    config: &ProblemConfig,
) -> Result<FactorGraph> {
    if measurements.is_empty() {
        return Err(arg_err("no measurements to build a graph from"));
    }
    let settings = &config.solver;
    let tol = settings.knot_merge_tolerance;
    let mut times: Vec<f64> = Vec::new();
    let mut ranges: Vec<Vec<RangeFactor>> = Vec::new();
    let mut group_start = f64::NEG_INFINITY;
    for m in measurements {
        m.validate()?;
        let factor = RangeFactor::new(m.clone(), &config.anchors, &config.sensors)?;
        if let Some(&last) = times.last() {
            if m.time < last {
                return Err(arg_err("measurements must be sorted by time"));
            }
            if m.time - group_start <= tol {
                ranges.last_mut().expect("open knot").push(factor);
                continue;
            }
            if let Some(gap) = settings.max_knot_gap {
                for t in filler_times(last, m.time, gap, tol) {
                    times.push(t);
                    ranges.push(Vec::new());
                }
            }
        }
        group_start = m.time;
        times.push(m.time);
        ranges.push(vec![factor]);
    }
    let mut g = FactorGraph::new(
        config.dim,
        times,
        ranges,
        config.prior.clone(),
        FirstKnotPrior::Gauge {
            sigma: settings.gauge_sigma,
        },
    )?;
    g.robust = settings.robust_kernel;
    Ok(g)
}
