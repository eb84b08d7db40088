use nalgebra::{DMatrix, DVector};

use super::graph::{filler_times, FactorGraph, FirstKnotPrior, MarginalPrior};
use super::init::initial_position;
use super::marginalize::eliminate_first;
use super::optimize::{optimize_with_limit, OptimizeStatus};
use crate::config::ProblemConfig;
use crate::error::{arg_err, Error, Result};
use crate::lie::{Pose, Rotation, Tangent};
use crate::motion_prior::{prior_factor, process_noise, StateKnot, Twist};
use crate::range_model::{RangeFactor, RangeMeasurement};

/// Measurements older than the newest knot by more than this are dropped.
pub const OUT_OF_ORDER_TOLERANCE: f64 = 0.01;

/// A knot estimate with the marginal covariance of its perturbation.
#[derive(Debug, Clone)]
pub struct FlsEstimate {
    pub knot: StateKnot,
    pub covariance: DMatrix<f64>,
}

/// Output of a fixed-lag pass.
#[derive(Debug, Clone, Default)]
pub struct FlsRun {
    /// Newest-knot estimate after every processed measurement.
    pub filtered: Vec<FlsEstimate>,
    /// Every knot's estimate at the moment it left the window (the final
    /// window is flushed at the end).
    pub smoothed: Vec<FlsEstimate>,
    /// Measurements dropped as out of order.
    pub dropped: usize,
    /// Updates whose window optimization did not converge.
    pub unconverged: usize,
}

/// Sliding-window smoother that marginalizes knots older than `δt_fls`.
#[derive(Debug, Clone)]
pub struct FixedLagSmoother {
    config: ProblemConfig,
    graph: Option<FactorGraph>,
    estimates: Vec<StateKnot>,
    initial: StateKnot,
    run: FlsRun,
    // Off for warm-start passes that only need the knot values.
    covariances: bool,
}

impl FixedLagSmoother {
    /// `initial` seeds the first knot; its time is replaced by the first
    /// measurement's.
    pub fn new(config: &ProblemConfig, initial: StateKnot) -> Result<Self> {
        config.solver.validate()?;
        if initial.dim() != config.dim {
            return Err(Error::Config(
                "initial knot dimension disagrees with config".into(),
            ));
        }
        Ok(FixedLagSmoother {
            config: config.clone(),
            graph: None,
            estimates: Vec::new(),
            initial,
            run: FlsRun::default(),
            covariances: true,
        })
    }

    pub fn window(&self) -> &[StateKnot] {
        &self.estimates
    }

    pub fn newest(&self) -> Option<&StateKnot> {
        self.estimates.last()
    }

    /// Adds one measurement, re-optimizes the window, marginalizes old knots
    /// and returns the newest knot estimate. Returns `None` for measurements
    /// dropped as out of order.
    pub fn push(&mut self, m: RangeMeasurement) -> Result<Option<FlsEstimate>> {
        m.validate()?;
        let factor = RangeFactor::new(m.clone(), &self.config.anchors, &self.config.sensors)?;
        let settings = self.config.solver.clone();

        let Some(graph) = self.graph.as_mut() else {
            let mut first = self.initial.clone();
            first.time = m.time;
            let mut g = FactorGraph::new(
                self.config.dim,
                vec![m.time],
                vec![vec![factor]],
                self.config.prior.clone(),
                FirstKnotPrior::Gaussian(initial_prior(&first, &settings.fls_initial_sigma)),
            )?;
            g.robust = settings.robust_kernel;
            self.graph = Some(g);
            self.estimates = vec![first];
            return self.update(m.time).map(Some);
        };

        let newest = *graph.times().last().expect("nonempty window");
        if m.time < newest - OUT_OF_ORDER_TOLERANCE {
            log::warn!(
                "dropping out-of-order measurement at t={} (window ends at {newest})",
                m.time
            );
            self.run.dropped += 1;
            return Ok(None);
        }
        if m.time <= newest + settings.knot_merge_tolerance {
            let last = graph.len() - 1;
            graph.add_range(last, factor);
        } else {
            let mut new_times = match settings.max_knot_gap {
                Some(gap) => filler_times(newest, m.time, gap, settings.knot_merge_tolerance),
                None => Vec::new(),
            };
            new_times.push(m.time);
            for t in new_times {
                let from = self.estimates.last().expect("nonempty window");
                let knot = extrapolate(from, t);
                graph.push_knot(t)?;
                self.estimates.push(knot);
            }
            let last = graph.len() - 1;
            graph.add_range(last, factor);
        }
        self.update(m.time).map(Some)
    }

    fn update(&mut self, now: f64) -> Result<FlsEstimate> {
        let settings = &self.config.solver;
        let graph = self.graph.as_mut().expect("initialized window");
        let (x, report) = optimize_with_limit(
            graph,
            &self.estimates,
            settings,
            settings.fls_max_iterations,
        )?;
        match report.status {
            OptimizeStatus::NumericalFailure => {
                return Err(Error::Numerical(format!(
                    "fixed-lag update at t={now} failed: {}",
                    report.message.unwrap_or_default()
                )))
            }
            OptimizeStatus::Converged => {}
            _ => self.run.unconverged += 1,
        }
        self.estimates = x;

        let horizon = now - settings.fls_window;
        let leaving = graph
            .times()
            .iter()
            .take(graph.len() - 1)
            .take_while(|&&t| t < horizon)
            .count();
        let chol = if self.covariances {
            Some(graph.linearize(&self.estimates)?.matrix.cholesky()?)
        } else {
            None
        };
        let newest = FlsEstimate {
            knot: self.estimates.last().expect("nonempty window").clone(),
            covariance: chol
                .as_ref()
                .map_or_else(|| DMatrix::zeros(0, 0), |c| c.last_covariance()),
        };
        if leaving > 0 {
            let sel = chol.map(|c| c.selected_inverse());
            for i in 0..leaving {
                self.run.smoothed.push(FlsEstimate {
                    knot: self.estimates[i].clone(),
                    covariance: sel
                        .as_ref()
                        .map_or_else(|| DMatrix::zeros(0, 0), |s| s.diag[i].clone()),
                });
            }
            for _ in 0..leaving {
                let prior = eliminate_first(graph, &self.estimates)?;
                graph.drop_front(1, FirstKnotPrior::Gaussian(prior));
                self.estimates.remove(0);
            }
        }
        self.run.filtered.push(newest.clone());
        Ok(newest)
    }

    /// Constant-velocity prediction of the state at `time` from the newest
    /// knot, with covariance propagated through the motion prior.
    pub fn predict(&self, time: f64) -> Result<FlsEstimate> {
        let newest = self
            .run
            .filtered
            .last()
            .ok_or_else(|| arg_err("no estimate to predict from"))?;
        if !(time > newest.knot.time) {
            return Err(arg_err(format!(
                "prediction time {time} must follow {}",
                newest.knot.time
            )));
        }
        let knot = extrapolate(&newest.knot, time);
        let pf = prior_factor(&newest.knot, &knot, &self.config.prior)?;
        // jac_prev·δ₁ + jac_next·δ₂ = w with w ~ N(0, Q)
        let jn_inv = pf
            .jac_next
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular prediction Jacobian".into()))?;
        let f = -(&jn_inv * &pf.jac_prev);
        let q = process_noise(time - newest.knot.time, &self.config.prior)?;
        let mut covariance =
            &f * &newest.covariance * f.transpose() + &jn_inv * q * jn_inv.transpose();
        super::linalg::symmetrize(&mut covariance);
        Ok(FlsEstimate { knot, covariance })
    }

    /// Flushes the remaining window into the smoothed stream.
    pub fn finish(mut self) -> Result<FlsRun> {
        let Some(graph) = &self.graph else {
            return Ok(self.run);
        };
        let blocks = if self.covariances {
            graph
                .linearize(&self.estimates)?
                .matrix
                .cholesky()?
                .selected_inverse()
                .diag
        } else {
            vec![DMatrix::zeros(0, 0); self.estimates.len()]
        };
        for (k, c) in self.estimates.iter().zip(blocks) {
            self.run.smoothed.push(FlsEstimate {
                knot: k.clone(),
                covariance: c,
            });
        }
        Ok(self.run)
    }
}

/// Independent Gaussian prior on the first window knot.
fn initial_prior(knot: &StateKnot, sigma: &[f64; 4]) -> MarginalPrior {
    let dim = knot.dim();
    let (n, r) = (dim.space(), dim.rot_dof());
    let precisions = [(n, sigma[0]), (r, sigma[1]), (n, sigma[2]), (r, sigma[3])]
        .into_iter()
        .flat_map(|(count, s)| std::iter::repeat_n(1.0 / (s * s), count));
    let information = DMatrix::from_diagonal(&DVector::from_iterator(dim.state_dim(), precisions));
    MarginalPrior {
        mean: knot.clone(),
        information,
        info_vector: DVector::zeros(dim.state_dim()),
    }
}

/// Constant-body-twist extrapolation `T·exp(Δt·ϖ)`.
fn extrapolate(from: &StateKnot, time: f64) -> StateKnot {
    let dt = time - from.time;
    let xi = Tangent::new(from.twist.vector() * dt).expect("twist size");
    StateKnot {
        time,
        pose: from.pose.retract(&xi),
        twist: from.twist.clone(),
    }
}

/// Runs the fixed-lag smoother over a time-ordered stream. The first knot is
/// seeded by static multilateration over the first `init_measurements`.
pub fn run_fls(measurements: &[RangeMeasurement], config: &ProblemConfig) -> Result<FlsRun> {
    drive(measurements, config, true)
}

/// Lag-smoothed knot values only, for initializing a batch solve.
pub(crate) fn fls_trajectory(
    measurements: &[RangeMeasurement],
    config: &ProblemConfig,
) -> Result<Vec<StateKnot>> {
    let mut config = config.clone();
    config.solver.fls_max_iterations = config.solver.warm_start_iterations;
    let run = drive(measurements, &config, false)?;
    Ok(run.smoothed.into_iter().map(|e| e.knot).collect())
}

fn drive(
    measurements: &[RangeMeasurement],
    config: &ProblemConfig,
    covariances: bool,
) -> Result<FlsRun> {
    if measurements.is_empty() {
        return Err(arg_err("no measurements"));
    }
    let n = config.solver.init_measurements.min(measurements.len());
    let (position, _) = initial_position(&measurements[..n], config);
    let initial = StateKnot::new(
        measurements[0].time,
        Pose::new(Rotation::identity(config.dim), position)?,
        Twist::zeros(config.dim),
    )?;
    let mut fls = FixedLagSmoother::new(config, initial)?;
    fls.covariances = covariances;
    for m in measurements {
        fls.push(m.clone())?;
    }
    fls.finish()
}
