//! Accuracy and consistency metrics of an estimate stream against ground truth.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{arg_err, Error, Result};
use crate::lie::Tangent;
use crate::motion_prior::{StateKnot, Twist};

/// Truth samples farther than this from an estimate timestamp are not used.
pub const TIME_TOLERANCE: f64 = 0.005;
/// Fewer overlapping samples than this make a report meaningless.
pub const MIN_SAMPLES: usize = 10;

/// One knot estimate, optionally with the covariance of its perturbation
/// `[δξ; δϖ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub knot: StateKnot,
    pub covariance: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Nearest truth sample within [`TIME_TOLERANCE`].
    #[default]
    None,
    /// Geodesic interpolation between the bracketing truth samples.
    TimeInterpolated,
}

impl std::str::FromStr for Alignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Alignment::None),
            "time-interpolated" => Ok(Alignment::TimeInterpolated),
            other => Err(arg_err(format!(
                "unknown alignment {other:?} (none | time-interpolated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub samples: usize,
    pub position_rmse: f64,
    pub orientation_rmse: f64,
    pub times: Vec<f64>,
    /// World-frame `p̂ − p` per sample.
    pub position_errors: Vec<Vec<f64>>,
    /// Geodesic angle `‖log(Rᵀ·R̂)‖` per sample.
    pub orientation_errors: Vec<f64>,
    /// Body-frame pose error `log(T̂⁻¹·T)` per sample, the quantity the
    /// covariance describes.
    pub pose_errors: Vec<Vec<f64>>,
    /// `3σ` of each pose axis, where covariances are available.
    pub pose_3sigma: Option<Vec<Vec<f64>>>,
    /// Fraction of samples inside `±3σ`, per pose axis.
    pub axis_coverage: Option<Vec<f64>>,
    /// Fraction over all samples and axes.
    pub coverage: Option<f64>,
    /// Normalized estimation error squared of the full state per sample.
    pub nees: Option<Vec<f64>>,
    pub runtime_seconds: Option<f64>,
}

/// `sqrt(mean(x²))`.
pub fn rmse(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

/// Truth state at `t` under `alignment`, or `None` outside the tolerance.
pub fn truth_at(truth: &[StateKnot], t: f64, alignment: Alignment) -> Option<StateKnot> {
    let i = truth.partition_point(|k| k.time < t);
    let nearest = [i.checked_sub(1), (i < truth.len()).then_some(i)]
        .into_iter()
        .flatten()
        .min_by(|&a, &b| {
            (truth[a].time - t)
                .abs()
                .total_cmp(&(truth[b].time - t).abs())
        })?;
    if (truth[nearest].time - t).abs() > TIME_TOLERANCE {
        return None;
    }
    if alignment == Alignment::None || truth[nearest].time == t || i == 0 || i == truth.len() {
        let mut k = truth[nearest].clone();
        k.time = t;
        return Some(k);
    }
    let (a, b) = (&truth[i - 1], &truth[i]);
    let s = (t - a.time) / (b.time - a.time);
    let xi = a.pose.between(&b.pose).log().scaled(s);
    let twist = a.twist.vector() * (1.0 - s) + b.twist.vector() * s;
    Some(StateKnot {
        time: t,
        pose: a.pose.retract(&xi),
        twist: Twist::with_bound(twist, f64::INFINITY).ok()?,
    })
}

/// Compares estimates with truth samples (sorted by time).
pub fn evaluate(
    estimates: &[Estimate],
    truth: &[StateKnot],
    alignment: Alignment,
) -> Result<EvaluationReport> {
    if truth.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(arg_err("truth samples must be sorted by time"));
    }
    let mut pairs = Vec::with_capacity(estimates.len());
    for e in estimates {
        if let Some(t) = truth_at(truth, e.knot.time, alignment) {
            if t.dim() != e.knot.dim() {
                return Err(arg_err("estimate and truth dimensions disagree"));
            }
            pairs.push((e, t));
        }
    }
    if pairs.len() < MIN_SAMPLES {
        return Err(arg_err(format!(
            "only {} estimates overlap the truth (need at least {MIN_SAMPLES})",
            pairs.len()
        )));
    }
    let d = pairs[0].1.dim().dof();
    let with_cov = pairs.iter().all(|(e, _)| e.covariance.is_some());

    let mut report = EvaluationReport {
        samples: pairs.len(),
        position_rmse: 0.0,
        orientation_rmse: 0.0,
        times: Vec::with_capacity(pairs.len()),
        position_errors: Vec::with_capacity(pairs.len()),
        orientation_errors: Vec::with_capacity(pairs.len()),
        pose_errors: Vec::with_capacity(pairs.len()),
        pose_3sigma: with_cov.then(Vec::new),
        axis_coverage: None,
        coverage: None,
        nees: with_cov.then(Vec::new),
        runtime_seconds: None,
    };
    let mut inside = vec![0usize; d];
    for (e, t) in &pairs {
        report.times.push(t.time);
        let dp = e.knot.pose.position() - t.pose.position();
        report.position_errors.push(dp.iter().copied().collect());
        report.orientation_errors.push(
            t.pose
                .rotation()
                .inverse()
                .compose(e.knot.pose.rotation())
                .angle(),
        );
        let diff = e.knot.difference(t);
        let xi: Vec<f64> = diff.rows(0, d).iter().copied().collect();
        if let Some(p) = &e.covariance {
            if p.nrows() != 2 * d || p.ncols() != 2 * d {
                return Err(arg_err(format!(
                    "covariance at t={} is not {}x{}",
                    t.time,
                    2 * d,
                    2 * d
                )));
            }
            let s3: Vec<f64> = (0..d).map(|i| 3.0 * p[(i, i)].max(0.0).sqrt()).collect();
            for i in 0..d {
                if xi[i].abs() <= s3[i] {
                    inside[i] += 1;
                }
            }
            report
                .pose_3sigma
                .as_mut()
                .expect("covariances present")
                .push(s3);
            report
                .nees
                .as_mut()
                .expect("covariances present")
                .push(nees(&diff, p));
        }
        report.pose_errors.push(xi);
    }
    report.position_rmse = rmse(
        report
            .position_errors
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()),
    );
    report.orientation_rmse = rmse(report.orientation_errors.iter().copied());
    if with_cov {
        let n = pairs.len() as f64;
        report.coverage = Some(inside.iter().sum::<usize>() as f64 / (n * d as f64));
        report.axis_coverage = Some(inside.iter().map(|&c| c as f64 / n).collect());
    }
    Ok(report)
}

/// `eᵀ·P⁻¹·e`; NaN when `P` is not positive definite.
pub fn nees(error: &DVector<f64>, covariance: &DMatrix<f64>) -> f64 {
    match covariance.clone().cholesky() {
        Some(c) => error.dot(&c.solve(error)),
        None => f64::NAN,
    }
}

/// Two-sided interval containing the mean of `runs` independent NEES values
/// of a `state_dim`-dimensional state with probability `confidence`.
pub fn nees_interval(runs: usize, state_dim: usize, confidence: f64) -> Result<(f64, f64)> {
    if runs == 0 || state_dim == 0 || !(confidence > 0.0 && confidence < 1.0) {
        return Err(arg_err(
            "NEES interval needs runs, dimension and a confidence in (0, 1)",
        ));
    }
    let chi = ChiSquared::new((runs * state_dim) as f64).map_err(|e| arg_err(e.to_string()))?;
    let alpha = (1.0 - confidence) / 2.0;
    let r = runs as f64;
    Ok((chi.inverse_cdf(alpha) / r, chi.inverse_cdf(1.0 - alpha) / r))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN for fewer than two points or constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Tangent error `log(T̂⁻¹·T)` of one pose, exposed for envelope plots.
pub fn pose_error(estimate: &StateKnot, truth: &StateKnot) -> Tangent {
    estimate.pose.between(&truth.pose).log()
}
