use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::graph::FactorGraph;
use crate::config::ProblemConfig;
use crate::error::{Error, Result};
use crate::lie::{Pose, Rotation};
use crate::motion_prior::{StateKnot, Twist};
use crate::range_model::{AnchorMap, RangeMeasurement, SensorConfig};

const MULTILATERATION_MAX_ITERATIONS: usize = 50;
const MULTILATERATION_STEP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct InitReport {
    pub position: Vec<f64>,
    /// Multilateration failed and the anchor centroid was used instead.
    pub fallback: bool,
    pub iterations: usize,
    pub message: Option<String>,
}

/// Static multilateration of a robot with identity orientation: Gauss–Newton
/// on the position alone, started from the anchor centroid. Returns the
/// position and the number of iterations used.
pub fn multilaterate(
    measurements: &[RangeMeasurement],
    anchors: &AnchorMap,
    sensors: &SensorConfig,
) -> Result<(DVector<f64>, usize)> {
    let n = anchors.dim().space();
    let mut distinct: Vec<_> = measurements.iter().map(|m| m.anchor_id).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() <= n {
        return Err(Error::Numerical(format!(
            "multilateration needs at least {} distinct anchors, got {}",
            n + 1,
            distinct.len()
        )));
    }
    let mut rows = Vec::with_capacity(measurements.len());
    for m in measurements {
        let a = anchors
            .get(m.anchor_id)
            .ok_or_else(|| Error::Config(format!("unknown anchor id {}", m.anchor_id)))?;
        let l = &sensors
            .get(m.sensor_id)
            .ok_or_else(|| Error::Config(format!("unknown sensor id {}", m.sensor_id)))?
            .lever_arm;
        rows.push((a - l, m.range, 1.0 / m.variance));
    }
    let residuals = |p: &DVector<f64>| -> f64 {
        rows.iter()
            .map(|(c, r, w)| {
                let e = r - (c - p).norm();
                w * e * e
            })
            .sum()
    };

    let mut p = anchors.centroid();
    let mut cost = residuals(&p);
    for iter in 1..=MULTILATERATION_MAX_ITERATIONS {
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (c, r, w) in &rows {
            let diff = c - &p;
            let dist = diff.norm();
            if dist < 1e-12 {
                continue;
            }
            // ∂(r − ‖c − p‖)/∂p = (c − p)/‖c − p‖
            let j = diff / dist;
            let e = r - dist;
            h.ger(*w, &j, &j, 1.0);
            g.axpy(-w * e, &j, 1.0);
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::Numerical("multilateration geometry is degenerate".into()))?
            .solve(&g);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &p + &step * scale;
            let c = residuals(&trial);
            if c <= cost {
                p = trial;
                cost = c;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("multilateration diverged".into()));
        }
        if !accepted || step.amax() * scale < MULTILATERATION_STEP_TOLERANCE {
            return Ok((p, iter));
        }
    }
    Err(Error::Numerical("multilateration did not converge".into()))
}

/// Initial estimates: the first knot from multilateration over the first
/// `init_measurements` measurements with identity orientation, every later
/// knot propagated from it at constant (zero) velocity.
pub fn initialize(
    graph: &FactorGraph,
    config: &ProblemConfig,
) -> Result<(Vec<StateKnot>, InitReport)> {
    let first: Vec<RangeMeasurement> = graph
        .measurements()
        .take(config.solver.init_measurements)
        .cloned()
        .collect();
    let (position, report) = initial_position(&first, config);
    let pose = Pose::new(Rotation::identity(config.dim), position)?;
    let knots = graph
        .times()
        .iter()
        .map(|&t| StateKnot::new(t, pose.clone(), Twist::zeros(config.dim)))
        .collect::<Result<Vec<_>>>()?;
    Ok((knots, report))
}

pub(crate) fn initial_position(
    first: &[RangeMeasurement],
    config: &ProblemConfig,
) -> (DVector<f64>, InitReport) {
    match multilaterate(first, &config.anchors, &config.sensors) {
        Ok((p, iterations)) => {
            let report = InitReport {
                position: p.iter().copied().collect(),
                fallback: false,
                iterations,
                message: None,
            };
            (p, report)
        }
        Err(e) => {
            let p = config.anchors.centroid();
            log::warn!("initialization falls back to the anchor centroid: {e}");
            let report = InitReport {
                position: p.iter().copied().collect(),
                fallback: true,
                iterations: 0,
                message: Some(e.to_string()),
            };
            (p, report)
        }
    }
}
