//! Range measurements between body-mounted sensors and fixed anchors.
//!
//! A sensor sits at lever arm `p_u` in the body frame, so the predicted range
//! to anchor `a` from pose `(R, p)` is `‖a − R·p_u − p‖`. The lever arm is the
//! only path by which ranges carry orientation information.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::lie::{skew, Dim, Pose};
use crate::motion_prior::StateKnot;

pub type SensorId = u32;
pub type AnchorId = u32;

/// Anchors closer than this are treated as collocated.
pub const MIN_ANCHOR_SEPARATION: f64 = 1e-6;

/// Known anchor positions in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMap {
    dim: Dim,
    anchors: BTreeMap<AnchorId, DVector<f64>>,
}

impl AnchorMap {
    pub fn new(dim: Dim, entries: impl IntoIterator<Item = (AnchorId, Vec<f64>)>) -> Result<Self> {
        let mut anchors = BTreeMap::new();
        for (id, pos) in entries {
            if pos.len() != dim.space() {
                return Err(config_err(format!(
                    "anchor {id} has {} coordinates, expected {}",
                    pos.len(),
                    dim.space()
                )));
            }
            if pos.iter().any(|x| !x.is_finite()) {
                return Err(config_err(format!(
                    "anchor {id} has non-finite coordinates"
                )));
            }
            if anchors.insert(id, DVector::from_vec(pos)).is_some() {
                return Err(config_err(format!("duplicate anchor id {id}")));
            }
        }
        Ok(AnchorMap { dim, anchors })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn get(&self, id: AnchorId) -> Option<&DVector<f64>> {
        self.anchors.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (AnchorId, &DVector<f64>)> {
        self.anchors.iter().map(|(k, v)| (*k, v))
    }

    pub fn ids(&self) -> Vec<AnchorId> {
        self.anchors.keys().copied().collect()
    }

    pub fn centroid(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim.space());
        for p in self.anchors.values() {
            c += p;
        }
        c / (self.anchors.len().max(1) as f64)
    }

    /// Pairs of anchors closer than [`MIN_ANCHOR_SEPARATION`].
    pub fn collocated_pairs(&self) -> Vec<(AnchorId, AnchorId)> {
        let items: Vec<_> = self.iter().collect();
        let mut out = Vec::new();
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                if (items[i].1 - items[j].1).norm() < MIN_ANCHOR_SEPARATION {
                    out.push((items[i].0, items[j].0));
                }
            }
        }
        out
    }
}

/// One body-mounted range sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub lever_arm: DVector<f64>,
    /// Ranging noise standard deviation (m).
    pub sigma: f64,
}

/// Lever arms and noise levels of the robot's range sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    dim: Dim,
    sensors: BTreeMap<SensorId, Sensor>,
}

impl SensorConfig {
    pub fn new(
        dim: Dim,
        entries: impl IntoIterator<Item = (SensorId, Vec<f64>, f64)>,
    ) -> Result<Self> {
        let mut sensors = BTreeMap::new();
        for (id, lever, sigma) in entries {
            if lever.len() != dim.space() {
                return Err(config_err(format!(
                    "sensor {id} lever arm has {} coordinates, expected {}",
                    lever.len(),
                    dim.space()
                )));
            }
            if lever.iter().any(|x| !x.is_finite()) {
                return Err(config_err(format!("sensor {id} lever arm is not finite")));
            }
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(config_err(format!(
                    "sensor {id} sigma must be positive, got {sigma}"
                )));
            }
            let s = Sensor {
                lever_arm: DVector::from_vec(lever),
                sigma,
            };
            if sensors.insert(id, s).is_some() {
                return Err(config_err(format!("duplicate sensor id {id}")));
            }
        }
        Ok(SensorConfig { dim, sensors })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn get(&self, id: SensorId) -> Option<&Sensor> {
        self.sensors.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SensorId, &Sensor)> {
        self.sensors.iter().map(|(k, v)| (*k, v))
    }

    pub fn ids(&self) -> Vec<SensorId> {
        self.sensors.keys().copied().collect()
    }

    /// Rank of the lever-arm matrix after removing its centroid.
    pub fn centered_lever_rank(&self) -> usize {
        let n = self.dim.space();
        let k = self.sensors.len();
        if k == 0 {
            return 0;
        }
        let mut c = DVector::zeros(n);
        for s in self.sensors.values() {
            c += &s.lever_arm;
        }
        c /= k as f64;
        let mut m = DMatrix::zeros(n, k);
        for (j, s) in self.sensors.values().enumerate() {
            m.set_column(j, &(&s.lever_arm - &c));
        }
        let scale = m.amax().max(1e-300);
        (m / scale).rank(1e-9)
    }
}

/// A single range reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub time: f64,
    pub sensor_id: SensorId,
    pub anchor_id: AnchorId,
    /// Measured distance (m).
    pub range: f64,
    /// Noise variance (m²).
    pub variance: f64,
}

impl RangeMeasurement {
    pub fn new(
        time: f64,
        sensor_id: SensorId,
        anchor_id: AnchorId,
        range: f64,
        sigma: f64,
    ) -> Self {
        RangeMeasurement {
            time,
            sensor_id,
            anchor_id,
            range,
            variance: sigma * sigma,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.time.is_finite() || !self.range.is_finite() || !self.variance.is_finite() {
            return Err(arg_err(format!(
                "measurement at t={} has non-finite fields",
                self.time
            )));
        }
        if self.range < 0.0 {
            return Err(arg_err(format!(
                "negative range {} at t={}",
                self.range, self.time
            )));
        }
        if !(self.variance > 0.0) {
            return Err(arg_err(format!("non-positive variance at t={}", self.time)));
        }
        Ok(())
    }
}

/// Deterministic part of the range model, `‖anchor − R·lever − p‖`.
pub fn predict_range(pose: &Pose, lever: &DVector<f64>, anchor: &DVector<f64>) -> f64 {
    (anchor - pose.act(lever)).norm()
}

/// Predicted range and its gradient w.r.t. a right perturbation of the pose,
/// `uᵀ·[−R | −R·∂(exp(φ)·l)/∂φ]` with `u` the unit vector from sensor to anchor.
pub fn predict_range_with_jacobian(
    pose: &Pose,
    lever: &DVector<f64>,
    anchor: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let dim = pose.dim();
    let n = dim.space();
    let diff = anchor - pose.act(lever);
    let range = diff.norm();
    let mut jac = DVector::zeros(dim.dof());
    if range < 1e-12 {
        return (range, jac);
    }
    let u = &diff / range;
    let r = pose.rotation().matrix();
    let ut_r = r.transpose() * &u;
    // ∂diff/∂ρ = −R
    jac.rows_mut(0, n).copy_from(&(-&ut_r));
    match dim {
        Dim::Two => {
            // ∂diff/∂θ = −R·J·l with J = [[0,−1],[1,0]]
            let jl = DVector::from_vec(vec![-lever[1], lever[0]]);
            jac[2] = -ut_r.dot(&jl);
        }
        Dim::Three => {
            // ∂diff/∂φ = R·l^
            let l = nalgebra::Vector3::new(lever[0], lever[1], lever[2]);
            let lx = skew(&l);
            let urt = nalgebra::Vector3::new(ut_r[0], ut_r[1], ut_r[2]);
            let g = lx.transpose() * urt;
            jac[3] = g[0];
            jac[4] = g[1];
            jac[5] = g[2];
        }
    }
    (range, jac)
}

/// A range measurement bound to its sensor lever arm and anchor position.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeFactor {
    pub measurement: RangeMeasurement,
    pub lever: DVector<f64>,
    pub anchor: DVector<f64>,
}

impl RangeFactor {
    pub fn new(
        measurement: RangeMeasurement,
        anchors: &AnchorMap,
        sensors: &SensorConfig,
    ) -> Result<Self> {
        let anchor = anchors
            .get(measurement.anchor_id)
            .ok_or_else(|| config_err(format!("unknown anchor id {}", measurement.anchor_id)))?
            .clone();
        let lever = sensors
            .get(measurement.sensor_id)
            .ok_or_else(|| config_err(format!("unknown sensor id {}", measurement.sensor_id)))?
            .lever_arm
            .clone();
        Ok(RangeFactor {
            measurement,
            lever,
            anchor,
        })
    }

    /// `measured − predicted` (m).
    pub fn error(&self, pose: &Pose) -> f64 {
        self.measurement.range - predict_range(pose, &self.lever, &self.anchor)
    }

    pub fn whitened_error(&self, pose: &Pose) -> f64 {
        self.error(pose) / self.measurement.sigma()
    }

    pub fn cost(&self, pose: &Pose) -> f64 {
        let e = self.whitened_error(pose);
        0.5 * e * e
    }

    /// Error and its Jacobian w.r.t. the pose perturbation.
    pub fn linearize(&self, pose: &Pose) -> (f64, DVector<f64>) {
        let (pred, jac) = predict_range_with_jacobian(pose, &self.lever, &self.anchor);
        (self.measurement.range - pred, -jac)
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.measurement.variance
    }
}

/// Raw range error for a measurement at a knot.
pub fn range_error(
    meas: &RangeMeasurement,
    knot: &StateKnot,
    anchors: &AnchorMap,
    sensors: &SensorConfig,
) -> Result<f64> {
    Ok(RangeFactor::new(meas.clone(), anchors, sensors)?.error(&knot.pose))
}

/// Range error divided by the measurement standard deviation.
pub fn whitened_range_error(
    meas: &RangeMeasurement,
    knot: &StateKnot,
    anchors: &AnchorMap,
    sensors: &SensorConfig,
) -> Result<f64> {
    Ok(RangeFactor::new(meas.clone(), anchors, sensors)?.whitened_error(&knot.pose))
}

/// Geometry problems that make part of the pose unobservable from ranges.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ObservabilityReport {
    pub too_few_anchors: bool,
    pub collocated_anchors: bool,
    pub too_few_sensors: bool,
    pub collinear_sensors: bool,
    pub zero_lever_arms: bool,
    pub messages: Vec<String>,
}

impl ObservabilityReport {
    pub fn passes(&self) -> bool {
        !(self.too_few_anchors
            || self.collocated_anchors
            || self.too_few_sensors
            || self.collinear_sensors
            || self.zero_lever_arms)
    }
}

/// Checks anchor and sensor geometry for full-pose observability.
pub fn check_observability(anchors: &AnchorMap, sensors: &SensorConfig) -> ObservabilityReport {
    let mut r = ObservabilityReport::default();
    let dim = sensors.dim();
    if anchors.len() < 3 {
        r.too_few_anchors = true;
        r.messages.push(format!(
            "anchors insufficient: {} given, at least 3 required",
            anchors.len()
        ));
    }
    let collocated = anchors.collocated_pairs();
    if !collocated.is_empty() {
        r.collocated_anchors = true;
        r.messages
            .push(format!("collocated anchors: {collocated:?}"));
    }
    let min_sensors = match dim {
        Dim::Two => 2,
        Dim::Three => 3,
    };
    if sensors.len() < min_sensors {
        r.too_few_sensors = true;
        r.messages.push(format!(
            "sensors insufficient for {dim}: {} given, at least {min_sensors} required",
            sensors.len()
        ));
    }
    let all_zero = sensors.iter().all(|(_, s)| s.lever_arm.norm() < 1e-9);
    if sensors.is_empty() || all_zero {
        r.zero_lever_arms = true;
        r.messages
            .push("all lever arms are zero: orientation is unobservable".to_string());
    }
    let rank = sensors.centered_lever_rank();
    match dim {
        Dim::Two => {
            if sensors.len() >= 2 && rank < 1 {
                r.collinear_sensors = true;
                r.messages
                    .push("sensor lever arms are not distinct".to_string());
            }
        }
        Dim::Three => {
            if sensors.len() >= 3 && rank < 2 {
                r.collinear_sensors = true;
                r.messages.push(
                    "sensor lever arms are collinear: rotation about the sensor line is unobservable"
                        .to_string(),
                );
            }
        }
    }
    r
}

/// Constant range bias per sensor–anchor pair, keyed `"sensor_id:anchor_id"` on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct Calibration {
    biases: BTreeMap<(SensorId, AnchorId), f64>,
}

impl Calibration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sensor: SensorId, anchor: AnchorId, bias: f64) {
        self.biases.insert((sensor, anchor), bias);
    }

    pub fn bias(&self, sensor: SensorId, anchor: AnchorId) -> f64 {
        self.biases.get(&(sensor, anchor)).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.biases.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, f64> = serde_json::from_str(text)?;
        Calibration::try_from(raw).map_err(config_err)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map of floats serializes")
    }
}

impl TryFrom<BTreeMap<String, f64>> for Calibration {
    type Error = String;

    fn try_from(raw: BTreeMap<String, f64>) -> std::result::Result<Self, String> {
        let mut c = Calibration::new();
        for (key, bias) in raw {
            let bad = || format!("calibration key {key:?} is not \"sensor:anchor\"");
            let (s, a) = key.split_once(':').ok_or_else(bad)?;
            let s: SensorId = s.trim().parse().map_err(|_| bad())?;
            let a: AnchorId = a.trim().parse().map_err(|_| bad())?;
            c.insert(s, a, bias);
        }
        Ok(c)
    }
}

impl From<Calibration> for BTreeMap<String, f64> {
    fn from(c: Calibration) -> Self {
        c.biases
            .into_iter()
            .map(|((s, a), b)| (format!("{s}:{a}"), b))
            .collect()
    }
}

/// Median of `measured − predicted` per sensor–anchor pair against known poses.
pub fn estimate_biases<F>(
    measurements: &[RangeMeasurement],
    truth: F,
    anchors: &AnchorMap,
    sensors: &SensorConfig,
) -> Result<Calibration>
where
    F: Fn(f64) -> Option<Pose>,
{
    let mut residuals: BTreeMap<(SensorId, AnchorId), Vec<f64>> = BTreeMap::new();
    for m in measurements {
        let Some(pose) = truth(m.time) else { continue };
        let f = RangeFactor::new(m.clone(), anchors, sensors)?;
        residuals
            .entry((m.sensor_id, m.anchor_id))
            .or_default()
            .push(f.error(&pose));
    }
    let mut c = Calibration::new();
    for ((s, a), mut r) in residuals {
        c.insert(s, a, median(&mut r));
    }
    Ok(c)
}

/// Outlier gating strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutlierPolicy {
    None,
    /// Drop samples whose innovation against the rolling median of their
    /// sensor–anchor stream exceeds `k·MAD`. The median follows a robust
    /// local line over `±window` seconds so that a moving robot does not trip
    /// the gate. MAD is scaled to be consistent with a Gaussian standard
    /// deviation; the larger of the window's and the whole stream's is used,
    /// floored at `mad_floor` metres and at the measurement's own sigma.
    MadGate {
        k: f64,
        window: f64,
        mad_floor: f64,
    },
}

impl Default for OutlierPolicy {
    fn default() -> Self {
        OutlierPolicy::MadGate {
            k: 5.0,
            window: 3.0,
            mad_floor: 0.02,
        }
    }
}

/// MAD of a unit Gaussian.
const GAUSSIAN_MAD: f64 = 0.674_489_750_196_081_7;

/// Sorts a slice in place and returns its median (NaN when empty).
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Residuals of `(t, y)` about their Theil–Sen line.
fn theil_sen_residuals(t: &[f64], y: &[f64]) -> Vec<f64> {
    let mut slopes = Vec::with_capacity(t.len() * t.len() / 2);
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            let dt = t[j] - t[i];
            if dt.abs() > 1e-9 {
                slopes.push((y[j] - y[i]) / dt);
            }
        }
    }
    let slope = if slopes.is_empty() {
        0.0
    } else {
        median(&mut slopes)
    };
    y.iter().zip(t).map(|(y, t)| y - slope * t).collect()
}

/// Removes constant biases, then gates outliers per sensor–anchor stream.
pub fn preprocess(
    measurements: &[RangeMeasurement],
    calibration: Option<&Calibration>,
    outliers: &OutlierPolicy,
) -> Result<Vec<RangeMeasurement>> {
    if measurements.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(arg_err("measurements must be sorted by time"));
    }
    let mut out: Vec<RangeMeasurement> = measurements
        .iter()
        .map(|m| {
            let mut m = m.clone();
            if let Some(c) = calibration {
                m.range -= c.bias(m.sensor_id, m.anchor_id);
            }
            m
        })
        .collect();

    if let OutlierPolicy::MadGate {
        k,
        window,
        mad_floor,
    } = *outliers
    {
        let mut streams: BTreeMap<(SensorId, AnchorId), Vec<usize>> = BTreeMap::new();
        for (i, m) in out.iter().enumerate() {
            streams
                .entry((m.sensor_id, m.anchor_id))
                .or_default()
                .push(i);
        }
        let mut keep = vec![true; out.len()];
        for idx in streams.values() {
            let times: Vec<f64> = idx.iter().map(|&i| out[i].time).collect();
            let values: Vec<f64> = idx.iter().map(|&i| out[i].range).collect();
            // Per sample: deviation from the local robust line and the
            // window's own (scaled) MAD.
            let mut local: Vec<Option<(f64, f64)>> = Vec::with_capacity(idx.len());
            let mut lo = 0;
            let mut hi = 0;
            for j in 0..idx.len() {
                while times[lo] < times[j] - window {
                    lo += 1;
                }
                while hi < times.len() && times[hi] <= times[j] + window {
                    hi += 1;
                }
                if hi - lo < 3 {
                    local.push(None);
                    continue;
                }
                // Centre time to keep the line fit well conditioned.
                let t: Vec<f64> = times[lo..hi].iter().map(|x| x - times[j]).collect();
                let res = theil_sen_residuals(&t, &values[lo..hi]);
                let mut sorted = res.clone();
                let med = median(&mut sorted);
                let mut dev: Vec<f64> = res.iter().map(|r| (r - med).abs()).collect();
                local.push(Some((res[j - lo] - med, median(&mut dev) / GAUSSIAN_MAD)));
            }
            // Sparse streams on curved range profiles leave a systematic
            // misfit that a few-sample window cannot see; the MAD of all the
            // stream's deviations measures it.
            let mut all: Vec<f64> = local.iter().flatten().map(|(d, _)| d.abs()).collect();
            let stream_scale = if all.len() >= 8 {
                median(&mut all) / GAUSSIAN_MAD
            } else {
                0.0
            };
            for (j, &i) in idx.iter().enumerate() {
                let Some((deviation, window_scale)) = local[j] else {
                    continue;
                };
                // Scaled to a standard deviation, so k counts sigmas.
                let scale = window_scale
                    .max(stream_scale)
                    .max(mad_floor)
                    .max(out[i].sigma());
                if deviation.abs() > k * scale {
                    keep[i] = false;
                }
            }
        }
        out = out
            .into_iter()
            .zip(keep)
            .filter_map(|(m, k)| k.then_some(m))
            .collect();
    }
    Ok(out)
}
