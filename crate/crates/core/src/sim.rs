//! Measurement simulator: arena geometry, trajectories, ranging schedule,
//! noise and dropouts, plus the lever-arm / noise sweep driver.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AnchorEntry, PriorSpec, ProblemConfig, SensorEntry, SolverSettings};
use crate::error::{config_err, Result};
use crate::eval::{evaluate, spearman, Alignment};
use crate::lie::{Dim, Pose, Rotation, Tangent};
use crate::motion_prior::{
    from_local, interpolate, process_noise, transition, LocalState, PriorParams, StateKnot, Twist,
};
use crate::pipeline::{estimate, EstimationMode};
use crate::range_model::{predict_range, AnchorMap, RangeMeasurement, SensorConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Arena used for the default anchor layout (m).
pub const ARENA: [f64; 3] = [7.0, 8.0, 3.5];
/// Flight height of the default trajectories (m).
const DEFAULT_HEIGHT: f64 = 1.5;
/// Rate of the dense ground-truth grid (Hz).
pub const DENSE_TRUTH_RATE: f64 = 100.0;

/// Eight anchors: the corners of the arena box in 3D; the four corners and
/// four edge midpoints of the floor rectangle in 2D.
pub fn default_anchors(dim: Dim) -> Vec<AnchorEntry> {
    let [x, y, z] = ARENA;
    let positions: Vec<Vec<f64>> = match dim {
        Dim::Three => {
            let mut p = Vec::new();
            for cx in [0.0, x] {
                for cy in [0.0, y] {
                    for cz in [0.0, z] {
                        p.push(vec![cx, cy, cz]);
                    }
                }
            }
            p
        }
        Dim::Two => vec![
            vec![0.0, 0.0],
            vec![x, 0.0],
            vec![x, y],
            vec![0.0, y],
            vec![x / 2.0, 0.0],
            vec![x, y / 2.0],
            vec![x / 2.0, y],
            vec![0.0, y / 2.0],
        ],
    };
    positions
        .into_iter()
        .enumerate()
        .map(|(i, position)| AnchorEntry {
            id: i as u32,
            position,
        })
        .collect()
}

/// Sensors at distance `lever` from the body origin: a right triangle
/// `L·x̂, L·ŷ, −L·x̂` in 3D, `±L·x̂` in 2D.
pub fn default_sensors(dim: Dim, lever: f64, sigma: f64) -> Vec<SensorEntry> {
    let arms: Vec<Vec<f64>> = match dim {
        Dim::Three => vec![
            vec![lever, 0.0, 0.0],
            vec![0.0, lever, 0.0],
            vec![-lever, 0.0, 0.0],
        ],
        Dim::Two => vec![vec![lever, 0.0], vec![-lever, 0.0]],
    };
    arms.into_iter()
        .enumerate()
        .map(|(i, lever_arm)| SensorEntry {
            id: i as u32,
            lever_arm,
            sigma,
        })
        .collect()
}

fn arena_point(dim: Dim, x: f64, y: f64) -> Vec<f64> {
    match dim {
        Dim::Two => vec![x, y],
        Dim::Three => vec![x, y, DEFAULT_HEIGHT],
    }
}

/// Trajectory family and parameters. Omitted positions default to points
/// inside the arena.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Constant world velocity and fixed yaw.
    StraightLine {
        #[serde(default)]
        start: Option<Vec<f64>>,
        #[serde(default)]
        velocity: Option<Vec<f64>>,
        #[serde(default)]
        yaw: f64,
    },
    /// Horizontal circle flown nose-forward: constant body twist.
    Circle {
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_angular_rate")]
        angular_rate: f64,
    },
    /// Lemniscate `x = a·sin ωt, y = b·sin 2ωt` flown nose-forward.
    FigureEight {
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "default_half_height")]
        half_height: f64,
        #[serde(default = "default_period")]
        period: f64,
    },
    /// Straight line whose speed `v·(1 − cos 2πt/P)` comes to rest every period.
    StopAndGo {
        #[serde(default)]
        start: Option<Vec<f64>>,
        #[serde(default = "default_heading")]
        heading: f64,
        #[serde(default = "default_stop_speed")]
        speed: f64,
        #[serde(default = "default_stop_period")]
        period: f64,
        #[serde(default)]
        yaw: f64,
    },
    /// Sample path of the white-noise-on-acceleration prior itself, drawn on
    /// a `step` grid. `qc` defaults to the scenario prior.
    GpSample {
        #[serde(default)]
        start: Option<Vec<f64>>,
        #[serde(default)]
        initial_twist: Option<Vec<f64>>,
        #[serde(default)]
        qc: Option<Vec<f64>>,
        #[serde(default = "default_gp_step")]
        step: f64,
    },
}

fn default_radius() -> f64 {
    2.0
}
fn default_angular_rate() -> f64 {
    0.25
}
fn default_half_width() -> f64 {
    2.5
}
fn default_half_height() -> f64 {
    2.0
}
fn default_period() -> f64 {
    40.0
}
fn default_heading() -> f64 {
    0.9
}
fn default_stop_speed() -> f64 {
    0.15
}
fn default_stop_period() -> f64 {
    8.0
}
fn default_gp_step() -> f64 {
    0.01
}

impl Default for TrajectorySpec {
    /// 10 m at 0.5 m/s over the default 20 s duration.
    fn default() -> Self {
        TrajectorySpec::StraightLine {
            start: None,
            velocity: None,
            yaw: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Sensor `k mod S`, anchor `(k div S) mod A` at tick `k`.
    #[default]
    RoundRobin,
    UniformRandom,
}

fn default_rate() -> f64 {
    17.0
}
fn default_duration() -> f64 {
    20.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// A simulation study. Shares the geometry and prior fields of
/// [`ProblemConfig`], so the same file configures the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub dim: Dim,
    pub anchors: Vec<AnchorEntry>,
    pub sensors: Vec<SensorEntry>,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub schedule: SchedulePolicy,
    /// Standard deviation of the additive range noise (m).
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Intervals `[start, end]` (s) without measurements.
    #[serde(default)]
    pub dropouts: Vec<(f64, f64)>,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl Scenario {
    /// Default arena, sensors at `lever`, straight-line trajectory.
    pub fn arena(dim: Dim, lever: f64, noise_std: f64) -> Self {
        let sigma = if noise_std > 0.0 {
            noise_std
        } else {
            default_noise()
        };
        Scenario {
            schema_version: SCHEMA_VERSION,
            dim,
            anchors: default_anchors(dim),
            sensors: default_sensors(dim, lever, sigma),
            prior: PriorSpec::default(),
            trajectory: TrajectorySpec::default(),
            rate_hz: default_rate(),
            duration: default_duration(),
            schedule: SchedulePolicy::RoundRobin,
            noise_std,
            seed: 0,
            dropouts: Vec::new(),
            solver: SolverSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(config_err(format!(
                "rate_hz must be positive, got {}",
                self.rate_hz
            )));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(config_err(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(config_err("noise_std must be non-negative"));
        }
        for &(a, b) in &self.dropouts {
            if !(a < b) || a < 0.0 || b > self.duration {
                return Err(config_err(format!(
                    "dropout [{a}, {b}] must be a nonempty interval inside [0, {}]",
                    self.duration
                )));
            }
        }
        self.anchor_map()?;
        self.sensor_config()?;
        self.prior_params()?;
        Ok(())
    }

    pub fn anchor_map(&self) -> Result<AnchorMap> {
        AnchorMap::new(
            self.dim,
            self.anchors.iter().map(|a| (a.id, a.position.clone())),
        )
    }

    pub fn sensor_config(&self) -> Result<SensorConfig> {
        SensorConfig::new(
            self.dim,
            self.sensors
                .iter()
                .map(|s| (s.id, s.lever_arm.clone(), s.sigma)),
        )
    }

    pub fn prior_params(&self) -> Result<PriorParams> {
        self.prior.to_params(self.dim)
    }

    /// Estimator configuration matching this scenario.
    pub fn problem_config(&self) -> Result<ProblemConfig> {
        let mut c = ProblemConfig::new(
            self.anchor_map()?,
            self.sensor_config()?,
            self.prior_params()?,
        )?;
        c.solver = self.solver.clone();
        Ok(c)
    }

    /// Noise standard deviation written with each measurement.
    fn recorded_sigma(&self, sensor_sigma: f64) -> f64 {
        if self.noise_std > 0.0 {
            self.noise_std
        } else {
            sensor_sigma
        }
    }

    pub fn in_dropout(&self, t: f64) -> bool {
        self.dropouts.iter().any(|&(a, b)| t >= a && t <= b)
    }
}

/// Independent RNG streams derived from one scenario seed.
fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const NOISE_STREAM: u64 = 0;
const TRAJECTORY_STREAM: u64 = 1;
const SCHEDULE_STREAM: u64 = 2;

#[derive(Debug, Clone)]
enum Path {
    Analytic(TrajectorySpec),
    Sampled {
        knots: Vec<StateKnot>,
        step: f64,
        prior: PriorParams,
    },
}

/// Ground-truth trajectory, queryable at any time in its span.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    dim: Dim,
    duration: f64,
    path: Path,
}

fn vec_or(v: &Option<Vec<f64>>, default: Vec<f64>, dim: Dim, name: &str) -> Result<DVector<f64>> {
    let v = v.clone().unwrap_or(default);
    if v.len() != dim.space() {
        return Err(config_err(format!(
            "trajectory {name} has {} coordinates, expected {}",
            v.len(),
            dim.space()
        )));
    }
    Ok(DVector::from_vec(v))
}

/// Planar state: xy position and velocity with a yaw, at fixed height.
fn planar_state(
    dim: Dim,
    time: f64,
    position: DVector<f64>,
    velocity: [f64; 2],
    yaw: f64,
    yaw_rate: f64,
) -> StateKnot {
    let rotation = Rotation::from_yaw(dim, yaw);
    let (c, s) = (yaw.cos(), yaw.sin());
    let vb = [
        c * velocity[0] + s * velocity[1],
        -s * velocity[0] + c * velocity[1],
    ];
    let twist = match dim {
        Dim::Two => vec![vb[0], vb[1], yaw_rate],
        Dim::Three => vec![vb[0], vb[1], 0.0, 0.0, 0.0, yaw_rate],
    };
    StateKnot {
        time,
        pose: Pose::new(rotation, position).expect("position matches rotation"),
        twist: Twist::with_bound(DVector::from_vec(twist), f64::INFINITY).expect("finite twist"),
    }
}

fn with_xy(base: &DVector<f64>, x: f64, y: f64) -> DVector<f64> {
    let mut p = base.clone();
    p[0] = x;
    p[1] = y;
    p
}

/// Resolves a trajectory spec for a scenario, drawing sample paths from the
/// scenario seed.
pub fn generate_trajectory(scenario: &Scenario) -> Result<GroundTruth> {
    let dim = scenario.dim;
    let spec = &scenario.trajectory;
    // Validate parameters eagerly.
    match spec {
        TrajectorySpec::StraightLine {
            start, velocity, ..
        } => {
            vec_or(start, arena_point(dim, 0.5, 0.0), dim, "start")?;
            let mut v = vec![0.3, 0.4];
            if dim == Dim::Three {
                v.push(0.0);
            }
            vec_or(velocity, v, dim, "velocity")?;
        }
        TrajectorySpec::Circle {
            center,
            radius,
            angular_rate,
        } => {
            vec_or(center, arena_point(dim, 3.5, 4.0), dim, "center")?;
            if !(*radius > 0.0) || !angular_rate.is_finite() {
                return Err(config_err("circle needs a positive radius and finite rate"));
            }
        }
        TrajectorySpec::FigureEight {
            center,
            half_width,
            half_height,
            period,
        } => {
            vec_or(center, arena_point(dim, 3.5, 4.0), dim, "center")?;
            if !(*half_width > 0.0 && *half_height > 0.0 && *period > 0.0) {
                return Err(config_err("figure-eight sizes and period must be positive"));
            }
        }
        TrajectorySpec::StopAndGo {
            start,
            speed,
            period,
            ..
        } => {
            vec_or(start, arena_point(dim, 1.0, 1.0), dim, "start")?;
            if !(*speed >= 0.0 && *period > 0.0) {
                return Err(config_err(
                    "stop-and-go needs non-negative speed and positive period",
                ));
            }
        }
        TrajectorySpec::GpSample {
            start,
            initial_twist,
            qc,
            step,
        } => {
            let p0 = vec_or(start, arena_point(dim, 3.5, 4.0), dim, "start")?;
            let w0 = initial_twist
                .clone()
                .unwrap_or_else(|| vec![0.0; dim.dof()]);
            if w0.len() != dim.dof() {
                return Err(config_err(format!(
                    "initial_twist needs {} entries",
                    dim.dof()
                )));
            }
            if !(*step > 0.0) {
                return Err(config_err("gp_sample step must be positive"));
            }
            let prior = match qc {
                Some(q) => PriorSpec {
                    qc: Some(q.clone()),
                }
                .to_params(dim)?,
                None => scenario.prior_params()?,
            };
            let mut rng = rng_stream(scenario.seed, TRAJECTORY_STREAM);
            let knots = sample_prior_path(
                dim,
                p0,
                DVector::from_vec(w0),
                &prior,
                *step,
                scenario.duration,
                &mut rng,
            )?;
            return Ok(GroundTruth {
                dim,
                duration: scenario.duration,
                path: Path::Sampled {
                    knots,
                    step: *step,
                    prior,
                },
            });
        }
    }
    Ok(GroundTruth {
        dim,
        duration: scenario.duration,
        path: Path::Analytic(spec.clone()),
    })
}

/// Exact discretization of the prior on a `step` grid: local states are drawn
/// from `N(Φ·γ, Q)` and mapped back onto the group.
fn sample_prior_path(
    dim: Dim,
    start: DVector<f64>,
    twist: DVector<f64>,
    prior: &PriorParams,
    step: f64,
    duration: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StateKnot>> {
    let d = dim.dof();
    let phi = transition(dim, step)?;
    let chol = process_noise(step, prior)?
        .cholesky()
        .ok_or_else(|| config_err("process noise is not positive definite"))?;
    let l = chol.l();
    let n = (duration / step).ceil() as usize;
    let mut knot = StateKnot::new(
        0.0,
        Pose::new(Rotation::identity(dim), start)?,
        Twist::with_bound(twist, f64::INFINITY)?,
    )?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(knot.clone());
    for k in 1..=n {
        let mut g = DVector::zeros(2 * d);
        g.rows_mut(d, d).copy_from(knot.twist.vector());
        let z = DVector::from_fn(2 * d, |_, _| StandardNormal.sample(rng));
        let g = &phi * g + &l * z;
        let local = LocalState {
            xi: Tangent::new(g.rows(0, d).into_owned())?,
            xi_dot: g.rows(d, d).into_owned(),
        };
        knot = from_local(&knot, &local, k as f64 * step);
        out.push(knot.clone());
    }
    Ok(out)
}

impl GroundTruth {
    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Pose and body twist at `t`.
    pub fn state(&self, t: f64) -> StateKnot {
        let dim = self.dim;
        match &self.path {
            Path::Sampled { knots, step, prior } => {
                let i = ((t / step).floor().max(0.0) as usize).min(knots.len() - 1);
                if (knots[i].time - t).abs() < 1e-12 || i + 1 >= knots.len() {
                    let mut k = knots[i].clone();
                    k.time = t;
                    return k;
                }
                if (knots[i + 1].time - t).abs() < 1e-12 {
                    let mut k = knots[i + 1].clone();
                    k.time = t;
                    return k;
                }
                interpolate(&knots[i], &knots[i + 1], t, prior).expect("time inside sample grid")
            }
            Path::Analytic(spec) => analytic_state(dim, spec, t),
        }
    }

    /// States at the given times.
    pub fn sample(&self, times: &[f64]) -> Vec<StateKnot> {
        times.iter().map(|&t| self.state(t)).collect()
    }

    /// States at measurement times merged with a dense grid, sorted by time.
    pub fn export_samples(&self, measurement_times: &[f64]) -> Vec<StateKnot> {
        let n = (self.duration * DENSE_TRUTH_RATE).floor() as usize;
        let mut times: Vec<f64> = (0..=n).map(|k| k as f64 / DENSE_TRUTH_RATE).collect();
        times.extend_from_slice(measurement_times);
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        self.sample(&times)
    }
}

fn analytic_state(dim: Dim, spec: &TrajectorySpec, t: f64) -> StateKnot {
    match spec {
        TrajectorySpec::StraightLine {
            start,
            velocity,
            yaw,
        } => {
            let p0 = vec_or(start, arena_point(dim, 0.5, 0.0), dim, "start").expect("validated");
            let mut dv = vec![0.3, 0.4];
            if dim == Dim::Three {
                dv.push(0.0);
            }
            let v = vec_or(velocity, dv, dim, "velocity").expect("validated");
            let rotation = Rotation::from_yaw(dim, *yaw);
            let vb = rotation.inverse().rotate(&v);
            let mut twist = DVector::zeros(dim.dof());
            twist.rows_mut(0, dim.space()).copy_from(&vb);
            StateKnot {
                time: t,
                pose: Pose::new(rotation, &p0 + &v * t).expect("validated"),
                twist: Twist::with_bound(twist, f64::INFINITY).expect("finite"),
            }
        }
        TrajectorySpec::Circle {
            center,
            radius,
            angular_rate,
        } => {
            let c = vec_or(center, arena_point(dim, 3.5, 4.0), dim, "center").expect("validated");
            let (r, w) = (*radius, *angular_rate);
            let a = w * t;
            let p = with_xy(&c, c[0] + r * a.sin(), c[1] - r * a.cos());
            planar_state(dim, t, p, [r * w * a.cos(), r * w * a.sin()], a, w)
        }
        TrajectorySpec::FigureEight {
            center,
            half_width,
            half_height,
            period,
        } => {
            let c = vec_or(center, arena_point(dim, 3.5, 4.0), dim, "center").expect("validated");
            let (a, b) = (*half_width, *half_height);
            let w = 2.0 * PI / period;
            let (s1, c1) = (w * t).sin_cos();
            let (s2, c2) = (2.0 * w * t).sin_cos();
            let p = with_xy(&c, c[0] + a * s1, c[1] + b * s2);
            let (vx, vy) = (a * w * c1, 2.0 * b * w * c2);
            let (ax, ay) = (-a * w * w * s1, -4.0 * b * w * w * s2);
            let yaw = vy.atan2(vx);
            let yaw_rate = (vx * ay - vy * ax) / (vx * vx + vy * vy);
            planar_state(dim, t, p, [vx, vy], yaw, yaw_rate)
        }
        TrajectorySpec::StopAndGo {
            start,
            heading,
            speed,
            period,
            yaw,
        } => {
            let p0 = vec_or(start, arena_point(dim, 1.0, 1.0), dim, "start").expect("validated");
            let k = 2.0 * PI / period;
            let s = speed * (t - (k * t).sin() / k);
            let sd = speed * (1.0 - (k * t).cos());
            let (hs, hc) = heading.sin_cos();
            let p = with_xy(&p0, p0[0] + hc * s, p0[1] + hs * s);
            planar_state(dim, t, p, [hc * sd, hs * sd], *yaw, 0.0)
        }
        TrajectorySpec::GpSample { .. } => unreachable!("sampled paths are not analytic"),
    }
}

/// One measurement per tick at `rate_hz`, skipping dropout windows. Noise is
/// drawn for every tick so dropouts do not change the other measurements.
pub fn schedule_measurements(
    scenario: &Scenario,
    truth: &GroundTruth,
) -> Result<Vec<RangeMeasurement>> {
    scenario.validate()?;
    let anchors = scenario.anchor_map()?;
    let sensors = scenario.sensor_config()?;
    let sensor_ids = sensors.ids();
    let anchor_ids = anchors.ids();
    if sensor_ids.is_empty() || anchor_ids.is_empty() {
        return Err(config_err(
            "scenario needs at least one sensor and one anchor",
        ));
    }
    let noise = Normal::new(0.0, scenario.noise_std).map_err(|e| config_err(e.to_string()))?;
    let mut noise_rng = rng_stream(scenario.seed, NOISE_STREAM);
    let mut schedule_rng = rng_stream(scenario.seed, SCHEDULE_STREAM);
    let ticks = (scenario.duration * scenario.rate_hz + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let t = k as f64 / scenario.rate_hz;
        let (s, a) = match scenario.schedule {
            SchedulePolicy::RoundRobin => (
                sensor_ids[k % sensor_ids.len()],
                anchor_ids[(k / sensor_ids.len()) % anchor_ids.len()],
            ),
            SchedulePolicy::UniformRandom => (
                sensor_ids[schedule_rng.random_range(0..sensor_ids.len())],
                anchor_ids[schedule_rng.random_range(0..anchor_ids.len())],
            ),
        };
        let n: f64 = noise.sample(&mut noise_rng);
        if scenario.in_dropout(t) {
            continue;
        }
        let sensor = sensors.get(s).expect("listed id");
        let pose = truth.state(t).pose;
        let range = (predict_range(&pose, &sensor.lever_arm, anchors.get(a).expect("listed id"))
            + n)
            .max(0.0);
        out.push(RangeMeasurement::new(
            t,
            s,
            a,
            range,
            scenario.recorded_sigma(sensor.sigma),
        ));
    }
    Ok(out)
}

/// Simulated measurements and the ground truth they came from.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub truth: GroundTruth,
    pub measurements: Vec<RangeMeasurement>,
}

pub fn simulate(scenario: &Scenario) -> Result<Simulation> {
    let truth = generate_trajectory(scenario)?;
    let measurements = schedule_measurements(scenario, &truth)?;
    Ok(Simulation {
        truth,
        measurements,
    })
}

/// Mean and spread of the RMSEs of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lever_m: f64,
    pub sigma_m: f64,
    pub pos_rmse_mean: f64,
    pub pos_rmse_std: f64,
    pub ori_rmse_mean: f64,
    pub ori_rmse_std: f64,
    pub runs: usize,
    /// Runs whose estimator failed; their RMSEs are excluded (NaN when all fail).
    #[serde(default)]
    pub failures: usize,
    /// Runs whose solve hit the iteration limit; their estimates are included.
    #[serde(default)]
    pub unconverged: usize,
    #[serde(default)]
    pub note: Option<String>,
}

/// Lever-arm / noise grid specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub scenario: Scenario,
    #[serde(default = "default_levers")]
    pub levers: Vec<f64>,
    #[serde(default = "default_noises")]
    pub noises: Vec<f64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

pub fn default_levers() -> Vec<f64> {
    vec![0.014, 0.1, 0.5, 1.0, 2.8]
}
pub fn default_noises() -> Vec<f64> {
    vec![0.0, 0.05, 0.1]
}
fn default_runs() -> usize {
    5
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Seed of run `run` in cell `cell`: each cell owns the stream `base ⊕ cell`.
pub fn cell_seed(base: u64, cell: usize, run: usize) -> u64 {
    (base ^ cell as u64).wrapping_add((run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Full pipeline (simulate, batch estimate, evaluate) for every
/// `(lever, σ)` cell, `runs` times each. Cells run in parallel; results do
/// not depend on scheduling.
pub fn sweep(
    template: &Scenario,
    levers: &[f64],
    noises: &[f64],
    runs: usize,
) -> Result<Vec<SweepCell>> {
    if let Some(l) = levers.iter().find(|&&l| !(l > 0.0)) {
        return Err(config_err(format!(
            "lever lengths must be positive, got {l}"
        )));
    }
    if runs == 0 {
        return Err(config_err("sweep needs at least one run per cell"));
    }
    template.validate()?;
    let cells: Vec<(usize, f64, f64)> = levers
        .iter()
        .flat_map(|&l| noises.iter().map(move |&s| (l, s)))
        .enumerate()
        .map(|(i, (l, s))| (i, l, s))
        .collect();
    let out = cells
        .par_iter()
        .map(|&(cell, lever, sigma)| {
            let results: Vec<std::result::Result<(f64, f64, bool), String>> = (0..runs)
                .into_par_iter()
                .map(|run| {
                    let mut sc = template.clone();
                    sc.sensors = default_sensors(
                        sc.dim,
                        lever,
                        if sigma > 0.0 { sigma } else { default_noise() },
                    );
                    sc.noise_std = sigma;
                    sc.seed = cell_seed(template.seed, cell, run);
                    run_cell(&sc).map_err(|e| e.to_string())
                })
                .collect();
            let mut pos = Vec::new();
            let mut ori = Vec::new();
            let mut notes = Vec::new();
            let mut unconverged = 0;
            for r in results {
                match r {
                    Ok((p, o, u)) => {
                        pos.push(p);
                        ori.push(o);
                        unconverged += u as usize;
                    }
                    Err(e) => notes.push(e),
                }
            }
            let (pm, ps) = mean_std(&pos);
            let (om, os) = mean_std(&ori);
            if !notes.is_empty() {
                log::warn!(
                    "sweep cell lever={lever} sigma={sigma}: {} failed runs",
                    notes.len()
                );
            }
            SweepCell {
                lever_m: lever,
                sigma_m: sigma,
                pos_rmse_mean: pm,
                pos_rmse_std: ps,
                ori_rmse_mean: om,
                ori_rmse_std: os,
                runs,
                failures: notes.len(),
                unconverged,
                note: notes.first().cloned().or_else(|| {
                    (unconverged > 0).then(|| format!("{unconverged} runs hit the iteration limit"))
                }),
            }
        })
        .collect();
    Ok(out)
}

/// Lever-arm trend of a sweep at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseTrend {
    pub sigma_m: f64,
    /// Spearman correlation of mean orientation RMSE with lever length.
    pub orientation_spearman: f64,
    /// Mean orientation RMSE at the shortest lever over that at the longest.
    pub orientation_ratio: f64,
    /// Largest over smallest mean position RMSE across levers.
    pub position_spread: f64,
}

/// Per-noise-level trends; cells with NaN means are skipped.
pub fn trends(cells: &[SweepCell]) -> Vec<NoiseTrend> {
    let mut sigmas: Vec<f64> = cells.iter().map(|c| c.sigma_m).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    sigmas
        .into_iter()
        .map(|sigma| {
            let mut row: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.sigma_m == sigma && c.ori_rmse_mean.is_finite())
                .collect();
            row.sort_by(|a, b| a.lever_m.total_cmp(&b.lever_m));
            let levers: Vec<f64> = row.iter().map(|c| c.lever_m).collect();
            let ori: Vec<f64> = row.iter().map(|c| c.ori_rmse_mean).collect();
            let pos: Vec<f64> = row.iter().map(|c| c.pos_rmse_mean).collect();
            let (pmin, pmax) = pos.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
            NoiseTrend {
                sigma_m: sigma,
                orientation_spearman: spearman(&levers, &ori),
                orientation_ratio: match (ori.first(), ori.last()) {
                    (Some(a), Some(b)) if row.len() > 1 => a / b,
                    _ => f64::NAN,
                },
                position_spread: if row.is_empty() {
                    f64::NAN
                } else {
                    pmax / pmin
                },
            }
        })
        .collect()
}

/// RMSEs of one run plus whether the batch solve stopped short of its
/// convergence test (its estimate is still used).
fn run_cell(sc: &Scenario) -> Result<(f64, f64, bool)> {
    let sim = simulate(sc)?;
    let config = sc.problem_config()?;
    let est = estimate(&sim.measurements, &config, EstimationMode::Batch)?;
    let unconverged = est.report.as_ref().is_some_and(|r| !r.converged());
    let times: Vec<f64> = est.estimates.iter().map(|e| e.knot.time).collect();
    let truth = sim.truth.sample(&times);
    let report = evaluate(&est.estimates, &truth, Alignment::None)?;
    Ok((report.position_rmse, report.orientation_rmse, unconverged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::range_model::RangeFactor;

    fn analytic_kinds() -> Vec<TrajectorySpec> {
        vec![
            TrajectorySpec::default(),
            TrajectorySpec::Circle {
                center: None,
                radius: 2.0,
                angular_rate: 0.3,
            },
            TrajectorySpec::FigureEight {
                center: None,
                half_width: 2.5,
                half_height: 2.0,
                period: 30.0,
            },
            TrajectorySpec::StopAndGo {
                start: None,
                heading: 0.9,
                speed: 0.2,
                period: 8.0,
                yaw: 0.4,
            },
        ]
    }

    #[test]
    fn straight_line_length() {
        let mut sc = Scenario::arena(Dim::Three, 0.5, 0.0);
        sc.trajectory = TrajectorySpec::StraightLine {
            start: Some(vec![0.0, 0.0, 1.0]),
            velocity: Some(vec![1.0, 0.0, 0.0]),
            yaw: 0.0,
        };
        let g = generate_trajectory(&sc).unwrap();
        let d = g.state(10.0).pose.position() - g.state(0.0).pose.position();
        assert!((d.norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn circle_has_constant_body_twist() {
        for dim in [Dim::Two, Dim::Three] {
            let mut sc = Scenario::arena(dim, 0.5, 0.0);
            sc.trajectory = TrajectorySpec::Circle {
                center: None,
                radius: 2.0,
                angular_rate: 0.3,
            };
            let g = generate_trajectory(&sc).unwrap();
            for t in [0.0, 3.3, 17.0] {
                let w = g.state(t).twist;
                assert!((w[0] - 0.6).abs() < 1e-12);
                assert!(w[1].abs() < 1e-12);
                assert!((w[dim.dof() - 1] - 0.3).abs() < 1e-12);
            }
        }
    }

    // Central differences of the pose as the oracle for the analytic twist.
    #[test]
    fn twists_match_finite_differences() {
        let h = 1e-4;
        for dim in [Dim::Two, Dim::Three] {
            for spec in analytic_kinds() {
                let mut sc = Scenario::arena(dim, 0.5, 0.0);
                sc.trajectory = spec.clone();
                let g = generate_trajectory(&sc).unwrap();
                for t in [0.7, 5.0, 12.3] {
                    let fd = g
                        .state(t - h)
                        .pose
                        .between(&g.state(t + h).pose)
                        .log()
                        .into_vector()
                        / (2.0 * h);
                    let w = g.state(t).twist.vector().clone();
                    let err = (&fd - &w).norm() / w.norm().max(1e-3);
                    assert!(err < 1e-6, "{spec:?} {dim} t={t}: {err:e}");
                }
            }
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        let mut v = serde_json::to_value(Scenario::arena(Dim::Two, 0.1, 0.1)).unwrap();
        v["trajectory"] = serde_json::json!({"kind": "spiral"});
        assert!(matches!(
            Scenario::from_json(&v.to_string()),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn noiseless_ranges_are_exact() {
        let mut sc = Scenario::arena(Dim::Three, 0.5, 0.0);
        sc.trajectory = analytic_kinds()[2].clone();
        let sim = simulate(&sc).unwrap();
        let anchors = sc.anchor_map().unwrap();
        let sensors = sc.sensor_config().unwrap();
        for m in &sim.measurements {
            let f = RangeFactor::new(m.clone(), &anchors, &sensors).unwrap();
            assert!(f.error(&sim.truth.state(m.time).pose).abs() < 1e-12);
        }
    }

    #[test]
    fn measurement_count_and_schedule() {
        let mut sc = Scenario::arena(Dim::Three, 0.5, 0.1);
        sc.duration = 60.0;
        let sim = simulate(&sc).unwrap();
        assert_eq!(sim.measurements.len(), 1020);
        assert_eq!(sim.measurements[4].sensor_id, 1);
        assert_eq!(sim.measurements[4].anchor_id, 1);
        assert_eq!(sim.measurements[24].anchor_id, 0);

        sc.schedule = SchedulePolicy::UniformRandom;
        assert_eq!(simulate(&sc).unwrap().measurements.len(), 1020);
    }

    #[test]
    fn dropout_window_is_empty() {
        let mut sc = Scenario::arena(Dim::Two, 0.1, 0.1);
        sc.duration = 60.0;
        sc.dropouts = vec![(25.0, 30.0)];
        let sim = simulate(&sc).unwrap();
        assert!(sim
            .measurements
            .iter()
            .all(|m| m.time < 25.0 || m.time > 30.0));
        assert!(sim.measurements.len() < 1020 - 80);

        // Outside the window the data equal the run without dropout.
        let mut full = sc.clone();
        full.dropouts.clear();
        let all = simulate(&full).unwrap().measurements;
        let kept: Vec<_> = all
            .into_iter()
            .filter(|m| m.time < 25.0 || m.time > 30.0)
            .collect();
        assert_eq!(kept, sim.measurements);
    }

    #[test]
    fn same_seed_same_output() {
        let mut sc = Scenario::arena(Dim::Three, 0.5, 0.1);
        sc.trajectory = TrajectorySpec::GpSample {
            start: None,
            initial_twist: None,
            qc: Some(vec![0.01; 6]),
            step: 0.01,
        };
        sc.seed = 9;
        let a = simulate(&sc).unwrap();
        let b = simulate(&sc).unwrap();
        assert_eq!(a.measurements, b.measurements);
        assert_eq!(a.truth.state(3.21), b.truth.state(3.21));
        sc.seed = 10;
        assert_ne!(simulate(&sc).unwrap().measurements, a.measurements);
    }

    #[test]
    fn rigid_motion_leaves_ranges_unchanged() {
        let sc = Scenario::arena(Dim::Three, 0.5, 0.0);
        let truth = generate_trajectory(&sc).unwrap();
        let g = Pose::exp(&Tangent::from_slice(&[1.0, -2.0, 0.5, 0.3, -0.7, 1.1]).unwrap());
        let anchors = sc.anchor_map().unwrap();
        let sensors = sc.sensor_config().unwrap();
        for k in 0..100 {
            let t = k as f64 * 0.17;
            let pose = truth.state(t).pose;
            let moved = g.compose(&pose);
            for (_, s) in sensors.iter() {
                for (_, a) in anchors.iter() {
                    let r0 = predict_range(&pose, &s.lever_arm, a);
                    let r1 = predict_range(&moved, &s.lever_arm, &g.act(a));
                    assert!((r0 - r1).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn scenario_validation() {
        let mut sc = Scenario::arena(Dim::Two, 0.1, 0.1);
        sc.dropouts = vec![(25.0, 30.0)];
        assert!(sc.validate().is_err(), "dropout beyond 20 s duration");
        sc.dropouts.clear();
        sc.rate_hz = 0.0;
        assert!(sc.validate().is_err());
        let text = Scenario::arena(Dim::Two, 0.1, 0.1).to_json();
        assert_eq!(
            Scenario::from_json(&text).unwrap(),
            Scenario::arena(Dim::Two, 0.1, 0.1)
        );
        let missing = text.replacen("\"anchors\"", "\"anchorz\"", 1);
        assert!(
            matches!(Scenario::from_json(&missing), Err(crate::Error::Config(m)) if m.contains("anchors"))
        );
    }

    #[test]
    fn gp_sample_follows_the_prior() {
        // Twist increments of the sampled path have the prior's variance.
        let mut sc = Scenario::arena(Dim::Two, 0.1, 0.1);
        sc.duration = 200.0;
        sc.trajectory = TrajectorySpec::GpSample {
            start: None,
            initial_twist: None,
            qc: Some(vec![0.04, 0.04, 0.01]),
            step: 0.05,
        };
        let g = generate_trajectory(&sc).unwrap();
        let mut var = [0.0; 3];
        let n = 4000;
        for k in 0..n {
            let a = g.state(k as f64 * 0.05);
            let b = g.state((k + 1) as f64 * 0.05);
            // Local twist change over one step: ξ̇₂ − ϖ₁ with ξ̇₂ = J_r⁻¹(ξ)·ϖ₂.
            let local = crate::motion_prior::to_local(&a, &b);
            for i in 0..3 {
                var[i] += (local.xi_dot[i] - a.twist[i]).powi(2);
            }
        }
        for (i, q) in [0.04, 0.04, 0.01].iter().enumerate() {
            let v = var[i] / n as f64 / 0.05;
            assert!((v / q - 1.0).abs() < 0.1, "axis {i}: {v} vs {q}");
        }
    }
}
