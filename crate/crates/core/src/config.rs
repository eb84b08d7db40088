//! Problem configuration: geometry, motion prior, solver and preprocessing.
//!
//! Configurations are read from JSON. Unknown fields are ignored so a
//! simulation scenario file can double as the estimator configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::lie::Dim;
use crate::motion_prior::PriorParams;
use crate::range_model::{
    check_observability, AnchorId, AnchorMap, Calibration, ObservabilityReport, OutlierPolicy,
    SensorConfig, SensorId,
};

/// Default diagonal of `Qc` per translational / rotational axis.
pub const DEFAULT_QC_TRANSLATION: f64 = 0.05;
pub const DEFAULT_QC_ROTATION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustKernel {
    None,
    /// Huber loss on the whitened range error; `width` in standard deviations.
    Huber {
        width: f64,
    },
}

/// Optimizer, smoother and graph-construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step counts as converged.
    pub cost_tolerance: f64,
    /// Infinity norm of the step below which the optimizer stops.
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub damping_scale: f64,
    pub max_damping: f64,
    pub robust_kernel: RobustKernel,
    /// Fixed-lag window `δt_fls` (s).
    pub fls_window: f64,
    /// Optimizer iterations per fixed-lag update.
    pub fls_max_iterations: usize,
    /// Measurements closer than this (s) share one knot.
    pub knot_merge_tolerance: f64,
    /// Extra knots are inserted on a grid of this spacing (s) inside longer
    /// gaps between measurements; `None` keeps strictly per-measurement knots.
    pub max_knot_gap: Option<f64>,
    /// Standard deviation of the weak prior pinning the first knot.
    pub gauge_sigma: f64,
    /// Measurements used for the static multilateration of the first knot.
    pub init_measurements: usize,
    /// Initialize batch problems with a forward fixed-lag pass instead of a
    /// constant-velocity extrapolation of the first knot.
    pub warm_start: bool,
    /// Optimizer iterations per update during the warm-start pass; the batch
    /// solve polishes the result, so a rough window fit suffices.
    pub warm_start_iterations: usize,
    /// Standard deviations of the fixed-lag smoother's prior on its first
    /// knot, centred on the static initialization: position (m),
    /// orientation (rad), linear (m/s) and angular (rad/s) velocity.
    pub fls_initial_sigma: [f64; 4],
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 100,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-10,
            initial_damping: 1e-4,
            damping_scale: 10.0,
            max_damping: 1e10,
            robust_kernel: RobustKernel::None,
            fls_window: 5.0,
            fls_max_iterations: 10,
            knot_merge_tolerance: 1e-4,
            max_knot_gap: Some(0.25),
            gauge_sigma: 1e6,
            init_measurements: 20,
            warm_start: true,
            warm_start_iterations: 3,
            fls_initial_sigma: [1.0, 1.5, 1.0, 1.0],
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cost_tolerance", self.cost_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("initial_damping", self.initial_damping),
            ("max_damping", self.max_damping),
            ("fls_window", self.fls_window),
            ("knot_merge_tolerance", self.knot_merge_tolerance),
            ("gauge_sigma", self.gauge_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(format!(
                    "solver.{name} must be positive, got {v}"
                )));
            }
        }
        if self
            .fls_initial_sigma
            .iter()
            .any(|s| !(*s > 0.0) || !s.is_finite())
        {
            return Err(config_err(
                "solver.fls_initial_sigma entries must be positive",
            ));
        }
        if !(self.damping_scale > 1.0) {
            return Err(config_err("solver.damping_scale must exceed 1"));
        }
        if self.max_iterations == 0
            || self.fls_max_iterations == 0
            || self.warm_start_iterations == 0
        {
            return Err(config_err("solver iteration limits must be positive"));
        }
        if let Some(gap) = self.max_knot_gap {
            if !(gap > self.knot_merge_tolerance) {
                return Err(config_err(
                    "solver.max_knot_gap must exceed the merge tolerance",
                ));
            }
        }
        if let RobustKernel::Huber { width } = self.robust_kernel {
            if !(width > 0.0) {
                return Err(config_err("Huber width must be positive"));
            }
        }
        Ok(())
    }
}

/// Range preprocessing: bias removal and outlier gating.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessPolicy {
    pub outliers: OutlierPolicy,
    /// Per-pair constant biases, keyed `"sensor:anchor"`.
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub id: AnchorId,
    pub position: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEntry {
    pub id: SensorId,
    pub lever_arm: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    0.1
}

/// Diagonal of the acceleration power-spectral density `Qc`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub qc: Option<Vec<f64>>,
}

impl PriorSpec {
    pub fn to_params(&self, dim: Dim) -> Result<PriorParams> {
        let qc = match &self.qc {
            Some(v) => {
                if v.len() != dim.dof() {
                    return Err(config_err(format!(
                        "prior.qc has {} entries, expected {} for {dim}",
                        v.len(),
                        dim.dof()
                    )));
                }
                v.clone()
            }
            None => default_qc(dim),
        };
        PriorParams::diagonal(&qc)
    }
}

pub fn default_qc(dim: Dim) -> Vec<f64> {
    let mut qc = vec![DEFAULT_QC_TRANSLATION; dim.space()];
    qc.extend(std::iter::repeat_n(DEFAULT_QC_ROTATION, dim.rot_dof()));
    qc
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawProblemConfig {
    dim: Dim,
    anchors: Vec<AnchorEntry>,
    sensors: Vec<SensorEntry>,
    #[serde(default)]
    prior: PriorSpec,
    #[serde(default)]
    solver: SolverSettings,
    #[serde(default)]
    preprocess: PreprocessPolicy,
    #[serde(default)]
    allow_unobservable: bool,
}

/// Everything the estimator needs besides the measurements.
#[derive(Debug, Clone)]
pub struct ProblemConfig {
    pub dim: Dim,
    pub anchors: AnchorMap,
    pub sensors: SensorConfig,
    pub prior: PriorParams,
    pub solver: SolverSettings,
    pub preprocess: PreprocessPolicy,
    /// Run even when [`check_observability`] reports problems.
    pub allow_unobservable: bool,
}

impl ProblemConfig {
    pub fn new(anchors: AnchorMap, sensors: SensorConfig, prior: PriorParams) -> Result<Self> {
        let dim = anchors.dim();
        if sensors.dim() != dim || prior.dim() != dim {
            return Err(config_err(
                "anchors, sensors and prior disagree on dimension",
            ));
        }
        Ok(ProblemConfig {
            dim,
            anchors,
            sensors,
            prior,
            solver: SolverSettings::default(),
            preprocess: PreprocessPolicy::default(),
            allow_unobservable: false,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawProblemConfig =
            serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            crate::Error::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let raw = RawProblemConfig {
            dim: self.dim,
            anchors: self
                .anchors
                .iter()
                .map(|(id, p)| AnchorEntry {
                    id,
                    position: p.iter().copied().collect(),
                })
                .collect(),
            sensors: self
                .sensors
                .iter()
                .map(|(id, s)| SensorEntry {
                    id,
                    lever_arm: s.lever_arm.iter().copied().collect(),
                    sigma: s.sigma,
                })
                .collect(),
            prior: PriorSpec {
                qc: Some(self.prior.qc().diagonal().iter().copied().collect()),
            },
            solver: self.solver.clone(),
            preprocess: self.preprocess.clone(),
            allow_unobservable: self.allow_unobservable,
        };
        serde_json::to_string_pretty(&raw).expect("configuration serializes")
    }

    fn from_raw(raw: RawProblemConfig) -> Result<Self> {
        let dim = raw.dim;
        let anchors = AnchorMap::new(dim, raw.anchors.into_iter().map(|a| (a.id, a.position)))?;
        let sensors = SensorConfig::new(
            dim,
            raw.sensors
                .into_iter()
                .map(|s| (s.id, s.lever_arm, s.sigma)),
        )?;
        let prior = raw.prior.to_params(dim)?;
        raw.solver.validate()?;
        Ok(ProblemConfig {
            dim,
            anchors,
            sensors,
            prior,
            solver: raw.solver,
            preprocess: raw.preprocess,
            allow_unobservable: raw.allow_unobservable,
        })
    }

    pub fn check_observability(&self) -> ObservabilityReport {
        check_observability(&self.anchors, &self.sensors)
    }

    /// Validates settings and geometry; geometry problems are fatal unless
    /// `allow_unobservable` is set.
    pub fn validate(&self) -> Result<ObservabilityReport> {
        self.solver.validate()?;
        let report = self.check_observability();
        if !report.passes() {
            for m in &report.messages {
                log::warn!("{m}");
            }
            if !self.allow_unobservable {
                let null_dim =
                    if report.zero_lever_arms || report.collinear_sensors || report.too_few_sensors
                    {
                        self.dim.rot_dof()
                    } else {
                        self.dim.space()
                    };
                return Err(crate::Error::Unobservable { null_dim });
            }
        }
        Ok(report)
    }
}
