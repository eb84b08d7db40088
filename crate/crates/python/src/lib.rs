//! Python bindings: poses, scenarios, simulation, estimation and evaluation.

use nalgebra::DVector;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rangepose::config::ProblemConfig;
use rangepose::eval::Estimate;
use rangepose::io::{Orientation, StateRecord};
use rangepose::range_model::RangeMeasurement;
use rangepose::sim::{self, Scenario};
use rangepose::{Alignment, Dim, Error, EstimationMode, Pose, Tangent};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Unobservable { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn dim(d: usize) -> PyResult<Dim> {
    match d {
        2 => Ok(Dim::Two),
        3 => Ok(Dim::Three),
        _ => Err(PyValueError::new_err(format!(
            "dimension must be 2 or 3, got {d}"
        ))),
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Rigid-body pose in SE(2) or SE(3).
#[pyclass(name = "Pose", module = "rangepose_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPose(Pose);

#[pymethods]
impl PyPose {
    /// Exponential map of a tangent `[rho; phi]` (length 3 or 6).
    #[staticmethod]
    fn exp(xi: Vec<f64>) -> PyResult<Self> {
        Ok(PyPose(Pose::exp(
            &Tangent::from_slice(&xi).map_err(py_err)?,
        )))
    }

    #[staticmethod]
    fn identity(dimension: usize) -> PyResult<Self> {
        Ok(PyPose(Pose::identity(dim(dimension)?)))
    }

    fn log(&self) -> Vec<f64> {
        self.0.log().into_vector().iter().copied().collect()
    }

    /// Homogeneous matrix as nested lists.
    fn matrix(&self) -> Vec<Vec<f64>> {
        rows(&self.0.matrix())
    }

    #[getter]
    fn position(&self) -> Vec<f64> {
        self.0.position().iter().copied().collect()
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.0.dim().space()
    }

    fn compose(&self, other: &PyPose) -> PyResult<Self> {
        if other.0.dim() != self.0.dim() {
            return Err(PyValueError::new_err("poses differ in dimension"));
        }
        Ok(PyPose(self.0.compose(&other.0)))
    }

    fn inverse(&self) -> Self {
        PyPose(self.0.inverse())
    }

    /// Transforms a point from the body frame to the world frame.
    fn act(&self, point: Vec<f64>) -> PyResult<Vec<f64>> {
        if point.len() != self.0.dim().space() {
            return Err(PyValueError::new_err("point dimension mismatch"));
        }
        Ok(self
            .0
            .act(&DVector::from_vec(point))
            .iter()
            .copied()
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Pose(log={:?})", self.log())
    }
}

/// One range sample between a robot sensor and an anchor.
#[pyclass(
    name = "RangeMeasurement",
    module = "rangepose_py",
    get_all,
    set_all,
    from_py_object
)]
#[derive(Clone)]
struct PyMeasurement {
    t: f64,
    sensor_id: u32,
    anchor_id: u32,
    range: f64,
    sigma: f64,
}

#[pymethods]
impl PyMeasurement {
    #[new]
    fn new(t: f64, sensor_id: u32, anchor_id: u32, range: f64, sigma: f64) -> Self {
        PyMeasurement {
            t,
            sensor_id,
            anchor_id,
            range,
            sigma,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "RangeMeasurement(t={}, sensor_id={}, anchor_id={}, range={}, sigma={})",
            self.t, self.sensor_id, self.anchor_id, self.range, self.sigma
        )
    }
}

impl PyMeasurement {
    fn from_core(m: &RangeMeasurement) -> Self {
        PyMeasurement::new(m.time, m.sensor_id, m.anchor_id, m.range, m.sigma())
    }

    fn to_core(&self) -> RangeMeasurement {
        RangeMeasurement::new(
            self.t,
            self.sensor_id,
            self.anchor_id,
            self.range,
            self.sigma,
        )
    }
}

/// Pose and twist at a time, with the covariance of `[δξ; δϖ]` when known.
#[pyclass(
    name = "StateEstimate",
    module = "rangepose_py",
    frozen,
    from_py_object
)]
#[derive(Clone)]
struct PyState(Estimate);

#[pymethods]
impl PyState {
    #[getter]
    fn t(&self) -> f64 {
        self.0.knot.time
    }

    #[getter]
    fn pose(&self) -> PyPose {
        PyPose(self.0.knot.pose.clone())
    }

    #[getter]
    fn position(&self) -> Vec<f64> {
        self.0.knot.pose.position().iter().copied().collect()
    }

    /// Heading angle (2D) or quaternion `[w, x, y, z]` (3D), as a list.
    #[getter]
    fn orientation(&self) -> Vec<f64> {
        match Orientation::from_rotation(self.0.knot.pose.rotation()) {
            Orientation::Angle(a) => vec![a],
            Orientation::Quaternion(q) => q.to_vec(),
        }
    }

    #[getter]
    fn twist(&self) -> Vec<f64> {
        self.0.knot.twist.vector().iter().copied().collect()
    }

    #[getter]
    fn covariance(&self) -> Option<Vec<Vec<f64>>> {
        self.0.covariance.as_ref().map(rows)
    }

    /// The JSONL record the CLI writes for this state.
    fn to_json(&self) -> PyResult<String> {
        let rec = StateRecord::from_knot(&self.0.knot, self.0.covariance.as_ref());
        serde_json::to_string(&rec).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "StateEstimate(t={}, position={:?})",
            self.t(),
            self.position()
        )
    }
}

fn states(v: &[Estimate]) -> Vec<PyState> {
    v.iter().cloned().map(PyState).collect()
}

/// Simulation study: arena, sensors, trajectory, schedule and noise.
#[pyclass(name = "Scenario", module = "rangepose_py", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario(Scenario);

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Scenario::from_json(text).map(PyScenario).map_err(py_err)
    }

    /// Default arena with sensors at `lever` metres and range noise `noise_std`.
    #[staticmethod]
    #[pyo3(signature = (dimension, lever=0.5, noise_std=0.1))]
    fn arena(dimension: usize, lever: f64, noise_std: f64) -> PyResult<Self> {
        Ok(PyScenario(Scenario::arena(
            dim(dimension)?,
            lever,
            noise_std,
        )))
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    /// Problem configuration for the estimator, as JSON.
    fn problem_config(&self) -> PyResult<String> {
        Ok(self.0.problem_config().map_err(py_err)?.to_json())
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration
    }

    #[setter]
    fn set_duration(&mut self, v: f64) {
        self.0.duration = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.0.seed = v;
    }

    #[getter]
    fn noise_std(&self) -> f64 {
        self.0.noise_std
    }

    #[setter]
    fn set_noise_std(&mut self, v: f64) {
        self.0.noise_std = v;
    }

    /// Trajectory spec as JSON, e.g. `{"kind": "circle", "radius": 2.0}`.
    #[setter]
    fn set_trajectory(&mut self, spec: &str) -> PyResult<()> {
        self.0.trajectory =
            serde_json::from_str(spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(())
    }

    fn simulate(&self, py: Python<'_>) -> PyResult<PySimulation> {
        let scenario = self.0.clone();
        let run = py
            .detach(move || sim::simulate(&scenario))
            .map_err(py_err)?;
        Ok(PySimulation(run))
    }
}

/// Simulated measurements and the ground truth that produced them.
#[pyclass(name = "Simulation", module = "rangepose_py", frozen)]
struct PySimulation(sim::Simulation);

#[pymethods]
impl PySimulation {
    #[getter]
    fn measurements(&self) -> Vec<PyMeasurement> {
        self.0
            .measurements
            .iter()
            .map(PyMeasurement::from_core)
            .collect()
    }

    /// Ground-truth states at the given times.
    fn truth(&self, times: Vec<f64>) -> Vec<PyState> {
        self.0
            .truth
            .sample(&times)
            .into_iter()
            .map(|knot| {
                PyState(Estimate {
                    knot,
                    covariance: None,
                })
            })
            .collect()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.truth.duration()
    }
}

/// Output of [`estimate`].
#[pyclass(name = "EstimateResult", module = "rangepose_py", frozen)]
struct PyEstimateResult(rangepose::EstimateOutput);

#[pymethods]
impl PyEstimateResult {
    /// Batch: every knot. Fixed-lag: the newest knot after each measurement.
    #[getter]
    fn estimates(&self) -> Vec<PyState> {
        states(&self.0.estimates)
    }

    /// Fixed-lag only: each knot as it left the window.
    #[getter]
    fn smoothed(&self) -> Vec<PyState> {
        states(&self.0.smoothed)
    }

    #[getter]
    fn status(&self) -> Option<String> {
        self.0.report.as_ref().map(|r| format!("{:?}", r.status))
    }

    #[getter]
    fn iterations(&self) -> Option<usize> {
        self.0.report.as_ref().map(|r| r.iterations)
    }

    #[getter]
    fn final_cost(&self) -> Option<f64> {
        self.0.report.as_ref().map(|r| r.final_cost)
    }

    #[getter]
    fn rejected(&self) -> usize {
        self.0.rejected
    }

    #[getter]
    fn runtime_seconds(&self) -> f64 {
        self.0.runtime_seconds
    }
}

/// Runs the estimator. `config` is problem-configuration (or scenario) JSON;
/// `mode` is "batch" or "fls".
#[pyfunction]
#[pyo3(signature = (config, measurements, mode="batch"))]
fn estimate(
    py: Python<'_>,
    config: &str,
    measurements: Vec<PyMeasurement>,
    mode: &str,
) -> PyResult<PyEstimateResult> {
    let config = ProblemConfig::from_json(config).map_err(py_err)?;
    let mode: EstimationMode = mode.parse().map_err(py_err)?;
    let meas: Vec<RangeMeasurement> = measurements.iter().map(PyMeasurement::to_core).collect();
    py.detach(move || rangepose::estimate(&meas, &config, mode))
        .map(PyEstimateResult)
        .map_err(py_err)
}

/// Accuracy and consistency of estimates against ground truth.
#[pyclass(name = "EvaluationReport", module = "rangepose_py", frozen, get_all)]
struct PyReport {
    samples: usize,
    position_rmse: f64,
    orientation_rmse: f64,
    times: Vec<f64>,
    position_errors: Vec<Vec<f64>>,
    orientation_errors: Vec<f64>,
    axis_coverage: Option<Vec<f64>>,
    coverage: Option<f64>,
    nees: Option<Vec<f64>>,
}

/// `alignment` is "none" (exact timestamps) or "time-interpolated".
#[pyfunction]
#[pyo3(signature = (estimates, truth, alignment="none"))]
fn evaluate(estimates: Vec<PyState>, truth: Vec<PyState>, alignment: &str) -> PyResult<PyReport> {
    let alignment: Alignment = alignment.parse().map_err(py_err)?;
    let est: Vec<Estimate> = estimates.into_iter().map(|s| s.0).collect();
    let truth: Vec<_> = truth.into_iter().map(|s| s.0.knot).collect();
    let r = rangepose::evaluate(&est, &truth, alignment).map_err(py_err)?;
    Ok(PyReport {
        samples: r.samples,
        position_rmse: r.position_rmse,
        orientation_rmse: r.orientation_rmse,
        times: r.times,
        position_errors: r.position_errors,
        orientation_errors: r.orientation_errors,
        axis_coverage: r.axis_coverage,
        coverage: r.coverage,
        nees: r.nees,
    })
}

#[pymodule]
fn rangepose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyMeasurement>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyEstimateResult>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
