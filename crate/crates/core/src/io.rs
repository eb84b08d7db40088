//! JSONL files for measurements, ground truth and estimates. Every record
//! carries `schema_version`; writes go through a temporary file and a rename.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Estimate;
use crate::lie::{Dim, Pose, Rotation};
use crate::motion_prior::{StateKnot, Twist};
use crate::range_model::{AnchorId, RangeMeasurement, SensorId};

pub const SCHEMA_VERSION: u32 = 1;

fn schema() -> u32 {
    SCHEMA_VERSION
}

/// Writes `bytes` to `path` atomically: readers see the old file or the
/// complete new one, never a partial write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Parses one record per non-blank line, reporting the line number of a bad record.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

fn check_schema(version: u32, what: &str) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{what} record has schema_version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub t: f64,
    pub sensor_id: SensorId,
    pub anchor_id: AnchorId,
    pub range: f64,
    pub sigma: f64,
}

impl From<&RangeMeasurement> for MeasurementRecord {
    fn from(m: &RangeMeasurement) -> Self {
        MeasurementRecord {
            schema_version: SCHEMA_VERSION,
            t: m.time,
            sensor_id: m.sensor_id,
            anchor_id: m.anchor_id,
            range: m.range,
            sigma: m.sigma(),
        }
    }
}

impl MeasurementRecord {
    pub fn to_measurement(&self) -> Result<RangeMeasurement> {
        check_schema(self.schema_version, "measurement")?;
        let m = RangeMeasurement::new(
            self.t,
            self.sensor_id,
            self.anchor_id,
            self.range,
            self.sigma,
        );
        m.validate()?;
        Ok(m)
    }
}

/// Heading angle (2D) or unit quaternion `[w, x, y, z]` (3D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Orientation {
    Angle(f64),
    Quaternion([f64; 4]),
}

impl Orientation {
    pub fn from_rotation(r: &Rotation) -> Self {
        match r.dim() {
            Dim::Two => Orientation::Angle(r.planar_angle()),
            Dim::Three => Orientation::Quaternion(r.to_quaternion().expect("3D rotation")),
        }
    }

    pub fn to_rotation(&self) -> Result<Rotation> {
        match *self {
            Orientation::Angle(a) => Ok(Rotation::from_angle(a)),
            Orientation::Quaternion(q) => Rotation::from_quaternion(q),
        }
    }
}

/// Pose and twist at a time, optionally with the row-major covariance of the
/// state perturbation `[δξ; δϖ]`. Used for ground truth and estimates alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub t: f64,
    pub position: Vec<f64>,
    pub orientation: Orientation,
    pub twist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<f64>>,
}

impl StateRecord {
    pub fn from_knot(k: &StateKnot, covariance: Option<&DMatrix<f64>>) -> Self {
        StateRecord {
            schema_version: SCHEMA_VERSION,
            t: k.time,
            position: k.pose.position().iter().copied().collect(),
            orientation: Orientation::from_rotation(k.pose.rotation()),
            twist: k.twist.iter().copied().collect(),
            // nalgebra stores column-major; the transpose's storage is row-major.
            covariance: covariance.map(|c| c.transpose().iter().copied().collect()),
        }
    }

    pub fn to_knot(&self) -> Result<StateKnot> {
        check_schema(self.schema_version, "state")?;
        let rotation = self.orientation.to_rotation()?;
        if self.position.len() != rotation.dim().space() {
            return Err(Error::Format(format!(
                "record at t={} has a {}-vector position for a {} orientation",
                self.t,
                self.position.len(),
                rotation.dim()
            )));
        }
        let pose = Pose::new(rotation, DVector::from_column_slice(&self.position))?;
        let twist = Twist::with_bound(DVector::from_column_slice(&self.twist), f64::INFINITY)?;
        StateKnot::new(self.t, pose, twist)
    }

    pub fn to_estimate(&self) -> Result<Estimate> {
        let knot = self.to_knot()?;
        let s = knot.dim().state_dim();
        let covariance = match &self.covariance {
            None => None,
            Some(c) if c.len() == s * s => Some(DMatrix::from_row_slice(s, s, c)),
            Some(c) => {
                return Err(Error::Format(format!(
                    "record at t={} has {} covariance entries, expected {}",
                    self.t,
                    c.len(),
                    s * s
                )))
            }
        };
        Ok(Estimate { knot, covariance })
    }
}

pub fn write_measurements(path: &Path, m: &[RangeMeasurement]) -> Result<()> {
    let records: Vec<MeasurementRecord> = m.iter().map(MeasurementRecord::from).collect();
    write_jsonl(path, &records)
}

pub fn read_measurements(path: &Path) -> Result<Vec<RangeMeasurement>> {
    read_jsonl::<MeasurementRecord>(path)?
        .iter()
        .map(MeasurementRecord::to_measurement)
        .collect()
}

pub fn write_states(path: &Path, knots: &[StateKnot]) -> Result<()> {
    let records: Vec<StateRecord> = knots
        .iter()
        .map(|k| StateRecord::from_knot(k, None))
        .collect();
    write_jsonl(path, &records)
}

pub fn read_states(path: &Path) -> Result<Vec<StateKnot>> {
    read_jsonl::<StateRecord>(path)?
        .iter()
        .map(StateRecord::to_knot)
        .collect()
}

pub fn estimate_records(estimates: &[Estimate]) -> Vec<StateRecord> {
    estimates
        .iter()
        .map(|e| StateRecord::from_knot(&e.knot, e.covariance.as_ref()))
        .collect()
}

pub fn write_estimates(path: &Path, estimates: &[Estimate]) -> Result<()> {
    write_jsonl(path, &estimate_records(estimates))
}

pub fn read_estimates(path: &Path) -> Result<Vec<Estimate>> {
    read_jsonl::<StateRecord>(path)?
        .iter()
        .map(StateRecord::to_estimate)
        .collect()
}
