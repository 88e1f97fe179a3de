//! Sequence ingestion, reference interpolation, multi-rate synchronisation
//! and training-window construction.

mod export;
mod interpolate;
mod manifest;
mod split;
mod windows;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use crate::geometry::{AbsolutePose, PoseDelta};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::raster::Raster;

pub use export::{export_windows, read_exported_windows, WindowIndex};
pub use interpolate::interpolate_reference;
pub use manifest::{load_sequence, save_sequence, Manifest, MANIFEST_FORMAT, POSE_CONVENTION};
pub use split::{retain_fraction, split_dataset, Partition, RetainMode, SplitSpec};
pub use windows::{build_windows, resample_imu, IMU_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// rad/s, body frame
    pub angular_velocity: Vec3,
    /// m/s², body frame (specific force)
    pub linear_acceleration: Vec3,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: [f64; 3], accel: [f64; 3]) -> Self {
        Self {
            timestamp,
            angular_velocity: Vec3::from(gyro),
            linear_acceleration: Vec3::from(accel),
        }
    }

    /// Channel order `(gx, gy, gz, ax, ay, az)`.
    pub fn channels(&self) -> [f64; 6] {
        let (g, a) = (self.angular_velocity, self.linear_acceleration);
        [g.x, g.y, g.z, a.x, a.y, a.z]
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite() && self.channels().iter().all(|v| v.is_finite())
    }
}

/// A timestamped mono image. The raster is shared so windows can hold
/// frames without copying pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub image: Arc<Raster>,
}

impl Frame {
    pub fn new(timestamp: f64, image: Raster) -> Self {
        Self {
            timestamp,
            image: Arc::new(image),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Original,
    Distortion,
    Turbid,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Original, Scenario::Distortion, Scenario::Turbid];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Original => "original",
            Scenario::Distortion => "distortion",
            Scenario::Turbid => "turbid",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Scenario::Original),
            "distortion" => Ok(Scenario::Distortion),
            "turbid" => Ok(Scenario::Turbid),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}` (allowed: original, distortion, turbid)"
            ))),
        }
    }
}

/// Declared stream properties of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub frame_rate_hz: f64,
    pub imu_rate_hz: f64,
    /// Relative tolerance on the measured rates.
    pub rate_tolerance: f64,
    /// Free-text description of the timestamp origin.
    pub time_epoch: String,
}

impl Default for StreamMeta {
    fn default() -> Self {
        Self {
            frame_rate_hz: 20.0,
            imu_rate_hz: 200.0,
            rate_tolerance: 0.1,
            time_epoch: "seconds since sequence start".into(),
        }
    }
}

/// One trajectory: frames, IMU stream and (possibly sparse) reference poses.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequence_id: String,
    pub scenario: Scenario,
    pub meta: StreamMeta,
    pub frames: Vec<Frame>,
    pub imu_stream: Vec<ImuSample>,
    pub reference_poses: Vec<AbsolutePose>,
}

fn check_increasing(stream: &str, times: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in times.enumerate() {
        if !t.is_finite() {
            return Err(Error::Validation(format!("{stream} timestamp at row {i} is not finite")));
        }
        if t <= prev {
            return Err(Error::NonMonotonic {
                stream: stream.into(),
                index: i,
            });
        }
        prev = t;
    }
    Ok(())
}

fn check_rate(name: &str, times: &[f64], declared: f64, tolerance: f64) -> Result<()> {
    if times.len() < 2 || declared <= 0.0 {
        return Ok(());
    }
    let measured = (times.len() - 1) as f64 / (times[times.len() - 1] - times[0]);
    if ((measured - declared) / declared).abs() > tolerance {
        return Err(Error::Validation(format!(
            "{name} rate {measured:.3} Hz differs from declared {declared} Hz by more than {:.1}%",
            tolerance * 100.0
        )));
    }
    Ok(())
}

impl SequenceDataset {
    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Validation(format!("sequence {} has no frames", self.sequence_id)));
        }
        check_increasing("frame", self.frames.iter().map(|f| f.timestamp))?;
        check_increasing("imu", self.imu_stream.iter().map(|s| s.timestamp))?;
        check_increasing("reference", self.reference_poses.iter().map(|p| p.timestamp))?;
        let dims = self.frames[0].image.dims();
        for (i, f) in self.frames.iter().enumerate() {
            if f.image.dims() != dims {
                return Err(Error::Validation(format!(
                    "frame {i} is {:?}, expected {:?}",
                    f.image.dims(),
                    dims
                )));
            }
            if !f.image.in_unit_range() {
                return Err(Error::Validation(format!("frame {i} has intensities outside [0,1]")));
            }
        }
        if let Some(i) = self.imu_stream.iter().position(|s| !s.is_finite()) {
            return Err(Error::Validation(format!("imu row {i} is not finite")));
        }
        for (i, p) in self.reference_poses.iter().enumerate() {
            let norm = p.rotation.quaternion().norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "reference row {i} quaternion norm {norm} is not unit"
                )));
            }
            if !p.translation.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("reference row {i} is not finite")));
            }
        }
        let ft: Vec<f64> = self.frames.iter().map(|f| f.timestamp).collect();
        check_rate("frame", &ft, self.meta.frame_rate_hz, self.meta.rate_tolerance)?;
        let it: Vec<f64> = self.imu_stream.iter().map(|s| s.timestamp).collect();
        check_rate("imu", &it, self.meta.imu_rate_hz, self.meta.rate_tolerance)?;
        Ok(())
    }

    pub fn frame_times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    /// Reference poses interpolated at every frame timestamp.
    pub fn frame_poses(&self) -> Result<Vec<AbsolutePose>> {
        interpolate_reference(&self.reference_poses, &self.frame_times())
    }

    /// Copy with every frame raster replaced by `f(raster)`.
    pub fn map_frames(&self, mut f: impl FnMut(usize, &Raster) -> Raster) -> SequenceDataset {
        let mut out = self.clone();
        for (i, frame) in out.frames.iter_mut().enumerate() {
            frame.image = Arc::new(f(i, &frame.image));
        }
        out
    }
}

/// Training unit: two consecutive frames, the 11 IMU samples spanning them
/// and the relative pose of `frame_b` in `frame_a`'s body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub frame_a: Frame,
    pub frame_b: Frame,
    pub imu: Vec<ImuSample>,
    pub target: PoseDelta,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_parse_lists_allowed_values() {
        let err = "foggy".parse::<Scenario>().unwrap_err().to_string();
        assert!(err.contains("original") && err.contains("turbid"));
        assert_eq!("turbid".parse::<Scenario>().unwrap(), Scenario::Turbid);
    }

    #[test]
    fn increasing_check_reports_first_offender() {
        let err = check_increasing("imu", [0.0, 1.0, 2.0, 1.5, 1.0].into_iter()).unwrap_err();
        assert!(matches!(err, Error::NonMonotonic { index: 3, .. }));
    }
}
