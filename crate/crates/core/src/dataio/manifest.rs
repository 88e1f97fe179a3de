//! On-disk sequence layout.
//!
//! ```text
//! SEQ/
//!   manifest          TOML key-value header
//!   imu.csv           t,gx,gy,gz,ax,ay,az
//!   gt.csv            t,tx,ty,tz,qw,qx,qy,qz
//!   frame_times.csv   index,t
//!   frames/000000.png 8-bit grayscale, one per frame index
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AbsolutePose, Frame, ImuSample, Scenario, SequenceDataset, StreamMeta};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const MANIFEST_FORMAT: &str = "duvio-sequence/1";
pub const POSE_CONVENTION: &str =
    "target = inverse(T_a) * T_b in frame_a body coordinates; rotation as fixed-axis XYZ Euler angles (R = Rz*Ry*Rx), radians";

const MANIFEST: &str = "manifest";
const IMU_CSV: &str = "imu.csv";
const GT_CSV: &str = "gt.csv";
const FRAME_TIMES_CSV: &str = "frame_times.csv";
const FRAMES_DIR: &str = "frames";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub sequence_id: String,
    pub scenario: Scenario,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub frame_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub rate_tolerance: f64,
    pub time_epoch: String,
    pub pose_convention: String,
}

fn frame_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{index:06}.png"))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Load {
            path: path.to_path_buf(),
            message: "file not found".into(),
        })
    }
}

fn read_rows(path: &Path, expected_header: &[&str]) -> Result<Vec<Vec<f64>>> {
    require(path)?;
    let load_err = |message: String| Error::Load {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| load_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| load_err(e.to_string()))?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != expected_header {
        return Err(load_err(format!("header {got:?}, expected {expected_header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| load_err(e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| load_err(format!("row {i}: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads and validates a sequence directory (or its `manifest` file).
pub fn load_sequence(path: &Path) -> Result<SequenceDataset> {
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    require(&manifest_path)?;
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Load {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Load {
            path: manifest_path,
            message: format!("unsupported format `{}`", manifest.format),
        });
    }

    let imu_stream = read_rows(&dir.join(IMU_CSV), &["t", "gx", "gy", "gz", "ax", "ay", "az"])?
        .into_iter()
        .map(|r| ImuSample::new(r[0], [r[1], r[2], r[3]], [r[4], r[5], r[6]]))
        .collect();
    let reference_poses = read_rows(&dir.join(GT_CSV), &["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])?
        .into_iter()
        .map(|r| AbsolutePose::from_wxyz(r[0], [r[1], r[2], r[3]], [r[4], r[5], r[6], r[7]]))
        .collect();
    let times = read_rows(&dir.join(FRAME_TIMES_CSV), &["index", "t"])?;
    if times.len() != manifest.frame_count {
        return Err(Error::Load {
            path: dir.join(FRAME_TIMES_CSV),
            message: format!("{} rows, manifest declares {} frames", times.len(), manifest.frame_count),
        });
    }
    let mut frames = Vec::with_capacity(times.len());
    for row in &times {
        let index = row[0] as usize;
        let file = frame_file(&dir, index);
        require(&file)?;
        let img = image::open(&file)
            .map_err(|e| Error::Load {
                path: file.clone(),
                message: e.to_string(),
            })?
            .into_luma8();
        frames.push(Frame::new(row[1], Raster::from_gray8(&img)));
    }

    let ds = SequenceDataset {
        sequence_id: manifest.sequence_id,
        scenario: manifest.scenario,
        meta: StreamMeta {
            frame_rate_hz: manifest.frame_rate_hz,
            imu_rate_hz: manifest.imu_rate_hz,
            rate_tolerance: manifest.rate_tolerance,
            time_epoch: manifest.time_epoch,
        },
        frames,
        imu_stream,
        reference_poses,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `dataset` into `dir` (created if needed). Frames are stored as
/// 8-bit PNG, so intensities off the `k/255` grid are rounded.
pub fn save_sequence(dataset: &SequenceDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(FRAMES_DIR)).map_err(|e| Error::io(dir, e))?;
    let (width, height) = dataset.frames.first().map(|f| f.image.dims()).unwrap_or((0, 0));
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        sequence_id: dataset.sequence_id.clone(),
        scenario: dataset.scenario,
        frame_count: dataset.frames.len(),
        width,
        height,
        frame_rate_hz: dataset.meta.frame_rate_hz,
        imu_rate_hz: dataset.meta.imu_rate_hz,
        rate_tolerance: dataset.meta.rate_tolerance,
        time_epoch: dataset.meta.time_epoch.clone(),
        pose_convention: POSE_CONVENTION.into(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    write_rows(
        &dir.join(IMU_CSV),
        &["t", "gx", "gy", "gz", "ax", "ay", "az"],
        dataset.imu_stream.iter().map(|s| {
            let mut r = vec![s.timestamp];
            r.extend(s.channels());
            r
        }),
    )?;
    write_rows(
        &dir.join(GT_CSV),
        &["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"],
        dataset.reference_poses.iter().map(|p| {
            let t = p.translation;
            let q = p.wxyz();
            vec![p.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
        }),
    )?;
    write_rows(
        &dir.join(FRAME_TIMES_CSV),
        &["index", "t"],
        dataset.frames.iter().enumerate().map(|(i, f)| vec![i as f64, f.timestamp]),
    )?;
    for (i, f) in dataset.frames.iter().enumerate() {
        let path = frame_file(dir, i);
        f.image.to_gray8().save(&path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;

    fn tiny(n_frames: usize, n_imu: usize) -> SequenceDataset {
        SequenceDataset {
            sequence_id: "t01".into(),
            scenario: Scenario::Original,
            meta: StreamMeta::default(),
            frames: (0..n_frames)
                .map(|i| Frame::new(i as f64 * 0.05, Raster::from_fn(4, 2, |x, y| ((x + y + i) % 3) as f64 / 2.0).quantize8()))
                .collect(),
            imu_stream: (0..n_imu)
                .map(|i| ImuSample::new(i as f64 * 0.005, [0.1, 0.2, 0.3], [0.0, 0.0, 9.81]))
                .collect(),
            reference_poses: vec![
                AbsolutePose::new(0.0, Default::default(), Quat::identity()),
                AbsolutePose::new(0.1, Default::default(), Quat::identity()),
            ],
        }
    }

    #[test]
    fn three_frames_twenty_one_imu_rows_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(3, 21);
        save_sequence(&ds, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.imu_stream.len(), 21);
        assert_eq!(back, ds);
    }

    #[test]
    fn imu_regression_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny(3, 21);
        ds.imu_stream[5].timestamp = ds.imu_stream[3].timestamp;
        save_sequence(&ds, dir.path()).unwrap();
        match load_sequence(dir.path()) {
            Err(Error::NonMonotonic { stream, index }) => {
                assert_eq!(stream, "imu");
                assert_eq!(index, 5);
            }
            other => panic!("expected monotonicity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&tiny(3, 21), dir.path()).unwrap();
        fs::remove_file(dir.path().join("frames/000001.png")).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000001.png"), "{err}");
        fs::remove_file(dir.path().join("gt.csv")).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("gt.csv"), "{err}");
    }

    #[test]
    fn unknown_manifest_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&tiny(3, 21), dir.path()).unwrap();
        let p = dir.path().join("manifest");
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("bogus = 1\n");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Load { .. })));
    }
}
