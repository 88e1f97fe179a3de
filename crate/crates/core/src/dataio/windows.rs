use super::{ImuSample, SampleWindow, SequenceDataset};
use crate::error::{Error, Result};
use crate::geometry::relative_pose;

/// IMU samples per window: both frame endpoints plus nine interior points.
pub const IMU_WINDOW: usize = 11;

fn median_period(stream: &[ImuSample]) -> f64 {
    let mut d: Vec<f64> = stream.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn lerp_sample(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
    ImuSample {
        timestamp: t,
        angular_velocity: a.angular_velocity + (b.angular_velocity - a.angular_velocity) * s,
        linear_acceleration: a.linear_acceleration + (b.linear_acceleration - a.linear_acceleration) * s,
    }
}

/// Resamples `stream` by linear interpolation onto an `n`-point uniform grid
/// spanning `[t_a, t_b]` inclusive. Grid points up to half an IMU period
/// outside the stream take the nearest endpoint value.
pub fn resample_imu(stream: &[ImuSample], t_a: f64, t_b: f64, n: usize) -> std::result::Result<Vec<ImuSample>, String> {
    if stream.len() < 2 {
        return Err(format!("stream has {} samples", stream.len()));
    }
    let slack = 0.5 * median_period(stream);
    let (first, last) = (stream[0].timestamp, stream[stream.len() - 1].timestamp);
    if t_a < first - slack || t_b > last + slack {
        return Err(format!("interval [{t_a}, {t_b}] exceeds stream range [{first}, {last}]"));
    }
    Ok((0..n)
        .map(|j| {
            let t = if j + 1 == n {
                t_b
            } else {
                t_a + (t_b - t_a) * j as f64 / (n - 1) as f64
            };
            let hi = stream.partition_point(|s| s.timestamp < t);
            if hi == 0 {
                ImuSample { timestamp: t, ..stream[0] }
            } else if hi == stream.len() {
                ImuSample { timestamp: t, ..stream[stream.len() - 1] }
            } else if stream[hi].timestamp == t {
                stream[hi]
            } else {
                lerp_sample(&stream[hi - 1], &stream[hi], t)
            }
        })
        .collect())
}

/// One window per consecutive frame pair, in frame order.
pub fn build_windows(dataset: &SequenceDataset) -> Result<Vec<SampleWindow>> {
    if dataset.frames.len() < 2 {
        return Ok(Vec::new());
    }
    let poses = dataset.frame_poses()?;
    dataset
        .frames
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let (fa, fb) = (&pair[0], &pair[1]);
            let imu = resample_imu(&dataset.imu_stream, fa.timestamp, fb.timestamp, IMU_WINDOW).map_err(|message| {
                Error::Coverage {
                    frame_a: i,
                    frame_b: i + 1,
                    message,
                }
            })?;
            Ok(SampleWindow {
                frame_a: fa.clone(),
                frame_b: fb.clone(),
                imu,
                target: relative_pose(&poses[i], &poses[i + 1]),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{AbsolutePose, Frame, Scenario, StreamMeta};
    use crate::geometry::{Quat, Vec3};
    use crate::raster::Raster;

    fn dataset(n_frames: usize, imu_hz: f64, still: bool) -> SequenceDataset {
        let dur = (n_frames - 1) as f64 / 20.0;
        let n_imu = (dur * imu_hz).round() as usize + 1;
        SequenceDataset {
            sequence_id: "w".into(),
            scenario: Scenario::Original,
            meta: StreamMeta::default(),
            frames: (0..n_frames).map(|i| Frame::new(i as f64 / 20.0, Raster::filled(2, 2, 0.5))).collect(),
            imu_stream: (0..n_imu)
                .map(|i| {
                    let t = i as f64 / imu_hz;
                    ImuSample::new(t, [t.sin(), t.cos(), t], [1.0, 2.0 * t, 3.0])
                })
                .collect(),
            reference_poses: vec![
                AbsolutePose::new(0.0, Vec3::zeros(), Quat::identity()),
                AbsolutePose::new(dur, if still { Vec3::zeros() } else { Vec3::new(1.0, 0.0, 0.0) }, Quat::identity()),
            ],
        }
    }

    #[test]
    fn n_frames_give_n_minus_one_windows_of_eleven() {
        let ds = dataset(7, 200.0, false);
        let w = build_windows(&ds).unwrap();
        assert_eq!(w.len(), 6);
        assert!(w.iter().all(|w| w.imu.len() == IMU_WINDOW));
    }

    #[test]
    fn exact_rate_resampling_is_identity() {
        let ds = dataset(5, 200.0, false);
        let w = build_windows(&ds).unwrap();
        for (k, win) in w.iter().enumerate() {
            for (j, s) in win.imu.iter().enumerate() {
                let raw = &ds.imu_stream[k * 10 + j];
                assert!((s.timestamp - raw.timestamp).abs() < 1e-9);
                for (a, b) in s.channels().iter().zip(raw.channels()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identical_poses_give_zero_target() {
        let ds = dataset(3, 200.0, true);
        for w in build_windows(&ds).unwrap() {
            assert_eq!(w.target.to_array(), [0.0; 6]);
        }
    }

    #[test]
    fn uncovered_interval_is_a_coverage_error() {
        let mut ds = dataset(5, 200.0, false);
        ds.imu_stream.truncate(25);
        match build_windows(&ds) {
            Err(Error::Coverage { frame_a, frame_b, .. }) => assert_eq!((frame_a, frame_b), (2, 3)),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }
}
