//! Desk-scale synthetic sequences: a downward-looking pinhole camera flying
//! over a textured ground plane at `z = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{apply_distortion, apply_turbidity, DistortionParams, TurbidityParams};
use super::trajectory::{KinematicState, Trajectory};
use crate::dataio::{AbsolutePose, Frame, ImuSample, Scenario, SequenceDataset, StreamMeta};
use crate::error::{Error, Result};
use crate::geometry::{Quat, Vec3};
use crate::raster::Raster;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub sequence_id: String,
    pub trajectory: Trajectory,
    /// seconds
    pub duration: f64,
    pub frame_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub width: usize,
    pub height: usize,
    /// horizontal field of view, degrees
    pub fov_deg: f64,
    pub texture_seed: u64,
    /// rad/s
    pub gyro_noise: f64,
    /// m/s²
    pub accel_noise: f64,
    /// Uniform jitter on sample times, as a fraction of the nominal period.
    pub timing_jitter: f64,
    /// Keep every n-th frame pose as ground truth (first and last always kept).
    pub reference_stride: usize,
    pub scenario: Scenario,
    pub turbidity: TurbidityParams,
    pub distortion: DistortionParams,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sequence_id: "synthetic".into(),
            trajectory: Trajectory::Line {
                start: [0.0, 0.0, 2.0],
                velocity: [0.5, 0.0, 0.0],
                yaw: 0.0,
            },
            duration: 2.0,
            frame_rate_hz: 20.0,
            imu_rate_hz: 200.0,
            width: 64,
            height: 32,
            fov_deg: 60.0,
            texture_seed: 1,
            gyro_noise: 0.0,
            accel_noise: 0.0,
            timing_jitter: 0.0,
            reference_stride: 1,
            scenario: Scenario::Original,
            turbidity: TurbidityParams::default(),
            distortion: DistortionParams::default(),
            seed: 0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let s = |u: f64| u * u * (3.0 - 2.0 * u);
    let (u, v) = (s(x - fx), s(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    a + (b - a) * u + (c - a) * v + (a - b - c + d) * u * v
}

/// Ground-plane intensity at world `(x, y)`, in `[0.1, 0.9]`.
pub fn ground_texture(seed: u64, x: f64, y: f64) -> f64 {
    let n = 0.5 * value_noise(seed, x / 0.6, y / 0.6)
        + 0.3 * value_noise(seed.wrapping_add(1), x / 0.2, y / 0.2)
        + 0.2 * value_noise(seed.wrapping_add(2), x / 0.07, y / 0.07);
    0.1 + 0.8 * n
}

/// Camera axes in the body frame: image right, image down, optical axis.
fn camera_to_body(d: Vec3) -> Vec3 {
    Vec3::new(-d.y, -d.x, -d.z)
}

fn render(spec: &SyntheticSpec, state: &KinematicState) -> Raster {
    let (w, h) = (spec.width, spec.height);
    let f = 0.5 * w as f64 / (0.5 * spec.fov_deg.to_radians()).tan();
    let (cx, cy) = (0.5 * w as f64, 0.5 * h as f64);
    let rot = state.rotation();
    let p = state.position;
    let sample = |u: f64, v: f64| -> f64 {
        let dc = Vec3::new((u - cx) / f, (v - cy) / f, 1.0);
        let dw = rot * camera_to_body(dc);
        if dw.z >= -1e-9 || p.z <= 0.0 {
            return 0.5;
        }
        let s = -p.z / dw.z;
        ground_texture(spec.texture_seed, p.x + s * dw.x, p.y + s * dw.y)
    };
    // 2×2 supersampling
    Raster::from_fn(w, h, |x, y| {
        let (x, y) = (x as f64, y as f64);
        0.25 * (sample(x + 0.25, y + 0.25)
            + sample(x + 0.75, y + 0.25)
            + sample(x + 0.25, y + 0.75)
            + sample(x + 0.75, y + 0.75))
    })
}

fn jittered_times(rng: &mut ChaCha8Rng, rate: f64, start: f64, end: f64, jitter: f64) -> Vec<f64> {
    let period = 1.0 / rate;
    let n = ((end - start) * rate + 1e-9).floor() as usize + 1;
    (0..n)
        .map(|k| {
            let j = if jitter > 0.0 {
                rng.random_range(-jitter..jitter) * period
            } else {
                0.0
            };
            start + k as f64 * period + j
        })
        .collect()
}

/// Scenario disturbance for frame `index`; `original` returns the input.
pub fn disturb_frame(
    image: &Raster,
    scenario: Scenario,
    turbidity: &TurbidityParams,
    distortion: &DistortionParams,
    index: usize,
) -> Raster {
    match scenario {
        Scenario::Original => image.clone(),
        Scenario::Turbid => apply_turbidity(image, turbidity),
        Scenario::Distortion => {
            let p = DistortionParams {
                seed: splitmix(distortion.seed ^ splitmix(index as u64)),
                ..*distortion
            };
            apply_distortion(image, &p)
        }
    }
}

/// Rewrites every frame of `dataset` under `scenario`; streams are untouched.
pub fn disturb_sequence(
    dataset: &SequenceDataset,
    scenario: Scenario,
    turbidity: &TurbidityParams,
    distortion: &DistortionParams,
) -> SequenceDataset {
    let mut out = dataset.map_frames(|i, img| disturb_frame(img, scenario, turbidity, distortion, i).quantize8());
    out.scenario = scenario;
    out
}

pub fn synthesize_sequence(spec: &SyntheticSpec) -> Result<SequenceDataset> {
    let mut problems = Vec::new();
    if !(spec.duration > 0.0 && spec.duration.is_finite()) {
        problems.push(format!("duration must be positive, got {}", spec.duration));
    }
    if !(spec.frame_rate_hz > 0.0 && spec.imu_rate_hz > 0.0) {
        problems.push("rates must be positive".to_string());
    }
    if spec.width == 0 || spec.height == 0 {
        problems.push("image size must be non-zero".to_string());
    }
    if !(0.0..0.5).contains(&spec.timing_jitter) {
        problems.push("timing_jitter must lie in [0, 0.5)".to_string());
    }
    if !(spec.fov_deg > 0.0 && spec.fov_deg < 170.0) {
        problems.push("fov_deg must lie in (0, 170)".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    if spec.trajectory.min_altitude(spec.duration) <= 0.0 {
        return Err(Error::InvalidArgument("trajectory goes below the ground plane".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frame_times = jittered_times(&mut rng, spec.frame_rate_hz, 0.0, spec.duration, spec.timing_jitter);
    // pad the IMU stream by two periods on each side so every frame is covered
    let pad = 2.0 / spec.imu_rate_hz;
    let imu_times = jittered_times(
        &mut rng,
        spec.imu_rate_hz,
        -pad,
        spec.duration + pad,
        spec.timing_jitter,
    );
    let gyro_n = Normal::new(0.0, spec.gyro_noise.max(0.0)).expect("finite noise");
    let accel_n = Normal::new(0.0, spec.accel_noise.max(0.0)).expect("finite noise");
    let g = Vec3::new(0.0, 0.0, -GRAVITY);
    let imu_stream = imu_times
        .iter()
        .map(|&t| {
            let s = spec.trajectory.state(t);
            let rot: Quat = s.rotation();
            let mut gyro = s.body_rate();
            let mut accel = rot.inverse() * (s.acceleration - g);
            for k in 0..3 {
                gyro[k] += gyro_n.sample(&mut rng);
                accel[k] += accel_n.sample(&mut rng);
            }
            ImuSample {
                timestamp: t,
                angular_velocity: gyro,
                linear_acceleration: accel,
            }
        })
        .collect();

    let stride = spec.reference_stride.max(1);
    let last = frame_times.len() - 1;
    let mut frames = Vec::with_capacity(frame_times.len());
    let mut reference_poses = Vec::new();
    for (i, &t) in frame_times.iter().enumerate() {
        let s = spec.trajectory.state(t);
        let clean = render(spec, &s);
        let img = disturb_frame(&clean, spec.scenario, &spec.turbidity, &spec.distortion, i).quantize8();
        frames.push(Frame::new(t, img));
        if i % stride == 0 || i == last {
            reference_poses.push(AbsolutePose::new(t, s.position, s.rotation()));
        }
    }
    let ds = SequenceDataset {
        sequence_id: spec.sequence_id.clone(),
        scenario: spec.scenario,
        meta: StreamMeta {
            frame_rate_hz: spec.frame_rate_hz,
            imu_rate_hz: spec.imu_rate_hz,
            ..StreamMeta::default()
        },
        frames,
        imu_stream,
        reference_poses,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::build_windows;

    #[test]
    fn straight_line_targets_are_constant() {
        let ds = synthesize_sequence(&SyntheticSpec::default()).unwrap();
        let w = build_windows(&ds).unwrap();
        assert_eq!(w.len(), 40);
        let v0 = w[0].target.v;
        assert!((v0 - Vec3::new(0.025, 0.0, 0.0)).norm() < 1e-12);
        for win in &w {
            assert!((win.target.v - v0).norm() < 1e-12);
            assert!(win.target.phi.norm() < 1e-12);
        }
    }

    #[test]
    fn circle_gyro_z_is_rate() {
        let spec = SyntheticSpec {
            trajectory: Trajectory::Circle {
                center: [0.0, 0.0, 2.0],
                radius: 1.0,
                angular_rate: 0.6,
            },
            ..SyntheticSpec::default()
        };
        let ds = synthesize_sequence(&spec).unwrap();
        for s in &ds.imu_stream {
            assert!((s.angular_velocity.z - 0.6).abs() < 1e-12);
            assert!(s.angular_velocity.x.abs() < 1e-12 && s.angular_velocity.y.abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_accel_reads_gravity_up() {
        let spec = SyntheticSpec {
            trajectory: Trajectory::Line {
                start: [0.0, 0.0, 2.0],
                velocity: [0.0; 3],
                yaw: 1.0,
            },
            ..SyntheticSpec::default()
        };
        let ds = synthesize_sequence(&spec).unwrap();
        let a = ds.imu_stream[3].linear_acceleration;
        assert!((a - Vec3::new(0.0, 0.0, GRAVITY)).norm() < 1e-12);
    }

    #[test]
    fn scenario_changes_images_only() {
        let base = SyntheticSpec {
            gyro_noise: 0.01,
            accel_noise: 0.05,
            timing_jitter: 0.1,
            seed: 9,
            ..SyntheticSpec::default()
        };
        let a = synthesize_sequence(&base).unwrap();
        let b = synthesize_sequence(&SyntheticSpec {
            scenario: Scenario::Turbid,
            ..base
        })
        .unwrap();
        assert_eq!(a.imu_stream, b.imu_stream);
        assert_eq!(a.reference_poses, b.reference_poses);
        assert_eq!(a.frame_times(), b.frame_times());
        assert_ne!(a.frames[0].image, b.frames[0].image);
    }

    #[test]
    fn camera_motion_shifts_the_image() {
        let ds = synthesize_sequence(&SyntheticSpec::default()).unwrap();
        let (a, b) = (&ds.frames[0].image, &ds.frames[10].image);
        assert!(a.std_dev() > 0.05);
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff / a.data().len() as f64 > 0.02);
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            SyntheticSpec { duration: 0.0, ..SyntheticSpec::default() },
            SyntheticSpec { imu_rate_hz: 0.0, ..SyntheticSpec::default() },
            SyntheticSpec { frame_rate_hz: -1.0, ..SyntheticSpec::default() },
        ] {
            assert!(synthesize_sequence(&spec).is_err());
        }
    }

    #[test]
    fn sparse_reference_keeps_endpoints() {
        let ds = synthesize_sequence(&SyntheticSpec {
            reference_stride: 7,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(ds.reference_poses.len(), 7);
        assert_eq!(ds.reference_poses.last().unwrap().timestamp, ds.frames.last().unwrap().timestamp);
    }
}
