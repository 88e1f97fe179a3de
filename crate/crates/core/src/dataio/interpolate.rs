use crate::error::{Error, Result};
use crate::geometry::{slerp, AbsolutePose};

/// Reference poses at `query_times`: component-wise linear interpolation of
/// translation and slerp of rotation between the bracketing knots. Exact at
/// knot timestamps; queries outside the knot range are rejected.
pub fn interpolate_reference(poses: &[AbsolutePose], query_times: &[f64]) -> Result<Vec<AbsolutePose>> {
    if poses.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "interpolation needs at least 2 reference poses, got {}",
            poses.len()
        )));
    }
    let (start, end) = (poses[0].timestamp, poses[poses.len() - 1].timestamp);
    query_times
        .iter()
        .map(|&t| {
            if !(t >= start && t <= end) {
                return Err(Error::OutOfRange { time: t, start, end });
            }
            // first knot with timestamp >= t
            let hi = poses.partition_point(|p| p.timestamp < t);
            let knot = &poses[hi];
            if knot.timestamp == t {
                return Ok(AbsolutePose { timestamp: t, ..*knot });
            }
            let (a, b) = (&poses[hi - 1], knot);
            let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
            Ok(AbsolutePose {
                timestamp: t,
                translation: a.translation + (b.translation - a.translation) * s,
                rotation: slerp(&a.rotation, &b.rotation, s),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_from_euler, Quat, Vec3};
    use nalgebra::Vector3;
    use std::f64::consts::FRAC_PI_2;

    fn knots() -> Vec<AbsolutePose> {
        vec![
            AbsolutePose::new(0.0, Vec3::zeros(), Quat::identity()),
            AbsolutePose::new(1.0, Vec3::new(2.0, 0.0, 0.0), Quat::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2)),
            AbsolutePose::new(3.0, Vec3::new(2.0, 4.0, -1.0), rotation_from_euler(&Vec3::new(0.2, -0.1, 2.0))),
        ]
    }

    #[test]
    fn exact_at_knots() {
        let k = knots();
        let out = interpolate_reference(&k, &[0.0, 1.0, 3.0]).unwrap();
        for (a, b) in out.iter().zip(&k) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn midpoint_translation_and_rotation() {
        let out = interpolate_reference(&knots(), &[0.5]).unwrap();
        assert!((out[0].translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let expect = Quat::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2 / 2.0);
        assert!(out[0].rotation.angle_to(&expect) < 1e-12);
    }

    #[test]
    fn no_extrapolation() {
        assert!(matches!(
            interpolate_reference(&knots(), &[3.0 + 1e-9]),
            Err(Error::OutOfRange { .. })
        ));
        assert!(interpolate_reference(&knots(), &[-0.1]).is_err());
        assert!(interpolate_reference(&knots()[..1], &[0.0]).is_err());
    }

    #[test]
    fn continuous_in_time() {
        let k = knots();
        for &t in &[0.3, 1.0, 2.2] {
            for &eps in &[1e-3, 1e-5, 1e-7] {
                let p = interpolate_reference(&k, &[t, t + eps]).unwrap();
                let dt = (p[1].translation - p[0].translation).norm();
                let dr = p[0].rotation.angle_to(&p[1].rotation);
                // max speed 2.3 m/s, max angular rate ~1.6 rad/s on these knots
                assert!(dt <= 3.0 * eps, "t={t} eps={eps} dt={dt}");
                assert!(dr <= 3.0 * eps, "t={t} eps={eps} dr={dr}");
            }
        }
    }
}
