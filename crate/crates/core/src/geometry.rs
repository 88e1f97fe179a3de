//! Rigid-body helpers shared by data preparation and evaluation.
//!
//! Rotation vectors in [`PoseDelta`] use fixed-axis XYZ Euler angles:
//! `R = Rz(phi_z) * Ry(phi_y) * Rx(phi_x)`.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Timestamped absolute pose (world ← body).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsolutePose {
    pub timestamp: f64,
    pub translation: Vec3,
    pub rotation: Quat,
}

impl AbsolutePose {
    pub fn new(timestamp: f64, translation: Vec3, rotation: Quat) -> Self {
        Self {
            timestamp,
            translation,
            rotation,
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` components without renormalising.
    pub fn from_wxyz(timestamp: f64, translation: [f64; 3], q: [f64; 4]) -> Self {
        Self {
            timestamp,
            translation: Vec3::from(translation),
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn identity(timestamp: f64) -> Self {
        Self::new(timestamp, Vec3::zeros(), Quat::identity())
    }
}

/// Relative 6-DoF motion: translation `v` (m) in the earlier body frame and
/// rotation `phi` (rad) as XYZ Euler angles.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseDelta {
    pub v: Vec3,
    pub phi: Vec3,
}

impl PoseDelta {
    pub fn new(v: [f64; 3], phi: [f64; 3]) -> Self {
        Self {
            v: Vec3::from(v),
            phi: Vec3::from(phi),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.v.x, self.v.y, self.v.z, self.phi.x, self.phi.y, self.phi.z]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new([s[0], s[1], s[2]], [s[3], s[4], s[5]])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn rotation_from_euler(phi: &Vec3) -> Quat {
    Quat::from_euler_angles(phi.x, phi.y, phi.z)
}

pub fn euler_from_rotation(q: &Quat) -> Vec3 {
    let (r, p, y) = q.euler_angles();
    Vec3::new(r, p, y)
}

/// `T_a⁻¹ · T_b` expressed as a [`PoseDelta`].
pub fn relative_pose(a: &AbsolutePose, b: &AbsolutePose) -> PoseDelta {
    let inv = a.rotation.inverse();
    PoseDelta {
        v: inv * (b.translation - a.translation),
        phi: euler_from_rotation(&(inv * b.rotation)),
    }
}

/// Applies `delta` in the body frame of `pose`.
pub fn compose(pose: &AbsolutePose, delta: &PoseDelta, timestamp: f64) -> AbsolutePose {
    let dq = rotation_from_euler(&delta.phi);
    let mut rotation = pose.rotation * dq;
    rotation.renormalize();
    AbsolutePose {
        timestamp,
        translation: pose.translation + pose.rotation * delta.v,
        rotation,
    }
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(q0: &Quat, q1: &Quat, s: f64) -> Quat {
    let a = q0.quaternion().coords;
    let mut b = q1.quaternion().coords;
    let mut cos = a.dot(&b);
    if cos < 0.0 {
        b = -b;
        cos = -cos;
    }
    let coords = if cos > 1.0 - 1e-12 {
        a * (1.0 - s) + b * s
    } else {
        let theta = cos.min(1.0).acos();
        let sin = theta.sin();
        a * (((1.0 - s) * theta).sin() / sin) + b * ((s * theta).sin() / sin)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(coords))
}

/// Geodesic angle between two rotations in radians.
pub fn rotation_angle_between(a: &Quat, b: &Quat) -> f64 {
    a.angle_to(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn euler_round_trip() {
        let phi = Vec3::new(0.1, -0.2, 0.3);
        let back = euler_from_rotation(&rotation_from_euler(&phi));
        assert!((back - phi).norm() < 1e-12);
    }

    #[test]
    fn euler_is_fixed_axis_xyz() {
        let phi = Vec3::new(0.3, 0.2, 0.1);
        let rx = Quat::from_axis_angle(&Vector3::x_axis(), phi.x);
        let ry = Quat::from_axis_angle(&Vector3::y_axis(), phi.y);
        let rz = Quat::from_axis_angle(&Vector3::z_axis(), phi.z);
        let expect = rz * ry * rx;
        assert!(rotation_from_euler(&phi).angle_to(&expect) < 1e-12);
    }

    #[test]
    fn slerp_midpoint_of_quarter_turn_is_eighth_turn() {
        let q0 = Quat::identity();
        let q1 = Quat::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let mid = slerp(&q0, &q1, 0.5);
        // closed form: (cos(pi/8), 0, 0, sin(pi/8))
        let q = mid.quaternion();
        assert!((q.w - (FRAC_PI_4 / 2.0).cos()).abs() < 1e-12);
        assert!((q.k - (FRAC_PI_4 / 2.0).sin()).abs() < 1e-12);
        assert!(q.i.abs() < 1e-12 && q.j.abs() < 1e-12);
    }

    #[test]
    fn slerp_takes_short_arc_for_negated_quaternion() {
        let q0 = Quat::from_axis_angle(&Vector3::z_axis(), 0.2);
        let q1 = UnitQuaternion::new_unchecked(-*Quat::from_axis_angle(&Vector3::z_axis(), 0.4).quaternion());
        let mid = slerp(&q0, &q1, 0.5);
        assert!(mid.angle_to(&Quat::from_axis_angle(&Vector3::z_axis(), 0.3)) < 1e-12);
    }

    #[test]
    fn relative_then_compose_is_identity() {
        let a = AbsolutePose::new(0.0, Vec3::new(1.0, 2.0, 3.0), rotation_from_euler(&Vec3::new(0.1, 0.2, 0.3)));
        let b = AbsolutePose::new(1.0, Vec3::new(1.5, 1.0, 2.0), rotation_from_euler(&Vec3::new(-0.2, 0.4, 1.0)));
        let d = relative_pose(&a, &b);
        let c = compose(&a, &d, 1.0);
        assert!((c.translation - b.translation).norm() < 1e-12);
        assert!(c.rotation.angle_to(&b.rotation) < 1e-12);
    }
}
