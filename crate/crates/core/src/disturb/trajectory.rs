//! Analytic camera trajectories with closed-form derivatives.
//!
//! Attitude is yaw-pitch-roll, `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::geometry::{Quat, Vec3};

/// Kinematic state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    /// (roll, pitch, yaw)
    pub attitude: Vec3,
    /// time derivative of `attitude`
    pub attitude_rate: Vec3,
}

impl KinematicState {
    pub fn rotation(&self) -> Quat {
        Quat::from_euler_angles(self.attitude.x, self.attitude.y, self.attitude.z)
    }

    /// Angular velocity in the body frame.
    pub fn body_rate(&self) -> Vec3 {
        let (r, p) = (self.attitude.x, self.attitude.y);
        let (dr, dp, dy) = (self.attitude_rate.x, self.attitude_rate.y, self.attitude_rate.z);
        Vec3::new(
            dr - dy * p.sin(),
            dp * r.cos() + dy * p.cos() * r.sin(),
            -dp * r.sin() + dy * p.cos() * r.cos(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Constant velocity, fixed heading.
    Line { start: [f64; 3], velocity: [f64; 3], yaw: f64 },
    /// Horizontal circle flown tangentially; yaw rate equals `angular_rate`.
    Circle {
        center: [f64; 3],
        radius: f64,
        angular_rate: f64,
    },
    /// Square of side `side`: smooth-step legs, then in-place 90° left turns.
    Square {
        side: f64,
        leg_time: f64,
        turn_time: f64,
        altitude: f64,
    },
    /// Forward drift with superimposed sinusoids on every axis.
    Wander {
        speed: f64,
        amplitude: f64,
        period: f64,
        yaw_amplitude: f64,
        tilt_amplitude: f64,
        altitude: f64,
        phase: f64,
    },
}

/// `(s, ds/du, d²s/du²)` of the cubic smooth-step on `u ∈ [0, 1]`.
fn smoothstep(u: f64) -> (f64, f64, f64) {
    (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u), 6.0 - 12.0 * u)
}

/// `(a sin(wt + p), a w cos(.), -a w² sin(.))`
fn sinusoid(a: f64, w: f64, p: f64, t: f64) -> (f64, f64, f64) {
    let x = w * t + p;
    (a * x.sin(), a * w * x.cos(), -a * w * w * x.sin())
}

impl Trajectory {
    pub fn state(&self, t: f64) -> KinematicState {
        match *self {
            Trajectory::Line { start, velocity, yaw } => KinematicState {
                position: Vec3::from(start) + Vec3::from(velocity) * t,
                velocity: Vec3::from(velocity),
                acceleration: Vec3::zeros(),
                attitude: Vec3::new(0.0, 0.0, yaw),
                attitude_rate: Vec3::zeros(),
            },
            Trajectory::Circle {
                center,
                radius,
                angular_rate: w,
            } => {
                let (s, c) = (w * t).sin_cos();
                KinematicState {
                    position: Vec3::from(center) + Vec3::new(radius * c, radius * s, 0.0),
                    velocity: Vec3::new(-radius * w * s, radius * w * c, 0.0),
                    acceleration: Vec3::new(-radius * w * w * c, -radius * w * w * s, 0.0),
                    attitude: Vec3::new(0.0, 0.0, w * t + FRAC_PI_2.copysign(w)),
                    attitude_rate: Vec3::new(0.0, 0.0, w),
                }
            }
            Trajectory::Square {
                side,
                leg_time,
                turn_time,
                altitude,
            } => {
                let seg = leg_time + turn_time;
                let k = (t / seg).floor().max(0.0) as i64;
                let tau = t - k as f64 * seg;
                // corner k of the (repeating) square
                let corner = |k: i64| -> Vec3 {
                    let c = [
                        Vec3::new(0.0, 0.0, altitude),
                        Vec3::new(side, 0.0, altitude),
                        Vec3::new(side, side, altitude),
                        Vec3::new(0.0, side, altitude),
                    ];
                    c[k.rem_euclid(4) as usize]
                };
                let heading = k as f64 * FRAC_PI_2;
                let dir = Vec3::new(heading.cos(), heading.sin(), 0.0);
                if tau < leg_time {
                    let (s, ds, dds) = smoothstep(tau / leg_time);
                    KinematicState {
                        position: corner(k) + dir * (side * s),
                        velocity: dir * (side * ds / leg_time),
                        acceleration: dir * (side * dds / (leg_time * leg_time)),
                        attitude: Vec3::new(0.0, 0.0, heading),
                        attitude_rate: Vec3::zeros(),
                    }
                } else {
                    let (s, ds, _) = smoothstep((tau - leg_time) / turn_time);
                    KinematicState {
                        position: corner(k + 1),
                        velocity: Vec3::zeros(),
                        acceleration: Vec3::zeros(),
                        attitude: Vec3::new(0.0, 0.0, heading + FRAC_PI_2 * s),
                        attitude_rate: Vec3::new(0.0, 0.0, FRAC_PI_2 * ds / turn_time),
                    }
                }
            }
            Trajectory::Wander {
                speed,
                amplitude,
                period,
                yaw_amplitude,
                tilt_amplitude,
                altitude,
                phase,
            } => {
                let w = 2.0 * PI / period;
                let x = sinusoid(amplitude, w, phase, t);
                let y = sinusoid(amplitude, w / 1.3, 0.7 + phase, t);
                let z = sinusoid(0.1 * amplitude, w / 0.7, 1.9 + phase, t);
                let yaw = sinusoid(yaw_amplitude, w / 1.7, 0.3 + phase, t);
                let roll = sinusoid(tilt_amplitude, w / 0.9, 2.3 + phase, t);
                let pitch = sinusoid(tilt_amplitude, w / 1.1, 4.1 + phase, t);
                KinematicState {
                    position: Vec3::new(speed * t + x.0, y.0, altitude + z.0),
                    velocity: Vec3::new(speed + x.1, y.1, z.1),
                    acceleration: Vec3::new(x.2, y.2, z.2),
                    attitude: Vec3::new(roll.0, pitch.0, yaw.0),
                    attitude_rate: Vec3::new(roll.1, pitch.1, yaw.1),
                }
            }
        }
    }

    /// Shortest altitude over the ground plane along `[0, duration]`.
    pub fn min_altitude(&self, duration: f64) -> f64 {
        let n = 200;
        (0..=n)
            .map(|i| self.state(duration * i as f64 / n as f64).position.z)
            .fold(f64::INFINITY, f64::min)
    }
}
