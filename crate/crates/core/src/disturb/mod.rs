//! Visual disturbance models (turbidity, distortion) and the synthetic
//! sequence generator.

mod ops;
mod synth;
mod trajectory;

pub use ops::{
    apply_distortion, apply_turbidity, gaussian_blur, transmission, DepthProxy, DistortionParams, TurbidityParams,
};
pub use synth::{disturb_frame, disturb_sequence, ground_texture, synthesize_sequence, SyntheticSpec, GRAVITY};
pub use trajectory::{KinematicState, Trajectory};
