use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::Raster;

/// Per-pixel scene depth used by the haze model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthProxy {
    Constant { depth: f64 },
    /// Linear ramp from `top` (row 0) to `bottom` (last row).
    VerticalGradient { top: f64, bottom: f64 },
}

impl DepthProxy {
    fn at_row(&self, y: usize, height: usize) -> f64 {
        match *self {
            DepthProxy::Constant { depth } => depth,
            DepthProxy::VerticalGradient { top, bottom } => {
                if height <= 1 {
                    top
                } else {
                    top + (bottom - top) * y as f64 / (height - 1) as f64
                }
            }
        }
    }
}

/// Koschmieder haze: `I = J·t + A·(1 − t)`, `t = exp(−β·d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbidityParams {
    pub attenuation_beta: f64,
    pub airlight: f64,
    pub depth: DepthProxy,
}

impl TurbidityParams {
    /// Clamps `beta` to `[0, ∞]`, `airlight` to `[0, 1]` and depths to `≥ 0`.
    pub fn new(attenuation_beta: f64, airlight: f64, depth: DepthProxy) -> Self {
        let nn = |v: f64| if v.is_nan() { 0.0 } else { v.max(0.0) };
        let depth = match depth {
            DepthProxy::Constant { depth } => DepthProxy::Constant { depth: nn(depth) },
            DepthProxy::VerticalGradient { top, bottom } => DepthProxy::VerticalGradient {
                top: nn(top),
                bottom: nn(bottom),
            },
        };
        Self {
            attenuation_beta: nn(attenuation_beta),
            airlight: if airlight.is_nan() { 0.0 } else { airlight.clamp(0.0, 1.0) },
            depth,
        }
    }

    pub fn constant(beta: f64, airlight: f64, depth: f64) -> Self {
        Self::new(beta, airlight, DepthProxy::Constant { depth })
    }
}

impl Default for TurbidityParams {
    fn default() -> Self {
        Self::constant(0.8, 0.8, 2.0)
    }
}

pub fn transmission(beta: f64, depth: f64) -> f64 {
    if depth == 0.0 {
        1.0
    } else {
        (-beta * depth).exp()
    }
}

pub fn apply_turbidity(image: &Raster, params: &TurbidityParams) -> Raster {
    let p = TurbidityParams::new(params.attenuation_beta, params.airlight, params.depth);
    let (w, h) = image.dims();
    let mut out = image.clone();
    let a = p.airlight;
    for y in 0..h {
        let t = transmission(p.attenuation_beta, p.depth.at_row(y, h));
        if t == 1.0 {
            continue;
        }
        for v in &mut out.data_mut()[y * w..(y + 1) * w] {
            *v = (*v * t + a * (1.0 - t)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Radial warp, Gaussian blur and additive Gaussian noise, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionParams {
    pub radial_k1: f64,
    pub radial_k2: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DistortionParams {
    pub fn new(radial_k1: f64, radial_k2: f64, blur_sigma: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            radial_k1,
            radial_k2,
            blur_sigma: blur_sigma.max(0.0),
            noise_sigma: noise_sigma.max(0.0),
            seed,
        }
    }
}

impl Default for DistortionParams {
    fn default() -> Self {
        Self::new(0.15, 0.05, 1.0, 0.03, 0)
    }
}

fn radial_warp(image: &Raster, k1: f64, k2: f64) -> Raster {
    let (w, h) = image.dims();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let norm = (cx * cx + cy * cy).sqrt().max(1.0);
    Raster::from_fn(w, h, |x, y| {
        let dx = (x as f64 - cx) / norm;
        let dy = (y as f64 - cy) / norm;
        let r2 = dx * dx + dy * dy;
        let f = 1.0 + k1 * r2 + k2 * r2 * r2;
        image.sample_bilinear(cx + dx * f * norm, cy + dy * f * norm)
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = image.dims();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Raster::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * image.get(clampi(x as isize + i as isize - r, w), y))
            .sum()
    });
    Raster::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz.get(x, clampi(y as isize + i as isize - r, h)))
            .sum()
    })
}

pub fn apply_distortion(image: &Raster, params: &DistortionParams) -> Raster {
    let mut out = if params.radial_k1 != 0.0 || params.radial_k2 != 0.0 {
        radial_warp(image, params.radial_k1, params.radial_k2)
    } else {
        image.clone()
    };
    if params.blur_sigma > 0.0 {
        out = gaussian_blur(&out, params.blur_sigma);
    }
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let normal = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out.clamp_unit()
}
