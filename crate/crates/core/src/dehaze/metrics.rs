use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// PSNR value written in place of +∞ in text and JSON output.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Full-reference quality of one image pair. MSE, RMSE and PSNR are on the
/// 0–255 intensity scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageQualityReport {
    /// dB; `+∞` for identical images
    #[serde(serialize_with = "serialize_capped_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub rmse: f64,
}

fn serialize_capped_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(capped_psnr(*v))
}

pub fn capped_psnr(psnr: f64) -> f64 {
    psnr.min(PSNR_CAP_DB)
}

pub fn rmse_from_mse(mse: f64) -> f64 {
    mse.sqrt()
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

fn check_shapes(reference: &Raster, candidate: &Raster) -> Result<()> {
    if reference.dims() != candidate.dims() {
        return Err(Error::shape("candidate image", reference.dims(), candidate.dims()));
    }
    Ok(())
}

/// Mean squared error on the 0–255 scale.
pub fn mse_255(reference: &Raster, candidate: &Raster) -> Result<f64> {
    check_shapes(reference, candidate)?;
    let n = reference.data().len().max(1) as f64;
    Ok(reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| {
            let d = 255.0 * (a - b);
            d * d
        })
        .sum::<f64>()
        / n)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
/// evaluated at valid window positions only. Images smaller than 11 pixels
/// on a side use the largest odd window that fits.
pub fn ssim(reference: &Raster, candidate: &Raster) -> Result<f64> {
    check_shapes(reference, candidate)?;
    let (w, h) = reference.dims();
    let mut size = 11.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Ok(1.0);
    }
    let g = gaussian_window(size, 1.5);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (a, b) = (reference.data(), candidate.data());
    let (ow, oh) = (w - size + 1, h - size + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..size {
                for i in 0..size {
                    let wgt = g[i] * g[j];
                    let p = (y + j) * w + x + i;
                    let (va, vb) = (255.0 * a[p], 255.0 * b[p]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

pub fn image_metrics(reference: &Raster, candidate: &Raster) -> Result<ImageQualityReport> {
    let mse = mse_255(reference, candidate)?;
    Ok(ImageQualityReport {
        psnr: psnr_from_mse(mse),
        ssim: ssim(reference, candidate)?,
        mse,
        rmse: rmse_from_mse(mse),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(w: usize, h: usize, seed: u64) -> Raster {
        Raster::from_fn(w, h, |x, y| {
            let v = (x as u64 * 2654435761 ^ y as u64 * 40503 ^ seed).wrapping_mul(0x9e3779b97f4a7c15);
            (v >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn identical_images() {
        let img = noise(16, 16, 1);
        let r = image_metrics(&img, &img).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.psnr, f64::INFINITY);
        let json = serde_json::to_value(r).unwrap();
        assert_eq!(json["psnr"], 99.0);
    }

    #[test]
    fn table_rmse_values() {
        assert!((rmse_from_mse(158.47) - 12.588).abs() < 1e-3);
        assert!((rmse_from_mse(203.29) - 14.258).abs() < 1e-3);
    }

    #[test]
    fn constant_offset() {
        let a = Raster::filled(8, 8, 0.5);
        let b = Raster::filled(8, 8, 0.5 + 10.0 / 255.0);
        let r = image_metrics(&a, &b).unwrap();
        assert!((r.mse - 100.0).abs() < 1e-9);
        assert!((r.psnr - 10.0 * (255.0f64 * 255.0 / 100.0).log10()).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(matches!(
            image_metrics(&Raster::filled(4, 4, 0.0), &Raster::filled(4, 5, 0.0)),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn metric_consistency(s1 in 0u64..1000, s2 in 0u64..1000, k in 0.0f64..1.0) {
            let a = noise(12, 13, s1);
            let b = noise(12, 13, s2);
            let c = Raster::from_fn(12, 13, |x, y| a.get(x, y) * (1.0 - k) + b.get(x, y) * k);
            let r = image_metrics(&a, &c).unwrap();
            prop_assert!((r.rmse * r.rmse - r.mse).abs() < 1e-9 * r.mse.max(1.0));
            let s_ab = ssim(&a, &b).unwrap();
            let s_ba = ssim(&b, &a).unwrap();
            prop_assert!((s_ab - s_ba).abs() < 1e-9);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn psnr_strictly_decreasing(m1 in 1e-6f64..1e5, m2 in 1e-6f64..1e5) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1) > psnr_from_mse(m2));
        }
    }
}
