use serde::{Deserialize, Serialize};

use crate::dataio::{AbsolutePose, Scenario};
use crate::error::{Error, Result};
use crate::geometry::{compose, rotation_from_euler, PoseDelta};

/// How per-step error vectors are pooled into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RmseConvention {
    /// `sqrt(Σ‖e‖² / (3T))`
    #[default]
    Pooled,
    /// `sqrt(Σ‖e‖² / T)`
    Norm,
}

/// What counts as the rotation error of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RotationError {
    /// Difference of the Euler vectors.
    #[default]
    Euler,
    /// Angle of `R(φ̂)ᵀ R(φ)`, treated as a one-axis error.
    Geodesic,
}

fn check_lengths(pred: &[PoseDelta], refs: &[PoseDelta]) -> Result<()> {
    if pred.len() != refs.len() {
        return Err(Error::shape("prediction count", refs.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("RMSE needs at least one step".into()));
    }
    Ok(())
}

/// `(v_rmse, phi_rmse)` under an explicit convention.
pub fn compute_rmse_with(
    pred: &[PoseDelta],
    refs: &[PoseDelta],
    convention: RmseConvention,
    rotation: RotationError,
) -> Result<(f64, f64)> {
    check_lengths(pred, refs)?;
    let (mut sv, mut sp) = (0.0, 0.0);
    for (p, r) in pred.iter().zip(refs) {
        sv += (p.v - r.v).norm_squared();
        sp += match rotation {
            RotationError::Euler => (p.phi - r.phi).norm_squared(),
            RotationError::Geodesic => {
                let q = rotation_from_euler(&p.phi).inverse() * rotation_from_euler(&r.phi);
                q.angle().powi(2)
            }
        };
    }
    let denom = match convention {
        RmseConvention::Pooled => 3.0 * pred.len() as f64,
        RmseConvention::Norm => pred.len() as f64,
    };
    Ok(((sv / denom).sqrt(), (sp / denom).sqrt()))
}

/// Pooled per-axis RMSE of translation (m) and Euler rotation (rad).
pub fn compute_rmse(pred: &[PoseDelta], refs: &[PoseDelta]) -> Result<(f64, f64)> {
    compute_rmse_with(pred, refs, RmseConvention::Pooled, RotationError::Euler)
}

/// Contiguous thirds; the earliest thirds take any remainder.
pub fn split_three<T: Clone>(items: &[T]) -> Result<[Vec<T>; 3]> {
    let n = items.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("cannot split {n} items into three parts")));
    }
    let (base, rem) = (n / 3, n % 3);
    let l0 = base + usize::from(rem > 0);
    let l1 = base + usize::from(rem > 1);
    Ok([
        items[..l0].to_vec(),
        items[l0..l0 + l1].to_vec(),
        items[l0 + l1..].to_vec(),
    ])
}

/// Chains body-frame deltas onto `start`. Returns `deltas.len() + 1` poses;
/// pose `k` carries `times[k]` when given, else `start.timestamp + k`.
pub fn integrate_trajectory(start: &AbsolutePose, deltas: &[PoseDelta], times: Option<&[f64]>) -> Result<Vec<AbsolutePose>> {
    if let Some(i) = deltas.iter().position(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta {i} is not finite")));
    }
    if let Some(t) = times {
        if t.len() != deltas.len() + 1 {
            return Err(Error::shape("trajectory timestamps", deltas.len() + 1, t.len()));
        }
    }
    let stamp = |k: usize| times.map_or(start.timestamp + k as f64, |t| t[k]);
    let mut out = Vec::with_capacity(deltas.len() + 1);
    out.push(AbsolutePose { timestamp: stamp(0), ..*start });
    for (k, d) in deltas.iter().enumerate() {
        let next = compose(&out[k], d, stamp(k + 1));
        out.push(next);
    }
    Ok(out)
}

/// RMSE of one sub-sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub sequence_id: String,
    pub scenario: Scenario,
    /// 1, 2 or 3
    pub sub_sequence_index: usize,
    pub steps: usize,
    /// pooled, meters
    pub v_rmse: f64,
    /// pooled, radians
    pub phi_rmse: f64,
    /// norm variant, meters
    pub v_rmse_norm: f64,
    /// norm variant, radians
    pub phi_rmse_norm: f64,
    pub dehazed: bool,
}

/// Splits a sequence into thirds and scores each one.
pub fn evaluate_sequence(
    sequence_id: &str,
    scenario: Scenario,
    dehazed: bool,
    pred: &[PoseDelta],
    refs: &[PoseDelta],
    rotation: RotationError,
) -> Result<Vec<RmseReport>> {
    check_lengths(pred, refs)?;
    let p = split_three(pred)?;
    let r = split_three(refs)?;
    p.iter()
        .zip(&r)
        .enumerate()
        .map(|(i, (p, r))| {
            let (v, phi) = compute_rmse_with(p, r, RmseConvention::Pooled, rotation)?;
            let (vn, phin) = compute_rmse_with(p, r, RmseConvention::Norm, rotation)?;
            Ok(RmseReport {
                sequence_id: sequence_id.to_string(),
                scenario,
                sub_sequence_index: i + 1,
                steps: p.len(),
                v_rmse: v,
                phi_rmse: phi,
                v_rmse_norm: vn,
                phi_rmse_norm: phin,
                dehazed,
            })
        })
        .collect()
}

/// Mean of `(v_rmse, phi_rmse)` over reports.
pub fn mean_rmse(reports: &[RmseReport]) -> (f64, f64) {
    let n = reports.len().max(1) as f64;
    (
        reports.iter().map(|r| r.v_rmse).sum::<f64>() / n,
        reports.iter().map(|r| r.phi_rmse).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Quat, Vec3};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn d(v: [f64; 3], p: [f64; 3]) -> PoseDelta {
        PoseDelta::new(v, p)
    }

    #[test]
    fn exact_match_is_zero() {
        let x = vec![d([1.0, 2.0, 3.0], [0.1, 0.2, 0.3]); 5];
        assert_eq!(compute_rmse(&x, &x).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_translation_error() {
        let r = vec![d([0.0; 3], [0.0; 3]); 7];
        let p = vec![d([3.0, 0.0, 0.0], [0.0; 3]); 7];
        let (v, phi) = compute_rmse(&p, &r).unwrap();
        assert!((v - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(phi, 0.0);
        let (vn, _) = compute_rmse_with(&p, &r, RmseConvention::Norm, RotationError::Euler).unwrap();
        assert!((vn - 3.0).abs() < 1e-15);
        assert!(compute_rmse(&p[..3], &r).is_err());
    }

    #[test]
    fn geodesic_matches_single_axis_euler() {
        let r = vec![d([0.0; 3], [0.0, 0.0, 0.2])];
        let p = vec![d([0.0; 3], [0.0, 0.0, 0.5])];
        let (_, e) = compute_rmse(&p, &r).unwrap();
        let (_, g) = compute_rmse_with(&p, &r, RmseConvention::Pooled, RotationError::Geodesic).unwrap();
        assert!((e - g).abs() < 1e-12);
    }

    #[test]
    fn thirds() {
        let lens = |n: usize| split_three(&(0..n).collect::<Vec<_>>()).unwrap().map(|v| v.len());
        assert_eq!(lens(9), [3, 3, 3]);
        assert_eq!(lens(10), [4, 3, 3]);
        assert_eq!(lens(11), [4, 4, 3]);
        assert_eq!(lens(3), [1, 1, 1]);
        assert!(split_three(&[1, 2]).is_err());
    }

    #[test]
    fn zero_deltas_hold_start() {
        let start = AbsolutePose::new(1.0, Vec3::new(1.0, 2.0, 3.0), Quat::from_euler_angles(0.1, 0.2, 0.3));
        let traj = integrate_trajectory(&start, &vec![PoseDelta::zero(); 4], None).unwrap();
        assert_eq!(traj.len(), 5);
        for p in &traj {
            assert!((p.translation - start.translation).norm() < 1e-15);
            assert!(p.rotation.angle_to(&start.rotation) < 1e-12);
        }
    }

    #[test]
    fn square_path_closes() {
        let step = d([1.0, 0.0, 0.0], [0.0, 0.0, FRAC_PI_2]);
        let traj = integrate_trajectory(&AbsolutePose::identity(0.0), &[step; 4], None).unwrap();
        let end = traj.last().unwrap();
        assert!(end.translation.norm() < 1e-9);
        assert!(end.rotation.angle() < 1e-9);
        assert!((traj[1].translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((traj[2].translation - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn reports_cover_three_thirds() {
        let r = vec![d([0.0; 3], [0.0; 3]); 10];
        let p = vec![d([0.1, 0.0, 0.0], [0.0; 3]); 10];
        let reps = evaluate_sequence("h01", Scenario::Turbid, true, &p, &r, RotationError::Euler).unwrap();
        assert_eq!(reps.iter().map(|r| r.steps).collect::<Vec<_>>(), [4, 3, 3]);
        assert_eq!(reps.iter().map(|r| r.sub_sequence_index).collect::<Vec<_>>(), [1, 2, 3]);
    }

    fn delta() -> impl Strategy<Value = PoseDelta> {
        (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(-1.0f64..1.0)).prop_map(|(v, p)| d(v, p))
    }

    proptest! {
        #[test]
        fn permutation_and_scale(
            pairs in prop::collection::vec((delta(), delta()), 1..20),
            c in -5.0f64..5.0,
            rot in 0usize..20,
        ) {
            let (p, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let (v0, f0) = compute_rmse(&p, &r).unwrap();
            let k = rot % p.len();
            let (mut p2, mut r2) = (p.clone(), r.clone());
            p2.rotate_left(k);
            r2.rotate_left(k);
            let (v1, f1) = compute_rmse(&p2, &r2).unwrap();
            prop_assert!((v0 - v1).abs() < 1e-12 && (f0 - f1).abs() < 1e-12);
            // errors scaled by c: prediction = ref + c·(p − ref)
            let ps: Vec<_> = p.iter().zip(&r).map(|(a, b)| PoseDelta { v: b.v + (a.v - b.v) * c, phi: b.phi + (a.phi - b.phi) * c }).collect();
            let (vs, fs) = compute_rmse(&ps, &r).unwrap();
            prop_assert!((vs - c.abs() * v0).abs() < 1e-9 * (1.0 + v0));
            prop_assert!((fs - c.abs() * f0).abs() < 1e-9 * (1.0 + f0));
        }

        #[test]
        fn thirds_concatenate(v in prop::collection::vec(0u32..100, 3..200)) {
            let [a, b, c] = split_three(&v).unwrap();
            prop_assert!(a.len() >= b.len() && b.len() >= c.len() && a.len() - c.len() <= 1);
            let joined: Vec<u32> = a.into_iter().chain(b).chain(c).collect();
            prop_assert_eq!(joined, v);
        }
    }
}
