//! Demons-force variational registration with Gaussian (diffusion)
//! regularisation on a multi-resolution pyramid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mse, warp, DisplacementField, FieldDirection};
use crate::filters::gaussian_smooth;
use crate::volume::{resample, Interpolation, ScalarVolume, Volume};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceType {
    Demons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub iterations_per_level: usize,
    pub force_type: ForceType,
    pub regularization_sigma_mm: f64,
    pub step_tau: f64,
    pub convergence_tol: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations_per_level: 100,
            force_type: ForceType::Demons,
            regularization_sigma_mm: 3.0,
            step_tau: 1.0,
            convergence_tol: 1e-5,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (1..=4).contains(&self.levels)
            && self.iterations_per_level > 0
            && self.regularization_sigma_mm > 0.0
            && self.step_tau > 0.0
            && self.convergence_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid registration config {self:?}")))
        }
    }
}

/// Physical-space central-difference gradient (one-sided at borders).
fn gradient(vol: &ScalarVolume) -> Vec<[f64; 3]> {
    let g = vol.geometry();
    let dims = g.dims;
    let d = g.direction;
    let data = vol.data();
    (0..g.len())
        .into_par_iter()
        .map(|n| {
            let idx = g.voxel_index(n);
            let mut gi = [0.0; 3];
            for a in 0..3 {
                if dims[a] == 1 {
                    continue;
                }
                let mut lo = idx;
                let mut hi = idx;
                lo[a] = idx[a].saturating_sub(1);
                hi[a] = (idx[a] + 1).min(dims[a] - 1);
                let span = (hi[a] - lo[a]) as f64 * g.spacing[a];
                gi[a] = (data[g.linear_index(hi[0], hi[1], hi[2])]
                    - data[g.linear_index(lo[0], lo[1], lo[2])])
                    / span;
            }
            // rotate index-axis derivatives into physical axes
            [
                d[0][0] * gi[0] + d[0][1] * gi[1] + d[0][2] * gi[2],
                d[1][0] * gi[0] + d[1][1] * gi[1] + d[1][2] * gi[2],
                d[2][0] * gi[0] + d[2][1] * gi[1] + d[2][2] * gi[2],
            ]
        })
        .collect()
}

fn smooth_field(field: &DisplacementField, sigma_mm: f64) -> DisplacementField {
    let g = field.geometry();
    let sigma_vox = g.spacing.map(|s| sigma_mm / s);
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let comp: Vec<f64> = field.vectors().iter().map(|v| v[c]).collect();
            gaussian_smooth(&comp, g.dims, sigma_vox)
        })
        .collect();
    let vectors = (0..g.len())
        .map(|n| [comps[0][n], comps[1][n], comps[2][n]])
        .collect();
    DisplacementField::new(g.clone(), vectors, field.direction()).expect("smoothing keeps finite values")
}

fn downsample(vol: &ScalarVolume) -> Result<ScalarVolume> {
    let smooth = gaussian_smooth(vol.data(), vol.dims(), [1.0; 3]);
    resample(
        &Volume::from_parts(vol.geometry().clone(), smooth),
        &vol.geometry().downsampled(2),
        Interpolation::Linear,
    )
}

fn warped_mse(fixed: &ScalarVolume, moving: &ScalarVolume, u: &DisplacementField) -> Result<(ScalarVolume, f64)> {
    let w = warp(moving, None, Some(u), Interpolation::Linear)?;
    let e = mse(fixed.data(), w.data());
    Ok((w, e))
}

/// Register `moving` onto `fixed` (both on the same grid, moving already
/// affinely pre-aligned). Returns `u` on the fixed grid such that
/// `moving(x + u(x))` approximates `fixed(x)`; `direction` labels what the
/// field transfers.
pub fn register_variational(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    cfg: &RegistrationConfig,
    direction: FieldDirection,
) -> Result<DisplacementField> {
    cfg.validate()?;
    fixed.geometry().ensure_aligned(moving.geometry(), "variational registration inputs")?;

    let mut pyramid = vec![(fixed.clone(), moving.clone())];
    for _ in 1..cfg.levels {
        let (f, m) = pyramid.last().expect("non-empty");
        if f.dims().iter().any(|&d| d < 8) {
            break;
        }
        let next = (downsample(f)?, downsample(m)?);
        pyramid.push(next);
    }
    pyramid.reverse();

    let mut u: Option<DisplacementField> = None;
    for (f, m) in &pyramid {
        let geom = f.geometry();
        let zero = DisplacementField::zeros(geom.clone(), direction);
        let (_, zero_mse) = warped_mse(f, m, &zero)?;
        // start from the coarser estimate only if it beats the identity here
        let mut field = zero;
        let mut current = zero_mse;
        if let Some(prev) = &u {
            let up = prev.resampled(geom)?;
            let (_, up_mse) = warped_mse(f, m, &up)?;
            if up_mse <= zero_mse {
                field = up;
                current = up_mse;
            }
        }
        let grad_f = gradient(f);
        let norm_k = geom.spacing.iter().map(|s| s * s).sum::<f64>() / 3.0;
        let mut tau = cfg.step_tau;
        let (mut warped, _) = warped_mse(f, m, &field)?;
        for _ in 0..cfg.iterations_per_level {
            if current == 0.0 {
                break;
            }
            let fixed_data = f.data();
            let warped_data = warped.data();
            let updated: Vec<[f64; 3]> = field
                .vectors()
                .par_iter()
                .enumerate()
                .map(|(n, v)| {
                    let diff = fixed_data[n] - warped_data[n];
                    let gf = grad_f[n];
                    let g2 = gf[0] * gf[0] + gf[1] * gf[1] + gf[2] * gf[2];
                    let denom = g2 + diff * diff / norm_k;
                    if denom < 1e-12 {
                        return *v;
                    }
                    let s = tau * diff / denom;
                    [v[0] + s * gf[0], v[1] + s * gf[1], v[2] + s * gf[2]]
                })
                .collect();
            let candidate = smooth_field(
                &DisplacementField::new(geom.clone(), updated, direction)?,
                cfg.regularization_sigma_mm,
            );
            let (cand_warped, cand_mse) = warped_mse(f, m, &candidate)?;
            if cand_mse <= current {
                let rel = (current - cand_mse) / current.max(f64::MIN_POSITIVE);
                field = candidate;
                warped = cand_warped;
                current = cand_mse;
                if rel < cfg.convergence_tol {
                    break;
                }
            } else {
                tau *= 0.5;
                if tau < 1e-3 * cfg.step_tau {
                    break;
                }
            }
        }
        u = Some(field);
    }
    Ok(u.expect("at least one level"))
}
