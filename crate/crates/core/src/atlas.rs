//! Probabilistic lymph node atlas and carina distance prior in atlas space,
//! and their transfer onto subject grids.

use crate::filters::{gaussian_smooth, label_components, Connectivity};
use crate::registration::{warp_onto, AffineTransform, DisplacementField, FieldDirection};
use crate::volume::{Interpolation, LabelVolume, ScalarVolume, Volume, VolumeGeometry};
use crate::{Error, Result};

/// Default Gaussian σ (atlas voxels) applied to the averaged masks.
pub const DEFAULT_ATLAS_SIGMA_VOX: f64 = 5.0;

#[derive(Clone, Debug)]
pub struct ProbAtlas {
    pub vol: ScalarVolume,
    pub smoothing_sigma_vox: f64,
    pub subject_count: usize,
}

#[derive(Clone, Debug)]
pub struct DistanceMapPrior {
    pub vol: ScalarVolume,
    /// Physical position (mm) of the landmark in atlas space.
    pub reference_point: [f64; 3],
}

/// Voxelwise fraction of masks that are set, before smoothing.
pub fn mean_mask(masks: &[LabelVolume]) -> Result<ScalarVolume> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Argument("no masks to average".into()))?;
    let mut counts = vec![0u32; first.len()];
    for m in masks {
        first.geometry().ensure_aligned(m.geometry(), "atlas masks")?;
        for (c, &v) in counts.iter_mut().zip(m.data()) {
            *c += u32::from(v != 0);
        }
    }
    // integer counts keep the mean independent of mask order
    let n = masks.len() as f64;
    Ok(Volume::from_parts(
        first.geometry().clone(),
        counts.into_iter().map(|c| c as f64 / n).collect(),
    ))
}

/// Average warped masks, smooth with a Gaussian of `sigma_vox` voxels and
/// min-max rescale to [0, 1].
pub fn build_prob_atlas(warped_masks: &[LabelVolume], sigma_vox: f64) -> Result<ProbAtlas> {
    if !(sigma_vox >= 0.0 && sigma_vox.is_finite()) {
        return Err(Error::Argument(format!("sigma {sigma_vox}")));
    }
    let mean = mean_mask(warped_masks)?;
    if mean.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("all masks are empty".into()));
    }
    let smooth = gaussian_smooth(mean.data(), mean.dims(), [sigma_vox; 3]);
    let (lo, hi) = smooth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo <= 1e-12 {
        return Err(Error::Degenerate("smoothed atlas is constant".into()));
    }
    let data = smooth.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    Ok(ProbAtlas {
        vol: Volume::from_parts(mean.geometry().clone(), data),
        smoothing_sigma_vox: sigma_vox,
        subject_count: warped_masks.len(),
    })
}

/// Voxel axis closest to the physical superior-inferior (z) axis, and whether
/// increasing that index moves superiorly.
fn axial_axis(geom: &VolumeGeometry) -> (usize, bool) {
    let d = geom.direction;
    let axis = (0..3)
        .max_by(|&a, &b| d[2][a].abs().total_cmp(&d[2][b].abs()))
        .expect("three axes");
    (axis, d[2][axis] > 0.0)
}

/// Carina position: centroid of the trachea mask on the most superior axial
/// slice whose in-slice mask splits into ≥ 2 components (8-connectivity).
pub fn find_carina(trachea: &LabelVolume) -> Result<[f64; 3]> {
    if trachea.count_nonzero() == 0 {
        return Err(Error::EmptyMask("trachea mask is empty".into()));
    }
    let geom = trachea.geometry();
    let (axis, up) = axial_axis(geom);
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (na, nb) = (geom.dims[a], geom.dims[b]);
    let n_slices = geom.dims[axis];
    let order: Box<dyn Iterator<Item = usize>> = if up {
        Box::new((0..n_slices).rev())
    } else {
        Box::new(0..n_slices)
    };
    for s in order {
        let mut mask = vec![false; na * nb];
        let mut any = false;
        for jb in 0..nb {
            for ia in 0..na {
                let mut idx = [0usize; 3];
                idx[axis] = s;
                idx[a] = ia;
                idx[b] = jb;
                if trachea.get(idx[0], idx[1], idx[2]) != 0 {
                    mask[ia + na * jb] = true;
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        let (_, n) = label_components(&mask, [na, nb, 1], Connectivity::TwentySix);
        if n >= 2 {
            let mut sum = [0.0; 3];
            let mut count = 0.0;
            for jb in 0..nb {
                for ia in 0..na {
                    if mask[ia + na * jb] {
                        let mut idx = [0.0; 3];
                        idx[axis] = s as f64;
                        idx[a] = ia as f64;
                        idx[b] = jb as f64;
                        let p = geom.index_to_physical(idx);
                        for c in 0..3 {
                            sum[c] += p[c];
                        }
                        count += 1.0;
                    }
                }
            }
            return Ok(sum.map(|v| v / count));
        }
    }
    Err(Error::Landmark("trachea never splits into two components".into()))
}

/// Binary mask of the inclusive bounding box of `mask`'s foreground.
pub fn bounding_box_region(mask: &LabelVolume) -> Result<LabelVolume> {
    let (lo, hi) = mask
        .bounding_box()
        .ok_or_else(|| Error::EmptyMask("region mask is empty".into()))?;
    LabelVolume::from_fn(mask.geometry().clone(), |i, j, k| {
        let idx = [i, j, k];
        u32::from((0..3).all(|a| idx[a] >= lo[a] && idx[a] <= hi[a]))
    })
}

/// Euclidean distance (mm) to `reference`, divided by the largest distance
/// attained inside `norm_region` and clamped to 1.
pub fn build_distance_prior(
    geometry: &VolumeGeometry,
    reference: [f64; 3],
    norm_region: &LabelVolume,
) -> Result<DistanceMapPrior> {
    geometry.validate()?;
    geometry.ensure_aligned(norm_region.geometry(), "distance normalisation region")?;
    if !geometry.contains_index(geometry.physical_to_index(reference)) {
        return Err(Error::Argument(format!(
            "reference point {reference:?} lies outside the atlas grid"
        )));
    }
    let dist: Vec<f64> = (0..geometry.len())
        .map(|n| {
            let [i, j, k] = geometry.voxel_index(n);
            let p = geometry.voxel_center(i, j, k);
            ((p[0] - reference[0]).powi(2) + (p[1] - reference[1]).powi(2) + (p[2] - reference[2]).powi(2)).sqrt()
        })
        .collect();
    let max_in = dist
        .iter()
        .zip(norm_region.data())
        .filter(|(_, &m)| m != 0)
        .map(|(&d, _)| d)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max_in.is_finite() {
        return Err(Error::EmptyMask("distance normalisation region is empty".into()));
    }
    if max_in <= 0.0 {
        return Err(Error::Degenerate("normalisation region only contains the reference".into()));
    }
    let data = dist.iter().map(|d| (d / max_in).min(1.0)).collect();
    Ok(DistanceMapPrior {
        vol: Volume::from_parts(geometry.clone(), data),
        reference_point: reference,
    })
}

/// Warp one atlas-space prior onto the subject grid (linear interpolation,
/// clamped to [0, 1]).
pub fn transfer_prior(
    prior: &ScalarVolume,
    affine: &AffineTransform,
    field: &DisplacementField,
    subject_geom: &VolumeGeometry,
) -> Result<ScalarVolume> {
    if field.direction() != FieldDirection::AtlasToSubject {
        return Err(Error::Argument(
            "prior transfer needs an atlas-to-subject displacement field".into(),
        ));
    }
    let w = warp_onto(prior, Some(affine), Some(field), subject_geom, Interpolation::Linear)?;
    w.map(|x| x.clamp(0.0, 1.0))
}

/// Warp both priors onto the subject grid.
pub fn transfer_priors(
    pa: &ProbAtlas,
    dm: &DistanceMapPrior,
    affine: &AffineTransform,
    field: &DisplacementField,
    subject_geom: &VolumeGeometry,
) -> Result<(ScalarVolume, ScalarVolume)> {
    Ok((
        transfer_prior(&pa.vol, affine, field, subject_geom)?,
        transfer_prior(&dm.vol, affine, field, subject_geom)?,
    ))
}
