use crate::filters::squared_distance_to;
use crate::volume::{LabelVolume, ScalarVolume, Volume};
use crate::{Error, Result};

/// Structures whose masks drive rigid and affine registration.
pub const DEFAULT_STRUCTURES: [&str; 5] = ["bones", "heart", "esophagus", "trachea", "aorta"];

/// Signed distances are clamped to ±this many mm.
pub const FEATURE_CLAMP_MM: f64 = 30.0;

/// Signed Euclidean distance map (mm) of a binary mask, clamped to
/// ±[`FEATURE_CLAMP_MM`].
///
/// Outside voxels carry the centre-to-centre distance to the nearest mask
/// voxel. Inside voxels carry `-(d_out - h/2)` where `d_out` is the distance
/// to the nearest background voxel and `h` the smallest spacing.
pub fn signed_distance_map(mask: &LabelVolume) -> ScalarVolume {
    let geom = mask.geometry();
    let inside: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    let outside: Vec<bool> = inside.iter().map(|&v| !v).collect();
    let to_in = squared_distance_to(&inside, geom.dims, geom.spacing);
    let to_out = squared_distance_to(&outside, geom.dims, geom.spacing);
    let half = 0.5 * geom.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let data = inside
        .iter()
        .enumerate()
        .map(|(n, &is_in)| {
            let d = if is_in {
                -(to_out[n].sqrt() - half)
            } else {
                to_in[n].sqrt()
            };
            d.clamp(-FEATURE_CLAMP_MM, FEATURE_CLAMP_MM)
        })
        .collect();
    Volume::from_parts(geom.clone(), data)
}

/// Registration feature: signed distance map of the union of all voxels
/// whose label is in `labels`, across every mask.
pub fn masks_to_feature(masks: &[LabelVolume], labels: &[u32]) -> Result<ScalarVolume> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Argument("no structure masks given".into()))?;
    if labels.is_empty() {
        return Err(Error::Argument("empty structure selection".into()));
    }
    for m in &masks[1..] {
        first.geometry().ensure_aligned(m.geometry(), "structure masks")?;
    }
    let mut union = vec![0u32; first.len()];
    for m in masks {
        for (u, &v) in union.iter_mut().zip(m.data()) {
            if v != 0 && labels.contains(&v) {
                *u = 1;
            }
        }
    }
    if union.iter().all(|&v| v == 0) {
        return Err(Error::EmptyMask("selected structures are empty".into()));
    }
    Ok(signed_distance_map(&Volume::from_parts(first.geometry().clone(), union)))
}
