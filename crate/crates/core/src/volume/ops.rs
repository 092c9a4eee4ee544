use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LabelVolume, ScalarVolume, Volume, VolumeGeometry, Voxel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Where a cropped sub-volume sits inside its source grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub original: VolumeGeometry,
    /// First voxel of the crop (inclusive).
    pub start: [usize; 3],
    pub dims: [usize; 3],
}

impl CropRecord {
    pub fn cropped_geometry(&self) -> VolumeGeometry {
        self.original.subregion(self.start, self.dims)
    }

    /// Cut the crop region out of a volume on the original grid.
    pub fn apply<T: Voxel>(&self, vol: &Volume<T>) -> Result<Volume<T>> {
        self.original
            .ensure_aligned(vol.geometry(), "crop source")?;
        let [cx, cy, cz] = self.dims;
        let [sx, sy, sz] = self.start;
        let mut data = Vec::with_capacity(cx * cy * cz);
        for k in 0..cz {
            for j in 0..cy {
                let row = vol.geometry().linear_index(sx, sy + j, sz + k);
                data.extend_from_slice(&vol.data()[row..row + cx]);
            }
        }
        Ok(Volume::from_parts(self.cropped_geometry(), data))
    }
}

/// Crop `vol` to the bounding box of `mask > 0`, grown by `margin_mm`
/// (rounded up to whole voxels per axis, clamped to the grid).
pub fn crop_to_mask_bbox(
    vol: &ScalarVolume,
    mask: &LabelVolume,
    margin_mm: f64,
) -> Result<(ScalarVolume, CropRecord)> {
    vol.geometry().ensure_aligned(mask.geometry(), "crop mask")?;
    if !(margin_mm >= 0.0 && margin_mm.is_finite()) {
        return Err(Error::Argument(format!("margin {margin_mm} mm")));
    }
    let (lo, hi) = mask
        .bounding_box()
        .ok_or_else(|| Error::EmptyMask("crop mask has no foreground".into()))?;
    let geom = vol.geometry();
    let mut start = [0; 3];
    let mut dims = [0; 3];
    for a in 0..3 {
        // small slack so that e.g. 2.0000000001 voxels does not become 3
        let m = (margin_mm / geom.spacing[a] - 1e-9).ceil().max(0.0) as usize;
        start[a] = lo[a].saturating_sub(m);
        let end = (hi[a] + m).min(geom.dims[a] - 1);
        dims[a] = end - start[a] + 1;
    }
    let record = CropRecord {
        original: geom.clone(),
        start,
        dims,
    };
    Ok((record.apply(vol)?, record))
}

/// Embed a cropped volume back into its original grid, zero elsewhere.
pub fn pad_to_original<T: Voxel>(vol: &Volume<T>, crop: &CropRecord) -> Result<Volume<T>> {
    if vol.dims() != crop.dims {
        return Err(Error::Geometry(format!(
            "volume dims {:?} do not match crop region {:?}",
            vol.dims(),
            crop.dims
        )));
    }
    let geom = crop.original.clone();
    let mut data = vec![T::default(); geom.len()];
    let [cx, cy, cz] = crop.dims;
    let [sx, sy, sz] = crop.start;
    for k in 0..cz {
        for j in 0..cy {
            let dst = geom.linear_index(sx, sy + j, sz + k);
            let src = vol.geometry().linear_index(0, j, k);
            data[dst..dst + cx].copy_from_slice(&vol.data()[src..src + cx]);
        }
    }
    Ok(Volume::from_parts(geom, data))
}

/// Percentile `q` (0..=100) of sorted samples, linearly interpolated between
/// order statistics at rank `q/100 * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let rank = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clip to the 0.5/99.5 foreground percentiles, then z-score with the
/// clipped foreground statistics.
pub fn normalize_ct(vol: &ScalarVolume, fg: &LabelVolume) -> Result<ScalarVolume> {
    vol.geometry().ensure_aligned(fg.geometry(), "foreground mask")?;
    let mut samples: Vec<f64> = vol
        .data()
        .iter()
        .zip(fg.data())
        .filter(|(_, &m)| m > 0)
        .map(|(&v, _)| v)
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyMask("normalization foreground is empty".into()));
    }
    samples.sort_by(f64::total_cmp);
    let lo = percentile(&samples, 0.5);
    let hi = percentile(&samples, 99.5);
    let n = samples.len() as f64;
    let mean = samples.iter().map(|v| v.clamp(lo, hi)).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|v| (v.clamp(lo, hi) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Err(Error::DegenerateIntensity(format!(
            "foreground standard deviation {std:e} after clipping"
        )));
    }
    vol.map(|v| (v.clamp(lo, hi) - mean) / std)
}

/// Affine map from the continuous index space of `target` to that of `source`.
pub(crate) fn index_map(target: &VolumeGeometry, source: &VolumeGeometry) -> ([[f64; 3]; 3], [f64; 3]) {
    let (lt, ot) = target.index_to_physical_affine();
    let (ls, os) = source.index_to_physical_affine();
    let ls_inv = ls.try_inverse().expect("valid geometry has invertible axes");
    let m = ls_inv * lt;
    let o = ls_inv * (ot - os);
    (
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ],
        [o[0], o[1], o[2]],
    )
}

#[inline]
pub(crate) fn inside(dims: [usize; 3], idx: [f64; 3]) -> bool {
    (0..3).all(|a| idx[a] >= -0.5 && idx[a] <= dims[a] as f64 - 0.5)
}

/// Nearest-neighbour sample; zero outside the voxel extent of the grid.
#[inline]
pub(crate) fn sample_nearest<T: Voxel>(data: &[T], dims: [usize; 3], idx: [f64; 3]) -> T {
    if !inside(dims, idx) {
        return T::default();
    }
    let r = |a: usize| (idx[a].round().max(0.0) as usize).min(dims[a] - 1);
    data[r(0) + dims[0] * (r(1) + dims[1] * r(2))]
}

pub(crate) fn sample<T: Voxel>(data: &[T], dims: [usize; 3], idx: [f64; 3], mode: Interpolation) -> T {
    match mode {
        Interpolation::Nearest => sample_nearest(data, dims, idx),
        Interpolation::Linear => {
            // only reached for interpolable types
            let v = trilinear_generic(data, dims, idx);
            T::from_f64(v)
        }
    }
}

/// Trilinear sample; zero outside the voxel extent, edge-replicated within
/// the half-voxel border.
pub(crate) fn trilinear_generic<T: Voxel>(data: &[T], dims: [usize; 3], idx: [f64; 3]) -> f64 {
    if !inside(dims, idx) {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut lo = [0isize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let fl = idx[a].floor();
        f[a] = idx[a] - fl;
        lo[a] = fl as isize;
    }
    for corner in 0..8 {
        let mut w = 1.0;
        let mut lin = 0usize;
        let mut stride = 1usize;
        for a in 0..3 {
            let up = (corner >> a) & 1 == 1;
            w *= if up { f[a] } else { 1.0 - f[a] };
            let c = (lo[a] + up as isize).clamp(0, dims[a] as isize - 1) as usize;
            lin += c * stride;
            stride *= dims[a];
        }
        if w != 0.0 {
            acc += w * data[lin].to_f64();
        }
    }
    acc
}

pub(crate) fn check_mode<T: Voxel>(mode: Interpolation) -> Result<()> {
    if mode == Interpolation::Linear && !T::INTERPOLABLE {
        Err(Error::Mode("label volumes require nearest-neighbour interpolation".into()))
    } else {
        Ok(())
    }
}

/// Resample onto `target`; positions outside the source grid become 0.
pub fn resample<T: Voxel>(
    vol: &Volume<T>,
    target: &VolumeGeometry,
    mode: Interpolation,
) -> Result<Volume<T>> {
    check_mode::<T>(mode)?;
    target.validate()?;
    let (m, o) = index_map(target, vol.geometry());
    let src_dims = vol.dims();
    let [nx, ny, _] = target.dims;
    let data: Vec<T> = (0..target.len())
        .into_par_iter()
        .map(|n| {
            let (i, j, k) = ((n % nx) as f64, ((n / nx) % ny) as f64, (n / (nx * ny)) as f64);
            let mut idx = o;
            for (r, v) in idx.iter_mut().enumerate() {
                *v += m[r][0] * i + m[r][1] * j + m[r][2] * k;
            }
            sample(vol.data(), src_dims, idx, mode)
        })
        .collect();
    Ok(Volume::from_parts(target.clone(), data))
}
