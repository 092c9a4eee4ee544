//! Volume representation shared by every stage of the pipeline.
//!
//! Voxel data is stored x-fastest (`index = i + nx * (j + ny * k)`), matching
//! the on-disk NIfTI layout. Physical positions follow
//! `p = origin + direction * (spacing ⊙ index)` with `direction` holding the
//! unit axis vectors as columns.

mod nifti;
pub(crate) mod ops;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use nifti::{
    read_field, read_nifti, write_field, write_nifti, write_nifti_as, DefaultDatatype,
    NiftiDatatype, NiftiImage,
};
pub use ops::{
    crop_to_mask_bbox, normalize_ct, pad_to_original, percentile, resample, CropRecord,
    Interpolation,
};

/// Relative tolerance used to decide whether two geometries describe the same grid.
pub const GEOMETRY_RTOL: f64 = 1e-5;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    pub dims: [usize; 3],
    /// mm per voxel along each voxel axis.
    pub spacing: [f64; 3],
    /// Physical position (mm) of the centre of voxel (0, 0, 0).
    pub origin: [f64; 3],
    /// Row-major 3x3 matrix; column `c` is the unit direction of voxel axis `c`.
    pub direction: [[f64; 3]; 3],
}

pub(crate) fn approx_eq(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
}

impl VolumeGeometry {
    /// Axis-aligned geometry with origin at zero.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let geom = Self {
            dims,
            spacing,
            origin: [0.0; 3],
            direction: IDENTITY3,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_direction(mut self, direction: [[f64; 3]; 3]) -> Result<Self> {
        self.direction = direction;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Geometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry("non-finite origin".into()));
        }
        let d = self.direction_matrix();
        let gram = d.transpose() * d;
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMAL_TOL {
            return Err(Error::Geometry(format!(
                "direction matrix is not orthonormal: {:?}",
                self.direction
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_index(&self, linear: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    pub fn direction_matrix(&self) -> Matrix3<f64> {
        let d = &self.direction;
        Matrix3::new(
            d[0][0], d[0][1], d[0][2], d[1][0], d[1][1], d[1][2], d[2][0], d[2][1], d[2][2],
        )
    }

    /// Voxel-to-physical affine as (linear part, offset).
    pub fn index_to_physical_affine(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let scale = Matrix3::from_diagonal(&Vector3::from(self.spacing));
        (self.direction_matrix() * scale, Vector3::from(self.origin))
    }

    /// Continuous voxel index to physical position (mm).
    pub fn index_to_physical(&self, index: [f64; 3]) -> [f64; 3] {
        let d = &self.direction;
        let s = [
            index[0] * self.spacing[0],
            index[1] * self.spacing[1],
            index[2] * self.spacing[2],
        ];
        let mut p = self.origin;
        for (r, pr) in p.iter_mut().enumerate() {
            *pr += d[r][0] * s[0] + d[r][1] * s[1] + d[r][2] * s[2];
        }
        p
    }

    /// Physical position (mm) to continuous voxel index.
    pub fn physical_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        let d = &self.direction;
        let q = [
            p[0] - self.origin[0],
            p[1] - self.origin[1],
            p[2] - self.origin[2],
        ];
        let mut idx = [0.0; 3];
        for (c, ic) in idx.iter_mut().enumerate() {
            // direction is orthonormal, so its inverse is the transpose
            *ic = (d[0][c] * q[0] + d[1][c] * q[1] + d[2][c] * q[2]) / self.spacing[c];
        }
        idx
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.index_to_physical([i as f64, j as f64, k as f64])
    }

    /// True when the continuous index lies within the voxel extent of the grid.
    pub fn contains_index(&self, idx: [f64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= -0.5 && idx[a] <= self.dims[a] as f64 - 0.5)
    }

    /// Two geometries are aligned iff dims match and every real field agrees
    /// within [`GEOMETRY_RTOL`].
    pub fn is_aligned(&self, other: &VolumeGeometry) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                approx_eq(self.spacing[a], other.spacing[a], GEOMETRY_RTOL)
                    && approx_eq(self.origin[a], other.origin[a], GEOMETRY_RTOL)
                    && (0..3).all(|b| {
                        approx_eq(self.direction[a][b], other.direction[a][b], GEOMETRY_RTOL)
                    })
            })
    }

    pub fn ensure_aligned(&self, other: &VolumeGeometry, what: &str) -> Result<()> {
        if self.is_aligned(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what}: grids differ (dims {:?} vs {:?}, spacing {:?} vs {:?})",
                self.dims, other.dims, self.spacing, other.spacing
            )))
        }
    }

    /// Grid coarsened by an integer factor; voxel centres sit at block centres.
    pub fn downsampled(&self, factor: usize) -> VolumeGeometry {
        let f = factor.max(1);
        let dims = self.dims.map(|d| d.div_ceil(f));
        let spacing = self.spacing.map(|s| s * f as f64);
        let half = (f as f64 - 1.0) / 2.0;
        let origin = self.index_to_physical([half, half, half]);
        VolumeGeometry {
            dims,
            spacing,
            origin,
            direction: self.direction,
        }
    }

    /// Geometry of the sub-grid starting at voxel `start` with extent `dims`.
    pub fn subregion(&self, start: [usize; 3], dims: [usize; 3]) -> VolumeGeometry {
        VolumeGeometry {
            dims,
            spacing: self.spacing,
            origin: self.index_to_physical(start.map(|s| s as f64)),
            direction: self.direction,
        }
    }

    /// Physical centre of the grid's voxel-centre bounding box.
    pub fn center(&self) -> [f64; 3] {
        self.index_to_physical(self.dims.map(|d| (d as f64 - 1.0) / 2.0))
    }
}

pub(crate) const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Sample type stored in a [`Volume`].
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    /// Whether linear interpolation is meaningful for this sample type.
    const INTERPOLABLE: bool;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_valid(self) -> bool;
}

impl Voxel for f64 {
    const INTERPOLABLE: bool = true;
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn is_valid(self) -> bool {
        self.is_finite()
    }
}

impl Voxel for u32 {
    const INTERPOLABLE: bool = false;
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, u32::MAX as f64) as u32
    }
    #[inline]
    fn is_valid(self) -> bool {
        true
    }
}

/// A 3D grid of samples with physical geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    geom: VolumeGeometry,
    data: Vec<T>,
}

/// Real-valued volume (CT, probabilities, distance and weight maps).
pub type ScalarVolume = Volume<f64>;
/// Integer label volume (ground truth, organ masks, binarized predictions).
pub type LabelVolume = Volume<u32>;

impl<T: Voxel> Volume<T> {
    pub fn new(geom: VolumeGeometry, data: Vec<T>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::Data(format!(
                "non-finite sample at linear index {pos}"
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: VolumeGeometry, value: T) -> Result<Self> {
        let n = geom.len();
        Self::new(geom, vec![value; n])
    }

    pub fn zeros(geom: VolumeGeometry) -> Result<Self> {
        Self::filled(geom, T::default())
    }

    pub fn from_fn(geom: VolumeGeometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(geom, data)
    }

    /// Same grid, new samples.
    pub fn with_data<U: Voxel>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Volume::new(self.geom.clone(), data)
    }

    /// Internal constructor for data already known to be valid.
    pub(crate) fn from_parts(geom: VolumeGeometry, data: Vec<T>) -> Self {
        debug_assert_eq!(geom.len(), data.len());
        Self { geom, data }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geom.linear_index(i, j, k)]
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Result<Volume<U>> {
        Volume::new(self.geom.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Replace the geometry while keeping the samples (dims must match).
    pub fn with_geometry(&self, geom: VolumeGeometry) -> Result<Self> {
        if geom.dims != self.geom.dims {
            return Err(Error::Geometry(format!(
                "cannot relabel {:?} grid as {:?}",
                self.geom.dims, geom.dims
            )));
        }
        Volume::new(geom, self.data.clone())
    }
}

impl ScalarVolume {
    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn ensure_unit_range(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            Ok(())
        } else {
            Err(Error::Argument(format!("{what} must lie in [0, 1]")))
        }
    }
}

impl LabelVolume {
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of all voxels with a non-zero label.
    pub fn nonzero_mask(&self) -> LabelVolume {
        Volume::from_parts(
            self.geom.clone(),
            self.data.iter().map(|&v| u32::from(v != 0)).collect(),
        )
    }

    /// Inclusive voxel bounding box of non-zero labels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (n, &v) in self.data.iter().enumerate() {
            if v != 0 {
                any = true;
                let idx = self.geom.voxel_index(n);
                for a in 0..3 {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    pub fn to_scalar(&self) -> ScalarVolume {
        Volume::from_parts(
            self.geom.clone(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}
