//! Registration of subject and atlas volumes.
//!
//! All transforms follow the pull-back convention: a transform attached to
//! an output grid maps each output point `x` (mm) to the position in the
//! input image that is sampled there. A rigid/affine transform followed by a
//! displacement field samples the input at `affine(x) + u(x)`.

mod chain;
mod demons;
mod feature;
mod linear;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::ops::{check_mode, index_map, sample};
use crate::volume::{Interpolation, Volume, VolumeGeometry, Voxel};
use crate::{Error, Result};

pub use chain::{register_chain, ChainResiduals, ChainResult};
pub use demons::{register_variational, RegistrationConfig};
pub use feature::{masks_to_feature, signed_distance_map, DEFAULT_STRUCTURES, FEATURE_CLAMP_MM};
pub use linear::{register_affine, register_affine_with, register_rigid, register_rigid_with, LinearConfig, LinearResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rigid,
    Affine,
}

/// 4x4 homogeneous transform in physical (mm) coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    matrix: [[f64; 4]; 4],
    kind: TransformKind,
}

impl AffineTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            matrix: m,
            kind: TransformKind::Rigid,
        }
    }

    pub fn new(matrix: [[f64; 4]; 4], kind: TransformKind) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite transform entry".into()));
        }
        if (matrix[3][0], matrix[3][1], matrix[3][2], matrix[3][3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(Error::Argument("last row must be (0, 0, 0, 1)".into()));
        }
        let t = Self { matrix, kind };
        if kind == TransformKind::Rigid && !t.is_rigid(1e-5) {
            return Err(Error::Argument(
                "rigid transform must have an orthonormal rotation with determinant +1".into(),
            ));
        }
        if t.linear().determinant().abs() < 1e-12 {
            return Err(Error::Argument("singular transform".into()));
        }
        Ok(t)
    }

    pub fn from_parts(linear: Matrix3<f64>, translation: Vector3<f64>, kind: TransformKind) -> Result<Self> {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = linear[(r, c)];
            }
            m[r][3] = translation[r];
        }
        m[3][3] = 1.0;
        Self::new(m, kind)
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        let mut out = Self::identity();
        for (r, v) in t.iter().enumerate() {
            out.matrix[r][3] = *v;
        }
        out
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn linear(&self) -> Matrix3<f64> {
        let m = &self.matrix;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.matrix[0][3], self.matrix[1][3], self.matrix[2][3])
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.matrix[r][c])
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
        }
        out
    }

    fn is_rigid(&self, tol: f64) -> bool {
        let l = self.linear();
        (l.transpose() * l - Matrix3::identity()).abs().max() <= tol
            && (l.determinant() - 1.0).abs() <= tol
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let m = self.to_matrix4() * other.to_matrix4();
        let kind = if self.kind == TransformKind::Rigid && other.kind == TransformKind::Rigid {
            TransformKind::Rigid
        } else {
            TransformKind::Affine
        };
        AffineTransform {
            matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            kind,
        }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = self
            .to_matrix4()
            .try_inverse()
            .ok_or_else(|| Error::Argument("singular transform".into()))?;
        let mut matrix: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]));
        matrix[3] = [0.0, 0.0, 0.0, 1.0];
        Ok(AffineTransform {
            matrix,
            kind: self.kind,
        })
    }

    /// Rotation angle (radians) of the linear part, for rigid transforms.
    pub fn rotation_angle(&self) -> f64 {
        let l = self.linear();
        ((l.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// 16 numbers, four per line, row-major.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.matrix {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Parse 16 whitespace-separated numbers. The kind is `Rigid` when the
    /// linear part is a proper rotation, else `Affine`.
    pub fn from_text(text: &str) -> Result<Self> {
        let values = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Format(format!("transform entry {t:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 16 {
            return Err(Error::Format(format!(
                "transform file holds {} numbers, expected 16",
                values.len()
            )));
        }
        let matrix: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| values[4 * r + c]));
        let probe = AffineTransform {
            matrix,
            kind: TransformKind::Affine,
        };
        let kind = if probe.is_rigid(1e-5) {
            TransformKind::Rigid
        } else {
            TransformKind::Affine
        };
        Self::new(matrix, kind)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Which way a displacement field transfers images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldDirection {
    /// Defined on the subject grid; pulls atlas-space images onto it.
    AtlasToSubject,
    /// Defined on the atlas grid; pulls subject-space images onto it.
    SubjectToAtlas,
}

impl FieldDirection {
    pub fn tag(self) -> &'static str {
        match self {
            FieldDirection::AtlasToSubject => "atlas2subject",
            FieldDirection::SubjectToAtlas => "subject2atlas",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "atlas2subject" => Some(FieldDirection::AtlasToSubject),
            "subject2atlas" => Some(FieldDirection::SubjectToAtlas),
            _ => None,
        }
    }
}

/// Dense per-voxel displacement (mm) on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    geom: VolumeGeometry,
    vectors: Vec<[f64; 3]>,
    direction: FieldDirection,
}

impl DisplacementField {
    pub fn new(geom: VolumeGeometry, vectors: Vec<[f64; 3]>, direction: FieldDirection) -> Result<Self> {
        geom.validate()?;
        if vectors.len() != geom.len() {
            return Err(Error::Geometry(format!(
                "{} vectors for a grid of {} voxels",
                vectors.len(),
                geom.len()
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite displacement".into()));
        }
        Ok(Self {
            geom,
            vectors,
            direction,
        })
    }

    pub fn zeros(geom: VolumeGeometry, direction: FieldDirection) -> Self {
        let n = geom.len();
        Self {
            geom,
            vectors: vec![[0.0; 3]; n],
            direction,
        }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geom
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn direction(&self) -> FieldDirection {
        self.direction
    }

    pub fn with_direction(mut self, direction: FieldDirection) -> Self {
        self.direction = direction;
        self
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Apply a linear map to every vector. Turns a field estimated against an
    /// affinely pre-warped image (`A(x + v)`) into the `A(x) + L v` form.
    pub fn premultiplied(&self, linear: &Matrix3<f64>) -> Self {
        let vectors = self
            .vectors
            .iter()
            .map(|v| {
                let w = linear * Vector3::new(v[0], v[1], v[2]);
                [w[0], w[1], w[2]]
            })
            .collect();
        Self {
            geom: self.geom.clone(),
            vectors,
            direction: self.direction,
        }
    }

    /// Component-wise linear resampling onto another grid.
    pub fn resampled(&self, target: &VolumeGeometry) -> Result<Self> {
        let comps: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let vol = Volume::from_parts(
                    self.geom.clone(),
                    self.vectors.iter().map(|v| v[c]).collect(),
                );
                crate::volume::resample(&vol, target, Interpolation::Linear).map(Volume::into_data)
            })
            .collect::<Result<_>>()?;
        let vectors = (0..target.len())
            .map(|n| [comps[0][n], comps[1][n], comps[2][n]])
            .collect();
        Ok(Self {
            geom: target.clone(),
            vectors,
            direction: self.direction,
        })
    }
}

/// Warp `vol` onto the field's grid (or its own grid when there is no
/// field), sampling at `affine(x) + u(x)`.
pub fn warp<T: Voxel>(
    vol: &Volume<T>,
    affine: Option<&AffineTransform>,
    field: Option<&DisplacementField>,
    mode: Interpolation,
) -> Result<Volume<T>> {
    let target = field.map(|f| f.geometry().clone()).unwrap_or_else(|| vol.geometry().clone());
    warp_onto(vol, affine, field, &target, mode)
}

/// Like [`warp`] with an explicit output grid; a field must live on `target`.
pub fn warp_onto<T: Voxel>(
    vol: &Volume<T>,
    affine: Option<&AffineTransform>,
    field: Option<&DisplacementField>,
    target: &VolumeGeometry,
    mode: Interpolation,
) -> Result<Volume<T>> {
    if affine.is_none() && field.is_none() {
        return Err(Error::Argument("warp needs an affine transform or a displacement field".into()));
    }
    check_mode::<T>(mode)?;
    if let Some(f) = field {
        f.geometry().ensure_aligned(target, "displacement field grid")?;
    }
    let src = vol.geometry();
    let dims = vol.dims();
    let (to_phys, to_phys_off) = index_map(target, &identity_frame());
    let [nx, ny, _] = target.dims;
    let (src_lin, src_off) = {
        let (l, o) = src.index_to_physical_affine();
        let inv = l.try_inverse().expect("valid geometry");
        (inv, -(inv * o))
    };
    let data: Vec<T> = (0..target.len())
        .into_par_iter()
        .map(|n| {
            let idx = [(n % nx) as f64, ((n / nx) % ny) as f64, (n / (nx * ny)) as f64];
            let mut p = to_phys_off;
            for (r, v) in p.iter_mut().enumerate() {
                *v += to_phys[r][0] * idx[0] + to_phys[r][1] * idx[1] + to_phys[r][2] * idx[2];
            }
            if let Some(a) = affine {
                p = a.apply(p);
            }
            if let Some(f) = field {
                let u = f.vectors[n];
                p = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
            }
            let q = src_lin * Vector3::from(p) + src_off;
            sample(vol.data(), dims, [q[0], q[1], q[2]], mode)
        })
        .collect();
    Ok(Volume::from_parts(target.clone(), data))
}

/// Unit grid whose index space is physical space; used to get index→mm maps.
fn identity_frame() -> VolumeGeometry {
    VolumeGeometry {
        dims: [1, 1, 1],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        direction: crate::volume::IDENTITY3,
    }
}

/// Mean squared difference between two aligned scalar volumes.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len().max(1) as f64
}
