//! Multi-resolution rigid (6 parameters) and affine (12 parameters)
//! registration minimising the mean squared difference of feature maps.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AffineTransform, TransformKind};
use crate::filters::gaussian_smooth;
use crate::volume::{resample, Interpolation, ScalarVolume, Volume, VolumeGeometry};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    pub levels: usize,
    pub iterations_per_level: usize,
    /// Initial step (mm of motion at the characteristic radius) at the
    /// coarsest level; halved per finer level.
    pub initial_step_mm: f64,
    /// Stop a level once the step falls below this (mm).
    pub min_step_mm: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations_per_level: 200,
            initial_step_mm: 4.0,
            min_step_mm: 1e-3,
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 4 || self.iterations_per_level == 0 {
            return Err(Error::Argument(format!("invalid linear registration config {self:?}")));
        }
        if !(self.initial_step_mm > 0.0 && self.min_step_mm > 0.0) {
            return Err(Error::Argument("registration steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinearResult {
    pub transform: AffineTransform,
    /// Objective at the starting transform on the full-resolution grid.
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Parameterisation of `T(x) = A(θ) (x - c) + c + t(θ)`.
trait Model: Sync {
    fn n_params(&self) -> usize;
    fn linear(&self, theta: &[f64]) -> Matrix3<f64>;
    fn translation(&self, theta: &[f64]) -> Vector3<f64>;
    /// Partial derivatives of A(θ) for the non-translation parameters.
    fn linear_derivatives(&self, theta: &[f64]) -> Vec<Matrix3<f64>>;
    /// Scale of each parameter (mm of motion per unit change).
    fn scales(&self, radius: f64) -> Vec<f64>;
}

struct Rigid;

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}
fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}
fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}
fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}
fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

impl Model for Rigid {
    fn n_params(&self) -> usize {
        6
    }
    fn linear(&self, th: &[f64]) -> Matrix3<f64> {
        rot_z(th[2]) * rot_y(th[1]) * rot_x(th[0])
    }
    fn translation(&self, th: &[f64]) -> Vector3<f64> {
        Vector3::new(th[3], th[4], th[5])
    }
    fn linear_derivatives(&self, th: &[f64]) -> Vec<Matrix3<f64>> {
        let (rx, ry, rz) = (rot_x(th[0]), rot_y(th[1]), rot_z(th[2]));
        vec![
            rz * ry * d_rot_x(th[0]),
            rz * d_rot_y(th[1]) * rx,
            d_rot_z(th[2]) * ry * rx,
        ]
    }
    fn scales(&self, radius: f64) -> Vec<f64> {
        vec![radius, radius, radius, 1.0, 1.0, 1.0]
    }
}

struct Affine;

impl Model for Affine {
    fn n_params(&self) -> usize {
        12
    }
    fn linear(&self, th: &[f64]) -> Matrix3<f64> {
        Matrix3::identity() + Matrix3::from_row_slice(&th[..9])
    }
    fn translation(&self, th: &[f64]) -> Vector3<f64> {
        Vector3::new(th[9], th[10], th[11])
    }
    fn linear_derivatives(&self, _th: &[f64]) -> Vec<Matrix3<f64>> {
        (0..9)
            .map(|p| {
                let mut m = Matrix3::zeros();
                m[(p / 3, p % 3)] = 1.0;
                m
            })
            .collect()
    }
    fn scales(&self, radius: f64) -> Vec<f64> {
        let mut s = vec![radius; 9];
        s.extend([1.0, 1.0, 1.0]);
        s
    }
}

fn to_transform(model: &dyn Model, th: &[f64], centre: Vector3<f64>, kind: TransformKind) -> Result<AffineTransform> {
    let a = model.linear(th);
    let b = centre + model.translation(th) - a * centre;
    AffineTransform::from_parts(a, b, kind)
}

/// Trilinear sample and index-space gradient; `None` outside `[0, n-1]`.
#[inline]
fn sample_with_gradient(data: &[f64], dims: [usize; 3], idx: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let max = dims[a] as f64 - 1.0;
        if !(idx[a] >= 0.0 && idx[a] <= max) {
            return None;
        }
        let fl = idx[a].floor().min((dims[a] as f64 - 2.0).max(0.0));
        i0[a] = fl as usize;
        f[a] = idx[a] - fl;
    }
    let step = |a: usize| usize::from(dims[a] > 1);
    let at = |dx: usize, dy: usize, dz: usize| {
        data[(i0[0] + dx * step(0)) + dims[0] * ((i0[1] + dy * step(1)) + dims[1] * (i0[2] + dz * step(2)))]
    };
    let c = [
        [[at(0, 0, 0), at(0, 0, 1)], [at(0, 1, 0), at(0, 1, 1)]],
        [[at(1, 0, 0), at(1, 0, 1)], [at(1, 1, 0), at(1, 1, 1)]],
    ];
    let w = |a: usize, bit: usize| if bit == 1 { f[a] } else { 1.0 - f[a] };
    let dw = |bit: usize| if bit == 1 { 1.0 } else { -1.0 };
    let mut v = 0.0;
    let mut g = [0.0; 3];
    for x in 0..2 {
        for y in 0..2 {
            for z in 0..2 {
                let s = c[x][y][z];
                v += w(0, x) * w(1, y) * w(2, z) * s;
                g[0] += dw(x) * w(1, y) * w(2, z) * s;
                g[1] += w(0, x) * dw(y) * w(2, z) * s;
                g[2] += w(0, x) * w(1, y) * dw(z) * s;
            }
        }
    }
    Some((v, g))
}

struct Level {
    fixed: ScalarVolume,
    moving: ScalarVolume,
    /// Physical positions of fixed voxel centres.
    points: Vec<Vector3<f64>>,
}

impl Level {
    fn new(fixed: ScalarVolume, moving: ScalarVolume) -> Self {
        let g = fixed.geometry().clone();
        let points = (0..g.len())
            .map(|n| {
                let [i, j, k] = g.voxel_index(n);
                Vector3::from(g.voxel_center(i, j, k))
            })
            .collect();
        Self {
            fixed,
            moving,
            points,
        }
    }

    /// Mean squared difference over fixed voxels that map inside the moving
    /// grid, with its gradient in θ.
    fn evaluate(&self, model: &dyn Model, th: &[f64], centre: Vector3<f64>, with_grad: bool) -> (f64, Vec<f64>) {
        let a = model.linear(th);
        let t = model.translation(th);
        let da = if with_grad { model.linear_derivatives(th) } else { Vec::new() };
        let mg = self.moving.geometry();
        let (ml, mo) = mg.index_to_physical_affine();
        let m_inv = ml.try_inverse().expect("valid geometry");
        // physical gradient = m_inv^T * index gradient
        let m_inv_t = m_inv.transpose();
        let dims = mg.dims;
        let np = model.n_params();
        let n_lin = np - 3;
        let fixed = self.fixed.data();
        let moving = self.moving.data();
        const CHUNK: usize = 4096;
        let partials: Vec<(f64, usize, Vec<f64>)> = self
            .points
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, pts)| {
                let mut sum = 0.0;
                let mut count = 0usize;
                let mut grad = vec![0.0; if with_grad { np } else { 0 }];
                for (o, x) in pts.iter().enumerate() {
                    let rel = x - centre;
                    let y = a * rel + centre + t;
                    let q = m_inv * (y - mo);
                    let Some((mv, gi)) = sample_with_gradient(moving, dims, [q[0], q[1], q[2]]) else {
                        continue;
                    };
                    let r = mv - fixed[ci * CHUNK + o];
                    sum += r * r;
                    count += 1;
                    if with_grad {
                        let gp = m_inv_t * Vector3::new(gi[0], gi[1], gi[2]);
                        for (p, d) in da.iter().enumerate() {
                            grad[p] += 2.0 * r * gp.dot(&(d * rel));
                        }
                        for c in 0..3 {
                            grad[n_lin + c] += 2.0 * r * gp[c];
                        }
                    }
                }
                (sum, count, grad)
            })
            .collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut grad = vec![0.0; np];
        for (s, c, g) in partials {
            sum += s;
            count += c;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        if count == 0 {
            return (f64::INFINITY, grad);
        }
        let n = count as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (sum / n, grad)
    }
}

fn downsample(vol: &ScalarVolume) -> Result<ScalarVolume> {
    let smooth = gaussian_smooth(vol.data(), vol.dims(), [1.0; 3]);
    let smoothed = Volume::from_parts(vol.geometry().clone(), smooth);
    resample(&smoothed, &vol.geometry().downsampled(2), Interpolation::Linear)
}

fn pyramid(fixed: &ScalarVolume, moving: &ScalarVolume, levels: usize) -> Result<Vec<Level>> {
    let mut out = vec![Level::new(fixed.clone(), moving.clone())];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        if prev.fixed.dims().iter().any(|&d| d < 8) {
            break;
        }
        let f = downsample(&prev.fixed)?;
        let m = downsample(&prev.moving)?;
        out.push(Level::new(f, m));
    }
    out.reverse();
    Ok(out)
}

fn check_inputs(fixed: &ScalarVolume, moving: &ScalarVolume) -> Result<()> {
    for (name, v) in [("fixed", fixed), ("moving", moving)] {
        let (lo, hi) = v.min_max();
        if hi - lo <= 0.0 {
            return Err(Error::Argument(format!("{name} feature map is constant")));
        }
    }
    Ok(())
}

fn characteristic_radius(g: &VolumeGeometry) -> f64 {
    let ext: Vec<f64> = (0..3).map(|a| g.dims[a] as f64 * g.spacing[a]).collect();
    (ext.iter().map(|e| e * e).sum::<f64>()).sqrt() / 4.0
}

fn optimize(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    model: &dyn Model,
    theta0: Vec<f64>,
    kind: TransformKind,
    cfg: &LinearConfig,
) -> Result<LinearResult> {
    cfg.validate()?;
    check_inputs(fixed, moving)?;
    let centre = Vector3::from(fixed.geometry().center());
    let scales = model.scales(characteristic_radius(fixed.geometry()));
    let levels = pyramid(fixed, moving, cfg.levels)?;
    let finest = levels.last().expect("at least one level");
    let (initial_objective, _) = finest.evaluate(model, &theta0, centre, false);
    let mut theta = theta0.clone();
    let n_levels = levels.len();

    for (li, level) in levels.iter().enumerate() {
        let coarseness = (1usize << (n_levels - 1 - li)) as f64;
        let level_step = cfg.initial_step_mm * coarseness / (1usize << (n_levels - 1)) as f64;
        let mut step = level_step;
        let min_step = cfg.min_step_mm * coarseness;
        let (mut f, mut g) = level.evaluate(model, &theta, centre, true);
        let start_f = f;
        for _ in 0..cfg.iterations_per_level {
            if !f.is_finite() {
                break;
            }
            let scaled: Vec<f64> = g.iter().zip(&scales).map(|(gi, s)| gi / s).collect();
            let norm = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let trial: Vec<f64> = theta
                .iter()
                .zip(&scaled)
                .zip(&scales)
                .map(|((th, gs), s)| th - step * gs / norm / s)
                .collect();
            let (ft, gt) = level.evaluate(model, &trial, centre, true);
            if ft < f {
                theta = trial;
                f = ft;
                g = gt;
                step = (step * 1.25).min(2.0 * level_step);
            } else {
                step *= 0.5;
                if step < min_step {
                    break;
                }
            }
        }
        if !(f <= start_f) {
            return Err(Error::Convergence {
                message: format!("objective rose from {start_f} to {f} at level {li}"),
                best: Box::new(to_transform(model, &theta0, centre, kind)?),
            });
        }
    }

    let (final_objective, _) = finest.evaluate(model, &theta, centre, false);
    let mut transform = to_transform(model, &theta, centre, kind)?;
    let mut final_objective = final_objective;
    // the coarse levels optimise a smoothed objective; never hand back
    // something worse than the start on the full-resolution grid
    if !(final_objective <= initial_objective) {
        transform = to_transform(model, &theta0, centre, kind)?;
        final_objective = initial_objective;
    }
    if !final_objective.is_finite() {
        return Err(Error::Convergence {
            message: "no overlap between fixed and moving grids".into(),
            best: Box::new(transform),
        });
    }
    Ok(LinearResult {
        transform,
        initial_objective,
        final_objective,
    })
}

/// Rigid registration (3 Euler angles about the fixed-grid centre plus 3
/// translations) of `moving_feat` onto `fixed_feat`.
pub fn register_rigid(fixed_feat: &ScalarVolume, moving_feat: &ScalarVolume) -> Result<AffineTransform> {
    register_rigid_with(fixed_feat, moving_feat, &LinearConfig::default()).map(|r| r.transform)
}

pub fn register_rigid_with(fixed_feat: &ScalarVolume, moving_feat: &ScalarVolume, cfg: &LinearConfig) -> Result<LinearResult> {
    optimize(fixed_feat, moving_feat, &Rigid, vec![0.0; 6], TransformKind::Rigid, cfg)
}

/// Affine registration (12 parameters) initialised from `init`.
pub fn register_affine(fixed_feat: &ScalarVolume, moving_feat: &ScalarVolume, init: &AffineTransform) -> Result<AffineTransform> {
    register_affine_with(fixed_feat, moving_feat, init, &LinearConfig::default()).map(|r| r.transform)
}

pub fn register_affine_with(
    fixed_feat: &ScalarVolume,
    moving_feat: &ScalarVolume,
    init: &AffineTransform,
    cfg: &LinearConfig,
) -> Result<LinearResult> {
    let centre = Vector3::from(fixed_feat.geometry().center());
    let a0 = init.linear();
    let t0 = a0 * centre + init.translation() - centre;
    let p = a0 - Matrix3::identity();
    let mut theta: Vec<f64> = (0..9).map(|i| p[(i / 3, i % 3)]).collect();
    theta.extend([t0[0], t0[1], t0[2]]);
    optimize(fixed_feat, moving_feat, &Affine, theta, TransformKind::Affine, cfg)
}
