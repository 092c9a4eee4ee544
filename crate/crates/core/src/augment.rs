//! Random-convolution intensity augmentation blended through a smooth
//! pseudo-correlation map, with a Gaussian ramp-up of the augmentation weight.
//!
//! Everything is a pure function of its inputs and explicit seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::{ScalarVolume, Volume, VolumeGeometry};
use crate::{Error, Result};

/// Coarse noise grid used by the pipeline (clamped to the volume size).
pub const DEFAULT_COARSE_DIMS: [usize; 3] = [4, 4, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GinConfig {
    pub layers: usize,
    pub kernel: usize,
    pub channels: usize,
    /// Negative-side slope of the leaky ReLU.
    pub nonlinearity: f64,
    pub seed: u64,
}

impl Default for GinConfig {
    fn default() -> Self {
        Self { layers: 4, kernel: 3, channels: 2, nonlinearity: 0.2, seed: 0 }
    }
}

impl GinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.kernel % 2 == 0 || self.channels == 0 || !self.nonlinearity.is_finite() {
            return Err(Error::Argument(format!("invalid GIN config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampConfig {
    pub ramp_epochs: u64,
    pub shape: f64,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self { ramp_epochs: 1000, shape: 5.0 }
    }
}

impl RampConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_epochs == 0 || !(self.shape >= 0.0 && self.shape.is_finite()) {
            return Err(Error::Argument(format!("invalid ramp config {self:?}")));
        }
        Ok(())
    }
}

fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One multi-channel 3D convolution with replicate padding.
fn conv3d(input: &[Vec<f64>], dims: [usize; 3], weights: &[f64], out_ch: usize, k: usize) -> Vec<Vec<f64>> {
    let in_ch = input.len();
    let r = (k / 2) as isize;
    let k3 = k * k * k;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    (0..out_ch)
        .map(|o| {
            (0..dims[0] * dims[1] * dims[2])
                .into_par_iter()
                .map(|lin| {
                    let i = (lin % dims[0]) as isize;
                    let j = ((lin / dims[0]) % dims[1]) as isize;
                    let kk = (lin / (dims[0] * dims[1])) as isize;
                    let mut acc = 0.0;
                    for (c, chan) in input.iter().enumerate() {
                        let base = (o * in_ch + c) * k3;
                        let mut t = 0;
                        for dz in -r..=r {
                            let z = clamp(kk + dz, dims[2]);
                            for dy in -r..=r {
                                let y = clamp(j + dy, dims[1]);
                                for dx in -r..=r {
                                    let x = clamp(i + dx, dims[0]);
                                    acc += weights[base + t] * chan[x + dims[0] * (y + dims[1] * z)];
                                    t += 1;
                                }
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Random shallow convolutional network applied to `vol`, rescaled to the
/// input's mean and standard deviation.
pub fn gin_transform(vol: &ScalarVolume, cfg: &GinConfig) -> Result<ScalarVolume> {
    cfg.validate()?;
    let dims = vol.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = vec![vol.data().to_vec()];
    for layer in 0..cfg.layers {
        let in_ch = x.len();
        let out_ch = if layer + 1 == cfg.layers { 1 } else { cfg.channels };
        let fan_in = (in_ch * cfg.kernel.pow(3)) as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
        let weights: Vec<f64> = (0..out_ch * in_ch * cfg.kernel.pow(3)).map(|_| normal.sample(&mut rng)).collect();
        x = conv3d(&x, dims, &weights, out_ch, cfg.kernel);
        for chan in &mut x {
            for v in chan.iter_mut() {
                if *v < 0.0 {
                    *v *= cfg.nonlinearity;
                }
            }
        }
    }
    let y = x.pop().expect("single output channel");
    let (mx, sx) = mean_std(vol.data());
    let (my, sy) = mean_std(&y);
    let out = if sy > 1e-12 {
        y.iter().map(|v| (v - my) / sy * sx + mx).collect()
    } else {
        vec![mx; y.len()]
    };
    vol.with_data(out)
}

/// Trilinear upsampling with corner alignment: coarse node `c` sits at fine
/// index `c·(n−1)/(m−1)`.
pub fn upsample_align_corners(coarse: &[f64], coarse_dims: [usize; 3], dims: [usize; 3]) -> Vec<f64> {
    let axis = |a: usize, i: usize| -> (usize, usize, f64) {
        let (m, n) = (coarse_dims[a], dims[a]);
        if m == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (m - 1) as f64 / (n - 1) as f64;
        let lo = (x.floor() as usize).min(m - 2);
        (lo, lo + 1, x - lo as f64)
    };
    let at = |i: usize, j: usize, k: usize| coarse[i + coarse_dims[0] * (j + coarse_dims[1] * k)];
    (0..dims[0] * dims[1] * dims[2])
        .into_par_iter()
        .map(|lin| {
            let (x0, x1, fx) = axis(0, lin % dims[0]);
            let (y0, y1, fy) = axis(1, (lin / dims[0]) % dims[1]);
            let (z0, z1, fz) = axis(2, lin / (dims[0] * dims[1]));
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
            let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
            let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
            let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
            lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz).clamp(0.0, 1.0)
        })
        .collect()
}

/// Smooth random blending map: uniform noise on a coarse grid, upsampled.
pub fn pseudo_correlation_map(geometry: &VolumeGeometry, coarse_dims: [usize; 3], seed: u64) -> Result<ScalarVolume> {
    geometry.validate()?;
    if (0..3).any(|a| coarse_dims[a] == 0 || coarse_dims[a] > geometry.dims[a]) {
        return Err(Error::Argument(format!(
            "coarse grid {coarse_dims:?} must be non-empty and no larger than {:?}",
            geometry.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse: Vec<f64> = (0..coarse_dims.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect();
    Ok(Volume::from_parts(
        geometry.clone(),
        upsample_align_corners(&coarse, coarse_dims, geometry.dims),
    ))
}

/// Voxelwise `ρ·a + (1 − ρ)·b`.
pub fn ipa_blend(a: &ScalarVolume, b: &ScalarVolume, rho: &ScalarVolume) -> Result<ScalarVolume> {
    a.geometry().ensure_aligned(b.geometry(), "blend inputs")?;
    a.geometry().ensure_aligned(rho.geometry(), "blend map")?;
    rho.ensure_unit_range("blend map")?;
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .zip(rho.data())
        .map(|((&x, &y), &r)| r * x + (1.0 - r) * y)
        .collect();
    a.with_data(out)
}

/// `exp(−shape·(1 − min(epoch/ramp_epochs, 1))²)`.
pub fn rampup_weight(epoch: u64, cfg: &RampConfig) -> f64 {
    let t = (epoch as f64 / cfg.ramp_epochs.max(1) as f64).min(1.0);
    (-cfg.shape * (1.0 - t).powi(2)).exp()
}

/// Seeds for the two GIN draws and the blend map at a given epoch.
pub fn pipeline_seeds(seed: u64, epoch: u64) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    [rng.random(), rng.random(), rng.random()]
}

/// `(1 − λ)·vol + λ·ipa_blend(gin₁, gin₂, ρ)` for an explicit weight and seeds.
pub fn augment_with_weight(vol: &ScalarVolume, lambda: f64, seeds: [u64; 3], gin: &GinConfig) -> Result<ScalarVolume> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("augmentation weight {lambda} outside [0, 1]")));
    }
    let a = gin_transform(vol, &GinConfig { seed: seeds[0], ..gin.clone() })?;
    let b = gin_transform(vol, &GinConfig { seed: seeds[1], ..gin.clone() })?;
    let coarse = [0, 1, 2].map(|ax| DEFAULT_COARSE_DIMS[ax].min(vol.dims()[ax]));
    let rho = pseudo_correlation_map(vol.geometry(), coarse, seeds[2])?;
    let mixed = ipa_blend(&a, &b, &rho)?;
    let out = vol
        .data()
        .iter()
        .zip(mixed.data())
        .map(|(&x, &m)| (1.0 - lambda) * x + lambda * m)
        .collect();
    vol.with_data(out)
}

/// Full augmentation at `epoch`, deterministic in `(vol, seed, epoch)`.
pub fn augment_pipeline(
    vol: &ScalarVolume,
    epoch: u64,
    seed: u64,
    gin: &GinConfig,
    ramp: &RampConfig,
) -> Result<ScalarVolume> {
    ramp.validate()?;
    augment_with_weight(vol, rampup_weight(epoch, ramp), pipeline_seeds(seed, epoch), gin)
}
