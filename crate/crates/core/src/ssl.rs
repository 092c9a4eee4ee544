//! Semi-supervised building blocks: entropy maps, histogram-quantile
//! reliability masks, EMA teacher updates and post-processed pseudo-labels.

use crate::losses::ProbVolume;
use crate::postprocess::{run_postprocess, PostprocessConfig};
use crate::volume::{LabelVolume, ScalarVolume, Volume, VolumeGeometry};
use crate::{Error, Result};

/// Histogram resolution for entropy quantiles.
pub const ENTROPY_BINS: usize = 256;

/// Per-voxel class probabilities stored voxel-major (`probs[v * C + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxVolume {
    geom: VolumeGeometry,
    classes: usize,
    probs: Vec<f64>,
}

impl SoftmaxVolume {
    pub fn new(geom: VolumeGeometry, classes: usize, probs: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if classes < 2 {
            return Err(Error::Argument("a softmax needs at least two classes".into()));
        }
        if probs.len() != geom.len() * classes {
            return Err(Error::Argument(format!(
                "expected {} probabilities, got {}",
                geom.len() * classes,
                probs.len()
            )));
        }
        for (v, p) in probs.chunks(classes).enumerate() {
            if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-5 {
                return Err(Error::Argument(format!("voxel {v}: probabilities {p:?} do not form a distribution")));
            }
        }
        Ok(Self { geom, classes, probs })
    }

    /// Two-class softmax from foreground probabilities.
    pub fn from_foreground(fg: &ProbVolume) -> Result<Self> {
        let probs = fg.probs().iter().flat_map(|&p| [1.0 - p, p]).collect();
        Self::new(fg.geometry().clone(), 2, probs)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geom
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn channel(&self, c: usize) -> Result<ScalarVolume> {
        if c >= self.classes {
            return Err(Error::Argument(format!("class {c} out of range")));
        }
        Ok(Volume::from_parts(
            self.geom.clone(),
            self.probs.chunks(self.classes).map(|p| p[c]).collect(),
        ))
    }
}

/// Shannon entropy per voxel (natural log, `0·ln 0 = 0`).
pub fn entropy_map(sm: &SoftmaxVolume) -> ScalarVolume {
    let data = sm
        .probs
        .chunks(sm.classes)
        .map(|p| -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
        .map(|h| h.clamp(0.0, (sm.classes as f64).ln()))
        .collect();
    Volume::from_parts(sm.geom.clone(), data)
}

/// Entropy threshold at `quantile`: the upper edge of the first histogram bin
/// (over `[0, ln C]`) whose cumulative count reaches `quantile·N`. The last
/// bin has no upper limit.
pub fn entropy_threshold(entropy: &[f64], classes: usize, quantile: f64) -> f64 {
    let hmax = (classes as f64).ln();
    let width = hmax / ENTROPY_BINS as f64;
    let mut hist = [0usize; ENTROPY_BINS];
    for &h in entropy {
        hist[((h / width) as usize).min(ENTROPY_BINS - 1)] += 1;
    }
    let target = quantile * entropy.len() as f64;
    let mut cum = 0usize;
    for (b, &c) in hist.iter().enumerate() {
        cum += c;
        if cum as f64 >= target {
            return if b + 1 == ENTROPY_BINS { f64::INFINITY } else { (b + 1) as f64 * width };
        }
    }
    f64::INFINITY
}

/// Voxels whose entropy does not exceed the `quantile` threshold.
pub fn reliability_mask(sm: &SoftmaxVolume, quantile: f64) -> Result<LabelVolume> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Argument(format!("quantile {quantile} must lie in (0, 1]")));
    }
    let h = entropy_map(sm);
    let thr = entropy_threshold(h.data(), sm.classes, quantile);
    Ok(Volume::from_parts(sm.geom.clone(), h.data().iter().map(|&v| u32::from(v <= thr)).collect()))
}

/// Flat, finite model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("parameters must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// `m·teacher + (1 − m)·student`.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, momentum: f64) -> Result<ParamVector> {
    if teacher.0.len() != student.0.len() {
        return Err(Error::Argument(format!(
            "parameter length mismatch: {} vs {}",
            teacher.0.len(),
            student.0.len()
        )));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Argument(format!("momentum {momentum} must lie in [0, 1]")));
    }
    Ok(ParamVector(
        teacher.0.iter().zip(&student.0).map(|(&t, &s)| momentum * t + (1.0 - momentum) * s).collect(),
    ))
}

/// Pseudo-label from a two-class teacher softmax via the post-processing chain.
pub fn pseudo_label(
    sm: &SoftmaxVolume,
    pa: &ScalarVolume,
    lungs: &LabelVolume,
    cfg: &PostprocessConfig,
) -> Result<LabelVolume> {
    if sm.classes != 2 {
        return Err(Error::Argument(format!("pseudo-labels need 2 classes, got {}", sm.classes)));
    }
    let fg = ProbVolume::new(sm.channel(1)?.map(|p| p.clamp(0.0, 1.0))?)?;
    run_postprocess(&[fg], pa, lungs, None, cfg)
}
