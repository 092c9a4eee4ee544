//! Segmentation loss functionals on foreground-probability volumes, each
//! returning its value together with the analytic gradient per voxel.
//!
//! Reductions run sequentially in voxel order so values do not depend on the
//! thread schedule.

use serde::{Deserialize, Serialize};

use crate::filters::dilate_ball;
use crate::volume::{resample, Interpolation, LabelVolume, ScalarVolume, Volume, VolumeGeometry};
use crate::{Error, Result};

/// Probability clamp used by the cross-entropy term.
pub const CE_EPS: f64 = 1e-7;

/// Foreground probabilities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume(ScalarVolume);

impl ProbVolume {
    pub fn new(vol: ScalarVolume) -> Result<Self> {
        vol.ensure_unit_range("probabilities")?;
        Ok(Self(vol))
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        self.0.geometry()
    }

    pub fn probs(&self) -> &[f64] {
        self.0.data()
    }

    pub fn volume(&self) -> &ScalarVolume {
        &self.0
    }

    pub fn into_volume(self) -> ScalarVolume {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub smooth_eps: f64,
    pub dilation_radius_vox: usize,
    pub pa_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.25,
            lambda2: 0.25,
            lambda3: 0.5,
            alpha: 0.25,
            beta: 0.75,
            smooth_eps: 1e-5,
            dilation_radius_vox: 2,
            pa_cap: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Argument(format!("loss weights must be non-negative, got {lambdas:?}")));
        }
        if (lambdas.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!("loss weights must sum to 1, got {lambdas:?}")));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Argument("tversky alpha/beta must be non-negative".into()));
        }
        if !(self.smooth_eps > 0.0 && self.smooth_eps.is_finite()) {
            return Err(Error::Argument("smooth_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pa_cap) {
            return Err(Error::Argument("pa_cap must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-voxel Dice weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap(ScalarVolume);

impl WeightMap {
    pub fn new(vol: ScalarVolume) -> Result<Self> {
        if vol.data().iter().any(|&w| w < 0.0) {
            return Err(Error::Argument("weights must be non-negative".into()));
        }
        Ok(Self(vol))
    }

    pub fn uniform(geom: VolumeGeometry, value: f64) -> Result<Self> {
        Self::new(ScalarVolume::filled(geom, value)?)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        self.0.geometry()
    }

    pub fn weights(&self) -> &[f64] {
        self.0.data()
    }

    pub fn volume(&self) -> &ScalarVolume {
        &self.0
    }
}

/// Loss value and d(loss)/d(pred) on the prediction grid.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub gradient: ScalarVolume,
}

fn check_gt(pred: &ProbVolume, gt: &LabelVolume) -> Result<()> {
    pred.geometry().ensure_aligned(gt.geometry(), "prediction and ground truth")?;
    if !gt.is_binary() {
        return Err(Error::Argument("ground truth must be binary".into()));
    }
    Ok(())
}

fn output(pred: &ProbVolume, value: f64, grad: Vec<f64>) -> LossOutput {
    LossOutput { value, gradient: Volume::from_parts(pred.geometry().clone(), grad) }
}

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 − 1e-7].
pub fn cross_entropy(pred: &ProbVolume, gt: &LabelVolume) -> Result<LossOutput> {
    check_gt(pred, gt)?;
    let n = pred.probs().len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.probs().len());
    for (&p, &g) in pred.probs().iter().zip(gt.data()) {
        let q = p.clamp(CE_EPS, 1.0 - CE_EPS);
        let inside = p > CE_EPS && p < 1.0 - CE_EPS;
        if g != 0 {
            total -= q.ln();
            grad.push(if inside { -1.0 / (q * n) } else { 0.0 });
        } else {
            total -= (1.0 - q).ln();
            grad.push(if inside { 1.0 / ((1.0 - q) * n) } else { 0.0 });
        }
    }
    Ok(output(pred, total / n, grad))
}

/// Soft Dice loss `1 − (2Σwpg + ε)/(Σw(p+g) + ε)`; `w ≡ 1` without weights.
pub fn soft_dice_loss(
    pred: &ProbVolume,
    gt: &LabelVolume,
    weights: Option<&WeightMap>,
    eps: f64,
) -> Result<LossOutput> {
    check_gt(pred, gt)?;
    if let Some(w) = weights {
        pred.geometry().ensure_aligned(w.geometry(), "prediction and weight map")?;
    }
    let w_at = |n: usize| weights.map_or(1.0, |w| w.weights()[n]);
    let (mut num, mut den) = (eps, eps);
    for (n, (&p, &g)) in pred.probs().iter().zip(gt.data()).enumerate() {
        let (w, g) = (w_at(n), g as f64);
        num += 2.0 * w * p * g;
        den += w * (p + g);
    }
    let grad = pred
        .probs()
        .iter()
        .zip(gt.data())
        .enumerate()
        .map(|(n, (_, &g))| {
            let w = w_at(n);
            -(2.0 * w * g as f64 * den - num * w) / (den * den)
        })
        .collect();
    Ok(output(pred, 1.0 - num / den, grad))
}

/// Tversky loss `1 − (TP + ε)/(TP + αFP + βFN + ε)` on soft counts.
pub fn tversky_loss(
    pred: &ProbVolume,
    gt: &LabelVolume,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Result<LossOutput> {
    check_gt(pred, gt)?;
    let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.probs().iter().zip(gt.data()) {
        let g = g as f64;
        tp += p * g;
        fp += p * (1.0 - g);
        fnn += (1.0 - p) * g;
    }
    let num = tp + eps;
    let den = tp + alpha * fp + beta * fnn + eps;
    let grad = gt
        .data()
        .iter()
        .map(|&g| {
            let g = g as f64;
            let d_den = g + alpha * (1.0 - g) - beta * g;
            -(g * den - num * d_den) / (den * den)
        })
        .collect();
    Ok(output(pred, 1.0 - num / den, grad))
}

/// Dice weights: 1 on the dilated ground truth, `1 − p` elsewhere for
/// `p ≤ pa_cap`, and `1 − pa_cap` above the cap.
pub fn pa_weight_map(gt: &LabelVolume, pa: &ScalarVolume, cfg: &LossConfig) -> Result<WeightMap> {
    gt.geometry().ensure_aligned(pa.geometry(), "ground truth and prior")?;
    pa.ensure_unit_range("prior")?;
    if !gt.is_binary() {
        return Err(Error::Argument("ground truth must be binary".into()));
    }
    let mask: Vec<bool> = gt.data().iter().map(|&v| v != 0).collect();
    let dilated = dilate_ball(&mask, gt.dims(), cfg.dilation_radius_vox);
    let w = dilated
        .iter()
        .zip(pa.data())
        .map(|(&d, &p)| match (d, p <= cfg.pa_cap) {
            (true, _) => 1.0,
            (false, true) => 1.0 - p,
            (false, false) => 1.0 - cfg.pa_cap,
        })
        .collect();
    WeightMap::new(Volume::from_parts(gt.geometry().clone(), w))
}

/// `λ1·CE + λ2·weighted Dice + λ3·Tversky(α, β)`; Dice weights come from the
/// prior when given and are uniform otherwise.
pub fn combined_loss(
    pred: &ProbVolume,
    gt: &LabelVolume,
    pa: Option<&ScalarVolume>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let weights = pa.map(|pa| pa_weight_map(gt, pa, cfg)).transpose()?;
    let ce = cross_entropy(pred, gt)?;
    let dice = soft_dice_loss(pred, gt, weights.as_ref(), cfg.smooth_eps)?;
    let tv = tversky_loss(pred, gt, cfg.alpha, cfg.beta, cfg.smooth_eps)?;
    let (l1, l2, l3) = (cfg.lambda1, cfg.lambda2, cfg.lambda3);
    let grad = (0..pred.probs().len())
        .map(|n| l1 * ce.gradient.data()[n] + l2 * dice.gradient.data()[n] + l3 * tv.gradient.data()[n])
        .collect();
    Ok(output(pred, l1 * ce.value + l2 * dice.value + l3 * tv.value, grad))
}

/// Level weights `∝ 2^(−r)` normalised to sum to one.
pub fn deep_supervision_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|r| 0.5f64.powi(r as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Weighted sum of per-level losses under [`deep_supervision_weights`].
pub fn aggregate_levels(per_level: &[f64]) -> f64 {
    deep_supervision_weights(per_level.len())
        .iter()
        .zip(per_level)
        .map(|(w, l)| w * l)
        .sum()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeepSupervisionLoss {
    pub total: f64,
    pub per_level: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Combined loss over predictions at decreasing resolutions. Each level's
/// ground truth (nearest) and prior (linear) are resampled onto that level's
/// prediction grid when they are not already on it.
pub fn deep_supervision_loss(
    preds: &[ProbVolume],
    gts: &[LabelVolume],
    pas: Option<&[ScalarVolume]>,
    cfg: &LossConfig,
) -> Result<DeepSupervisionLoss> {
    if preds.is_empty() {
        return Err(Error::Argument("no prediction levels".into()));
    }
    if gts.len() != preds.len() || pas.is_some_and(|p| p.len() != preds.len()) {
        return Err(Error::Argument(format!(
            "level count mismatch: {} predictions, {} labels, {} priors",
            preds.len(),
            gts.len(),
            pas.map_or(0, <[_]>::len)
        )));
    }
    let mut per_level = Vec::with_capacity(preds.len());
    for (r, pred) in preds.iter().enumerate() {
        let geom = pred.geometry();
        let gt = if gts[r].geometry().is_aligned(geom) {
            gts[r].clone()
        } else {
            resample(&gts[r], geom, Interpolation::Nearest)?
        };
        let pa = match pas {
            Some(p) if p[r].geometry().is_aligned(geom) => Some(p[r].clone()),
            Some(p) => Some(resample(&p[r], geom, Interpolation::Linear)?.map(|v| v.clamp(0.0, 1.0))?),
            None => None,
        };
        per_level.push(combined_loss(pred, &gt, pa.as_ref(), cfg)?.value);
    }
    Ok(DeepSupervisionLoss {
        total: aggregate_levels(&per_level),
        weights: deep_supervision_weights(preds.len()),
        per_level,
    })
}
