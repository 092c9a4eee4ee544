//! Overlap, surface-distance and lesion-wise detection metrics on binary
//! masks. Any non-zero label counts as foreground.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::filters::{dilate_ball, label_components, squared_distance_to, Connectivity};
use crate::volume::LabelVolume;
use crate::{Error, Result};

/// Default lesion matching dilation radius in voxels.
pub const LESION_DILATION_VOX: usize = 2;

fn foreground(v: &LabelVolume) -> Vec<bool> {
    v.data().iter().map(|&x| x != 0).collect()
}

fn aligned(pred: &LabelVolume, gt: &LabelVolume) -> Result<(Vec<bool>, Vec<bool>)> {
    pred.geometry().ensure_aligned(gt.geometry(), "prediction and ground truth")?;
    Ok((foreground(pred), foreground(gt)))
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    let (a, b) = aligned(pred, gt)?;
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground voxels with a background face neighbour (the outside of the
/// grid counts as background).
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    (0..mask.len())
        .map(|lin| {
            if !mask[lin] {
                return false;
            }
            let (i, j, k) = (lin % nx, (lin / nx) % ny, lin / (nx * ny));
            i == 0
                || j == 0
                || k == 0
                || i + 1 == nx
                || j + 1 == ny
                || k + 1 == nz
                || !mask[lin - 1]
                || !mask[lin + 1]
                || !mask[lin - nx]
                || !mask[lin + nx]
                || !mask[lin - nx * ny]
                || !mask[lin + nx * ny]
        })
        .collect()
}

/// Average symmetric surface distance in mm (centre to centre).
pub fn assd(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    let (a, b) = aligned(pred, gt)?;
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(Error::EmptyMask("surface distance needs two non-empty masks".into()));
    }
    let (dims, spacing) = (pred.dims(), pred.spacing());
    let (sa, sb) = (surface_voxels(&a, dims), surface_voxels(&b, dims));
    let (da, db) = (squared_distance_to(&sa, dims, spacing), squared_distance_to(&sb, dims, spacing));
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..sa.len() {
        if sa[n] {
            total += db[n].sqrt();
            count += 1;
        }
        if sb[n] {
            total += da[n].sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Empty prediction: precision set to 1 by convention.
    pub precision_undefined: bool,
    /// Empty ground truth: recall set to 1 by convention.
    pub recall_undefined: bool,
}

pub fn precision_recall(pred: &LabelVolume, gt: &LabelVolume) -> Result<PrecisionRecall> {
    let (a, b) = aligned(pred, gt)?;
    let tp = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let np = a.iter().filter(|&&x| x).count();
    let ng = b.iter().filter(|&&x| x).count();
    let ratio = |d: usize| if d == 0 { 1.0 } else { tp as f64 / d as f64 };
    Ok(PrecisionRecall {
        precision: ratio(np),
        recall: ratio(ng),
        precision_undefined: np == 0,
        recall_undefined: ng == 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionDetection {
    pub ln_found: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// No ground-truth lesion: `ln_found` set to 1 by convention.
    pub undefined: bool,
}

/// Lesion-wise matching on dilated masks. Both masks are dilated with a ball
/// of `dilation_vox` voxels and labelled; a dilated ground-truth component is
/// found when it overlaps the dilated prediction, and a dilated prediction
/// component touching no dilated ground truth is a false positive.
pub fn ln_found(
    pred: &LabelVolume,
    gt: &LabelVolume,
    dilation_vox: usize,
    connectivity: Connectivity,
) -> Result<LesionDetection> {
    let (a, b) = aligned(pred, gt)?;
    let dims = pred.dims();
    let (da, db) = (dilate_ball(&a, dims, dilation_vox), dilate_ball(&b, dims, dilation_vox));
    let (la, na) = label_components(&da, dims, connectivity);
    let (lb, nb) = label_components(&db, dims, connectivity);
    let mut gt_hit = vec![false; nb + 1];
    let mut pred_hit = vec![false; na + 1];
    for n in 0..la.len() {
        if la[n] != 0 && lb[n] != 0 {
            gt_hit[lb[n] as usize] = true;
            pred_hit[la[n] as usize] = true;
        }
    }
    let tp = gt_hit.iter().filter(|&&h| h).count();
    let fp = na - pred_hit.iter().filter(|&&h| h).count();
    let fn_ = nb - tp;
    Ok(LesionDetection {
        ln_found: if nb == 0 { 1.0 } else { tp as f64 / nb as f64 },
        tp,
        fp,
        fn_,
        undefined: nb == 0,
    })
}

fn inf_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() { s.serialize_some(v) } else { s.serialize_none() }
}

fn null_as_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    /// Infinite (serialized as null) when either mask is empty.
    #[serde(serialize_with = "inf_as_null", deserialize_with = "null_as_inf")]
    pub assd_mm: f64,
    pub precision: f64,
    pub recall: f64,
    pub ln_found: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub assd_undefined: bool,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub ln_found_undefined: bool,
}

/// All metrics for one case; empty masks set flags instead of failing.
pub fn evaluate_case(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    let d = dice(pred, gt)?;
    let (assd_mm, assd_undefined) = match assd(pred, gt) {
        Ok(v) => (v, false),
        Err(Error::EmptyMask(_)) => (f64::INFINITY, true),
        Err(e) => return Err(e),
    };
    let pr = precision_recall(pred, gt)?;
    let ln = ln_found(pred, gt, LESION_DILATION_VOX, Connectivity::TwentySix)?;
    Ok(MetricsReport {
        dice: d,
        assd_mm,
        precision: pr.precision,
        recall: pr.recall,
        ln_found: ln.ln_found,
        tp: ln.tp,
        fp: ln.fp,
        fn_: ln.fn_,
        assd_undefined,
        precision_undefined: pr.precision_undefined,
        recall_undefined: pr.recall_undefined,
        ln_found_undefined: ln.undefined,
    })
}
