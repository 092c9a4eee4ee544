//! Thin wrappers over single library operations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nodekit_core::augment::{augment_pipeline, GinConfig, RampConfig};
use nodekit_core::losses::{
    combined_loss, cross_entropy, deep_supervision_loss, pa_weight_map, soft_dice_loss, tversky_loss,
    DeepSupervisionLoss, LossConfig, ProbVolume,
};
use nodekit_core::metrics::{evaluate_case, MetricsReport};
use nodekit_core::postprocess::{run_postprocess, PostprocessConfig};
use nodekit_core::volume::{write_nifti, CropRecord};
use nodekit_core::{LabelVolume, ScalarVolume};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;
use crate::io;

pub fn augment(
    input: &Path,
    output: &Path,
    epoch: u64,
    seed: u64,
    gin: &GinConfig,
    ramp: &RampConfig,
) -> Result<(), CliError> {
    let vol = io::read_scalar(input)?;
    let out = augment_pipeline(&vol, epoch, seed, gin, ramp)?;
    Ok(write_nifti(&out, output)?)
}

#[derive(Debug, Serialize)]
pub struct LossReport {
    pub cross_entropy: f64,
    pub soft_dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_dice_weighted: Option<f64>,
    pub tversky: f64,
    pub combined: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deep_supervision: Option<DeepSupervisionLoss>,
}

fn read_probs(path: &Path) -> Result<ProbVolume, CliError> {
    ProbVolume::new(io::read_scalar(path)?)
        .map_err(|e| CliError::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_prior(path: &Path) -> Result<ScalarVolume, CliError> {
    let v = io::read_scalar(path)?;
    v.ensure_unit_range("atlas prior")
        .map_err(|e| CliError::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(v)
}

/// Loss values for the full-resolution prediction (the first one) and, with
/// several predictions, the deep-supervision aggregate over all of them.
pub fn loss(preds: &[PathBuf], gt: &Path, pa: Option<&Path>, cfg: &LossConfig) -> Result<LossReport, CliError> {
    cfg.validate()?;
    let preds: Vec<ProbVolume> = preds.iter().map(|p| read_probs(p)).collect::<Result<_, _>>()?;
    let gt = io::read_mask(gt)?;
    let pa = pa.map(read_prior).transpose()?;
    let top = &preds[0];
    let weighted = match &pa {
        Some(p) => Some(soft_dice_loss(top, &gt, Some(&pa_weight_map(&gt, p, cfg)?), cfg.smooth_eps)?.value),
        None => None,
    };
    let deep = if preds.len() > 1 {
        let gts = vec![gt.clone(); preds.len()];
        let pas = pa.as_ref().map(|p| vec![p.clone(); preds.len()]);
        Some(deep_supervision_loss(&preds, &gts, pas.as_deref(), cfg)?)
    } else {
        None
    };
    Ok(LossReport {
        cross_entropy: cross_entropy(top, &gt)?.value,
        soft_dice: soft_dice_loss(top, &gt, None, cfg.smooth_eps)?.value,
        soft_dice_weighted: weighted,
        tversky: tversky_loss(top, &gt, cfg.alpha, cfg.beta, cfg.smooth_eps)?.value,
        combined: combined_loss(top, &gt, pa.as_ref(), cfg)?.value,
        deep_supervision: deep,
    })
}

/// Inputs shared by single and grid post-processing.
pub struct PostInputs {
    pub probs: Vec<ProbVolume>,
    pub pa: ScalarVolume,
    pub lungs: LabelVolume,
    pub crop: Option<CropRecord>,
    pub paths: Vec<PathBuf>,
}

/// Load the probability maps plus optional prior, lungs and crop record. A
/// missing prior means a constant threshold; missing lungs mean no hull
/// restriction.
pub fn load_post_inputs(
    probs: &[PathBuf],
    pa: Option<&Path>,
    lungs: Option<&Path>,
    crop: Option<&Path>,
) -> Result<PostInputs, CliError> {
    let loaded: Vec<ProbVolume> = probs.iter().map(|p| read_probs(p)).collect::<Result<_, _>>()?;
    let geom = loaded[0].geometry().clone();
    let pa_vol = match pa {
        Some(p) => read_prior(p)?,
        None => ScalarVolume::zeros(geom.clone())?,
    };
    let lungs_vol = match lungs {
        Some(p) => io::read_mask(p)?,
        None => LabelVolume::filled(geom, 1)?,
    };
    let crop_rec = match crop {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str::<CropRecord>(&text)?)
        }
        None => None,
    };
    let mut paths = probs.to_vec();
    paths.extend(pa.into_iter().chain(lungs).chain(crop).map(Path::to_path_buf));
    Ok(PostInputs { probs: loaded, pa: pa_vol, lungs: lungs_vol, crop: crop_rec, paths })
}

pub fn postprocess(inputs: &PostInputs, cfg: &PostprocessConfig) -> Result<LabelVolume, CliError> {
    Ok(run_postprocess(&inputs.probs, &inputs.pa, &inputs.lungs, inputs.crop.as_ref(), cfg)?)
}

/// Parsed `--grid` axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub t: Vec<f64>,
    pub diam: Vec<Option<f64>>,
}

fn parse_list<T>(key: &str, list: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    let v: Option<Vec<T>> = list.split(',').map(|s| f(s.trim())).collect();
    match v {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::new("argument", format!("cannot parse grid values {key}={list}"))),
    }
}

pub fn parse_diameter(s: &str) -> Option<Option<f64>> {
    if s.eq_ignore_ascii_case("none") {
        Some(None)
    } else {
        s.parse::<f64>().ok().map(Some)
    }
}

impl Grid {
    /// Parse `t=0.5,0.3` / `diam=none,3` specs; an absent axis takes the
    /// configured single value.
    pub fn parse(specs: &[String], base: &PostprocessConfig) -> Result<Self, CliError> {
        let mut grid = Grid { t: vec![base.t], diam: vec![base.min_diameter_mm] };
        let mut seen = Vec::new();
        for spec in specs {
            let (key, list) = spec
                .split_once('=')
                .ok_or_else(|| CliError::new("argument", format!("grid axis {spec:?} is not key=values")))?;
            if seen.contains(&key) {
                return Err(CliError::new("argument", format!("grid axis {key} given twice")));
            }
            seen.push(key);
            match key {
                "t" => grid.t = parse_list(key, list, |s| s.parse().ok())?,
                "diam" => grid.diam = parse_list(key, list, parse_diameter)?,
                _ => return Err(CliError::new("argument", format!("unknown grid axis {key:?} (expected t or diam)"))),
            }
        }
        Ok(grid)
    }

    /// Every (config, file name) combination, t-major.
    pub fn runs(&self, base: &PostprocessConfig) -> Result<Vec<(PostprocessConfig, String)>, CliError> {
        let mut out = Vec::new();
        for &t in &self.t {
            for &d in &self.diam {
                let cfg = PostprocessConfig { t, min_diameter_mm: d, ..base.clone() };
                cfg.validate()?;
                let dn = d.map_or("none".to_string(), |d| d.to_string());
                out.push((cfg, format!("t{t}_diam{dn}.nii.gz")));
            }
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct GridRun<'a> {
    file: &'a str,
    t: f64,
    min_diameter_mm: Option<f64>,
    foreground_voxels: usize,
}

#[derive(Serialize)]
struct GridManifest<'a> {
    command: &'static str,
    inputs: BTreeMap<String, String>,
    runs: Vec<GridRun<'a>>,
}

pub fn postprocess_grid(inputs: &PostInputs, runs: &[(PostprocessConfig, String)], out_dir: &Path) -> Result<(), CliError> {
    let masks: Vec<LabelVolume> = runs.par_iter().map(|(cfg, _)| postprocess(inputs, cfg)).collect::<Result<_, _>>()?;
    let manifest = GridManifest {
        command: "postprocess-grid",
        inputs: io::hash_inputs(&inputs.paths)?,
        runs: runs
            .iter()
            .zip(&masks)
            .map(|((c, f), m)| GridRun { file: f, t: c.t, min_diameter_mm: c.min_diameter_mm, foreground_voxels: m.count_nonzero() })
            .collect(),
    };
    io::create_dir(out_dir)?;
    for ((_, f), m) in runs.iter().zip(&masks) {
        io::write_labels(m, &out_dir.join(f))?;
    }
    io::write_json(&manifest, &out_dir.join("grid_manifest.json"))
}

#[derive(Debug, Serialize)]
pub struct CaseMetrics {
    pub case: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Means over cases; ASSD and LN found skip cases where they are undefined.
#[derive(Debug, Serialize)]
pub struct MeanMetrics {
    pub dice: f64,
    pub assd_mm: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub ln_found: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub mean: MeanMetrics,
    pub cases: Vec<CaseMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport, CliError> {
    let preds = io::list_cases(pred_dir)?;
    let gts = io::list_cases(gt_dir)?;
    if preds.is_empty() {
        return Err(CliError::new("argument", format!("no NIfTI predictions in {}", pred_dir.display())));
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .map(|(name, p)| {
            gts.get(name)
                .map(|g| (name, p, g))
                .ok_or_else(|| CliError::new("argument", format!("no ground truth for case {name} in {}", gt_dir.display())))
        })
        .collect::<Result<_, _>>()?;
    let cases: Vec<CaseMetrics> = pairs
        .par_iter()
        .map(|(name, p, g)| {
            let metrics = evaluate_case(&io::read_mask(p)?, &io::read_mask(g)?)
                .map_err(|e| CliError::new(e.kind(), format!("case {name}: {e}")))?;
            Ok(CaseMetrics { case: (*name).clone(), metrics })
        })
        .collect::<Result<_, CliError>>()?;
    let m = |f: fn(&MetricsReport) -> f64| mean(cases.iter().map(|c| f(&c.metrics))).unwrap_or(f64::NAN);
    Ok(EvalReport {
        n_cases: cases.len(),
        mean: MeanMetrics {
            dice: m(|r| r.dice),
            assd_mm: mean(cases.iter().filter(|c| !c.metrics.assd_undefined).map(|c| c.metrics.assd_mm)),
            precision: m(|r| r.precision),
            recall: m(|r| r.recall),
            ln_found: mean(cases.iter().filter(|c| !c.metrics.ln_found_undefined).map(|c| c.metrics.ln_found)),
        },
        cases,
    })
}

fn cell(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or_else(String::new, |x| format!("{x:.4}"))
}

/// Table with one row per case and a final mean row.
pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("case,Dice,ASSD,Precision,Recall,LN found\n");
    for c in &r.cases {
        let m = &c.metrics;
        let assd = (!m.assd_undefined).then_some(m.assd_mm);
        let ln = (!m.ln_found_undefined).then_some(m.ln_found);
        let _ = writeln!(s, "{},{},{},{},{},{}", c.case, cell(Some(m.dice)), cell(assd), cell(Some(m.precision)), cell(Some(m.recall)), cell(ln));
    }
    let m = &r.mean;
    let _ = writeln!(s, "mean,{},{},{},{},{}", cell(Some(m.dice)), cell(m.assd_mm), cell(Some(m.precision)), cell(Some(m.recall)), cell(m.ln_found));
    s
}
