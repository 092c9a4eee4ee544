//! Atlas construction and per-case preparation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nodekit_core::atlas::{
    bounding_box_region, build_distance_prior, build_prob_atlas, find_carina, transfer_prior,
};
use nodekit_core::registration::{
    masks_to_feature, register_chain, warp_onto, ChainResiduals, ChainResult, FieldDirection,
};
use nodekit_core::volume::{crop_to_mask_bbox, normalize_ct, write_field, Interpolation};
use nodekit_core::{LabelVolume, ScalarVolume};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{PipelineConfig, Subject, LUNGS, TRACHEA};
use crate::error::CliError;
use crate::io;

pub const ATLAS_PA_FILE: &str = "atlas_pa.nii.gz";
pub const ATLAS_DM_FILE: &str = "atlas_dm.nii.gz";

/// Per-case outcome recorded in a manifest.
#[derive(Debug, Serialize)]
pub struct CaseEntry {
    pub id: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residuals: Option<ChainResiduals>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<CliError>,
}

impl CaseEntry {
    fn new(id: &str, r: &Result<ChainResiduals, CliError>) -> Self {
        match r {
            Ok(res) => Self { id: id.into(), status: "ok", residuals: Some(res.clone()), error: None },
            Err(e) => Self {
                id: id.into(),
                status: "failed",
                residuals: None,
                error: Some(CliError::new(&e.kind, e.message.clone())),
            },
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a, E: Serialize> {
    command: &'static str,
    config_sha256: String,
    config: &'a PipelineConfig,
    inputs: BTreeMap<String, String>,
    #[serde(flatten)]
    extra: E,
    cases: Vec<CaseEntry>,
}

fn config_hash(cfg: &PipelineConfig) -> Result<String, CliError> {
    Ok(io::sha256_bytes(&serde_json::to_vec(cfg)?))
}

fn normalize_whole(ct: &ScalarVolume) -> Result<ScalarVolume, CliError> {
    let fg = LabelVolume::filled(ct.geometry().clone(), 1)?;
    Ok(normalize_ct(ct, &fg)?)
}

/// The atlas CT (normalized) and its masks, loaded once.
struct Atlas {
    image: ScalarVolume,
    masks: BTreeMap<String, LabelVolume>,
}

impl Atlas {
    fn load(cfg: &PipelineConfig, required: &[&str]) -> Result<Self, CliError> {
        let ct_path = cfg
            .paths
            .atlas_ct
            .as_ref()
            .ok_or_else(|| CliError::new("config", "paths.atlas_ct is required"))?;
        for name in required {
            if !cfg.paths.atlas_masks.contains_key(*name) {
                return Err(CliError::new("config", format!("paths.atlas_masks needs a {name:?} entry")));
            }
        }
        let ct = io::read_scalar(ct_path)?;
        let mut masks = BTreeMap::new();
        for (name, p) in &cfg.paths.atlas_masks {
            let m = io::read_mask(p)?;
            ct.geometry().ensure_aligned(m.geometry(), &format!("atlas mask {name}"))?;
            masks.insert(name.clone(), m);
        }
        Ok(Self { image: normalize_whole(&ct)?, masks })
    }
}

/// Registration features over the structures both sides provide.
fn features(
    structures: &[String],
    a: &BTreeMap<String, LabelVolume>,
    b: &BTreeMap<String, LabelVolume>,
) -> Result<(ScalarVolume, ScalarVolume), CliError> {
    let common: Vec<&String> = structures.iter().filter(|s| a.contains_key(*s) && b.contains_key(*s)).collect();
    if common.is_empty() {
        return Err(CliError::new("config", format!("no registration structure from {structures:?} is available on both sides")));
    }
    let pick = |m: &BTreeMap<String, LabelVolume>| common.iter().map(|s| m[*s].clone()).collect::<Vec<_>>();
    Ok((masks_to_feature(&pick(a), &[1])?, masks_to_feature(&pick(b), &[1])?))
}

struct LoadedSubject {
    ct: ScalarVolume,
    image: ScalarVolume,
    masks: BTreeMap<String, LabelVolume>,
    gt: Option<LabelVolume>,
}

fn load_subject(s: &Subject) -> Result<LoadedSubject, CliError> {
    let ct = io::read_scalar(&s.ct)?;
    let mut masks = BTreeMap::new();
    for (name, p) in &s.masks {
        let m = io::read_mask(p)?;
        ct.geometry().ensure_aligned(m.geometry(), &format!("{} mask {name}", s.id))?;
        masks.insert(name.clone(), m);
    }
    let gt = match &s.ground_truth {
        Some(p) => {
            let g = io::read_mask(p)?;
            ct.geometry().ensure_aligned(g.geometry(), &format!("{} ground truth", s.id))?;
            Some(g)
        }
        None => None,
    };
    Ok(LoadedSubject { image: normalize_whole(&ct)?, ct, masks, gt })
}

fn subject_inputs(s: &Subject) -> impl Iterator<Item = &PathBuf> {
    std::iter::once(&s.ct).chain(s.masks.values()).chain(s.ground_truth.iter())
}

#[derive(Serialize)]
struct AtlasExtra {
    carina_mm: [f64; 3],
    subjects_used: usize,
    outputs: [&'static str; 2],
}

/// Register every annotated subject into atlas space, average the warped
/// annotations into the probabilistic atlas and derive the carina prior.
pub fn build_atlas(cfg: &PipelineConfig, out_dir: &Path) -> Result<(), CliError> {
    let subjects: Vec<&Subject> = cfg.paths.subjects.iter().filter(|s| s.ground_truth.is_some()).collect();
    if subjects.is_empty() {
        return Err(CliError::new("config", "build-atlas needs at least one subject with a ground truth"));
    }
    let atlas = Atlas::load(cfg, &[LUNGS, TRACHEA])?;
    let grid = atlas.image.geometry().clone();

    let results: Vec<Result<(LabelVolume, ChainResiduals), CliError>> = subjects
        .par_iter()
        .map(|s| {
            let sub = load_subject(s)?;
            let (fixed, moving) = features(&cfg.atlas.structures, &atlas.masks, &sub.masks)?;
            let chain = register_chain(
                &fixed,
                &moving,
                &atlas.image,
                &sub.image,
                &cfg.linear,
                &cfg.registration,
                FieldDirection::SubjectToAtlas,
            )?;
            let gt = sub.gt.expect("filtered on ground truth");
            let warped = warp_onto(&gt, Some(&chain.affine), Some(&chain.field), &grid, Interpolation::Nearest)?;
            Ok((warped, chain.residuals))
        })
        .collect();

    let mut warped = Vec::new();
    let mut cases = Vec::new();
    for (s, r) in subjects.iter().zip(results) {
        let (entry, vol) = match r {
            Ok((v, res)) => (CaseEntry::new(&s.id, &Ok(res)), Some(v)),
            Err(e) => {
                warn!("subject {} skipped: {}", s.id, e.message);
                (CaseEntry::new(&s.id, &Err(e)), None)
            }
        };
        cases.push(entry);
        warped.extend(vol);
    }
    if warped.is_empty() {
        return Err(CliError::new("registration", "every subject failed; see log for details"));
    }
    info!("building atlas from {} of {} subjects", warped.len(), subjects.len());
    let pa = build_prob_atlas(&warped, cfg.atlas.sigma_vox)?;
    let carina = find_carina(&atlas.masks[TRACHEA])?;
    let region = bounding_box_region(&atlas.masks[LUNGS])?;
    let dm = build_distance_prior(&grid, carina, &region)?;

    let mut inputs: Vec<&PathBuf> = cfg.paths.atlas_ct.iter().chain(cfg.paths.atlas_masks.values()).collect();
    inputs.extend(subjects.iter().flat_map(|s| subject_inputs(s)));
    let manifest = Manifest {
        command: "build-atlas",
        config_sha256: config_hash(cfg)?,
        config: cfg,
        inputs: io::hash_inputs(inputs)?,
        extra: AtlasExtra { carina_mm: carina, subjects_used: warped.len(), outputs: [ATLAS_PA_FILE, ATLAS_DM_FILE] },
        cases,
    };
    io::create_dir(out_dir)?;
    io::write_f32(&pa.vol, &out_dir.join(ATLAS_PA_FILE))?;
    io::write_f32(&dm.vol, &out_dir.join(ATLAS_DM_FILE))?;
    io::write_json(&manifest, &out_dir.join("build_atlas_manifest.json"))
}

/// Everything `prepare` writes for one case, kept in memory until all cases
/// are done so that a failure elsewhere never leaves partial output.
struct Prepared {
    ct: ScalarVolume,
    pa: ScalarVolume,
    dm: ScalarVolume,
    lungs: LabelVolume,
    gt: Option<LabelVolume>,
    crop: nodekit_core::volume::CropRecord,
    chain: ChainResult,
}

fn prepare_case(
    cfg: &PipelineConfig,
    atlas: &Atlas,
    pa: &ScalarVolume,
    dm: &ScalarVolume,
    s: &Subject,
) -> Result<Prepared, CliError> {
    let sub = load_subject(s)?;
    let lungs = sub
        .masks
        .get(LUNGS)
        .ok_or_else(|| CliError::new("config", format!("subject {} has no {LUNGS:?} mask", s.id)))?;
    let (fixed, moving) = features(&cfg.atlas.structures, &sub.masks, &atlas.masks)?;
    let chain = register_chain(
        &fixed,
        &moving,
        &sub.image,
        &atlas.image,
        &cfg.linear,
        &cfg.registration,
        FieldDirection::AtlasToSubject,
    )?;
    let geom = sub.ct.geometry();
    let pa_s = transfer_prior(pa, &chain.affine, &chain.field, geom)?;
    let dm_s = transfer_prior(dm, &chain.affine, &chain.field, geom)?;
    let (ct_c, crop) = crop_to_mask_bbox(&sub.ct, lungs, cfg.atlas.crop_margin_mm)?;
    Ok(Prepared {
        ct: normalize_whole(&ct_c)?,
        pa: crop.apply(&pa_s)?,
        dm: crop.apply(&dm_s)?,
        lungs: crop.apply(lungs)?,
        gt: sub.gt.as_ref().map(|g| crop.apply(g)).transpose()?,
        crop,
        chain,
    })
}

#[derive(Serialize)]
struct PrepareExtra {
    atlas_pa: String,
    atlas_dm: String,
}

/// Bring the atlas priors onto each subject grid, crop to the lungs and
/// normalize the CT.
pub fn prepare(cfg: &PipelineConfig, out_dir: &Path, only: Option<&str>) -> Result<(), CliError> {
    let subjects: Vec<&Subject> = cfg.paths.subjects.iter().filter(|s| only.is_none_or(|c| c == s.id)).collect();
    if subjects.is_empty() {
        return Err(CliError::new("config", match only {
            Some(c) => format!("no subject with id {c:?}"),
            None => "no subjects configured".into(),
        }));
    }
    let pa_path = cfg.paths.atlas_pa.clone().unwrap_or_else(|| out_dir.join(ATLAS_PA_FILE));
    let dm_path = cfg.paths.atlas_dm.clone().unwrap_or_else(|| out_dir.join(ATLAS_DM_FILE));
    for p in [&pa_path, &dm_path] {
        if !p.is_file() {
            return Err(CliError::new("config", format!("atlas prior {} does not exist (run build-atlas first)", p.display())));
        }
    }
    let atlas = Atlas::load(cfg, &[])?;
    let pa = io::read_scalar(&pa_path)?;
    let dm = io::read_scalar(&dm_path)?;
    pa.ensure_unit_range("atlas prior")?;
    dm.ensure_unit_range("distance prior")?;

    let results: Vec<Result<Prepared, CliError>> =
        subjects.par_iter().map(|s| prepare_case(cfg, &atlas, &pa, &dm, s)).collect();

    let mut cases = Vec::new();
    let mut ok = Vec::new();
    for (s, r) in subjects.iter().zip(results) {
        match r {
            Ok(p) => {
                cases.push(CaseEntry::new(&s.id, &Ok(p.chain.residuals.clone())));
                ok.push((s, p));
            }
            Err(e) => {
                warn!("case {} flagged: {}", s.id, e.message);
                cases.push(CaseEntry::new(&s.id, &Err(e)));
            }
        }
    }
    if ok.is_empty() {
        return Err(CliError::new("registration", "every case failed; see log for details"));
    }

    let mut inputs: Vec<&PathBuf> = vec![&pa_path, &dm_path];
    inputs.extend(cfg.paths.atlas_ct.iter().chain(cfg.paths.atlas_masks.values()));
    inputs.extend(subjects.iter().flat_map(|s| subject_inputs(s)));
    let manifest = Manifest {
        command: "prepare",
        config_sha256: config_hash(cfg)?,
        config: cfg,
        inputs: io::hash_inputs(inputs)?,
        extra: PrepareExtra { atlas_pa: pa_path.display().to_string(), atlas_dm: dm_path.display().to_string() },
        cases,
    };
    io::create_dir(out_dir)?;
    for (s, p) in &ok {
        let f = |suffix: &str| out_dir.join(format!("{}_{suffix}", s.id));
        io::write_f32(&p.ct, &f("ct.nii.gz"))?;
        io::write_f32(&p.pa, &f("pa.nii.gz"))?;
        io::write_f32(&p.dm, &f("dm.nii.gz"))?;
        io::write_labels(&p.lungs, &f("lungs.nii.gz"))?;
        if let Some(g) = &p.gt {
            io::write_labels(g, &f("gt.nii.gz"))?;
        }
        io::write_json(&p.crop, &f("crop.json"))?;
        p.chain.affine.write(f("affine.txt"))?;
        write_field(&p.chain.field, f("field.nii.gz"))?;
    }
    let name = match only {
        Some(c) => format!("prepare_{c}_manifest.json"),
        None => "prepare_manifest.json".into(),
    };
    io::write_json(&manifest, &out_dir.join(name))
}
