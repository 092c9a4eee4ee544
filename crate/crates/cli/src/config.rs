//! Run configuration: input paths plus every module's parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nodekit_core::atlas::DEFAULT_ATLAS_SIGMA_VOX;
use nodekit_core::augment::{GinConfig, RampConfig};
use nodekit_core::losses::LossConfig;
use nodekit_core::postprocess::PostprocessConfig;
use nodekit_core::registration::{LinearConfig, RegistrationConfig, DEFAULT_STRUCTURES};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Name of the lung mask entry in a mask map.
pub const LUNGS: &str = "lungs";
/// Name of the trachea mask entry in the atlas mask map.
pub const TRACHEA: &str = "trachea";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub id: String,
    pub ct: PathBuf,
    /// Binary organ masks by structure name.
    #[serde(default)]
    pub masks: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub atlas_ct: Option<PathBuf>,
    pub atlas_masks: BTreeMap<String, PathBuf>,
    /// Atlas-space priors; default to the build-atlas outputs.
    pub atlas_pa: Option<PathBuf>,
    pub atlas_dm: Option<PathBuf>,
    pub subjects: Vec<Subject>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSettings {
    pub sigma_vox: f64,
    /// Structures whose union drives rigid/affine registration.
    pub structures: Vec<String>,
    /// Margin around the lung bounding box when cropping subjects.
    pub crop_margin_mm: f64,
}

impl Default for AtlasSettings {
    fn default() -> Self {
        Self {
            sigma_vox: DEFAULT_ATLAS_SIGMA_VOX,
            structures: DEFAULT_STRUCTURES.iter().map(|s| s.to_string()).collect(),
            crop_margin_mm: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub atlas: AtlasSettings,
    pub linear: LinearConfig,
    pub registration: RegistrationConfig,
    pub loss: LossConfig,
    pub postprocess: PostprocessConfig,
    pub gin: GinConfig,
    pub ramp: RampConfig,
    pub seed: u64,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parse a JSON config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let p = &mut cfg.paths;
        for x in [&mut p.atlas_ct, &mut p.atlas_pa, &mut p.atlas_dm, &mut p.output_dir].into_iter().flatten() {
            resolve(&base, x);
        }
        p.atlas_masks.values_mut().for_each(|x| resolve(&base, x));
        for s in &mut p.subjects {
            resolve(&base, &mut s.ct);
            s.masks.values_mut().for_each(|x| resolve(&base, x));
            if let Some(g) = &mut s.ground_truth {
                resolve(&base, g);
            }
        }
        Ok(cfg)
    }

    /// Module parameter invariants and existence of referenced input files.
    pub fn validate(&self) -> Result<(), CliError> {
        self.linear.validate()?;
        self.registration.validate()?;
        self.loss.validate()?;
        self.postprocess.validate()?;
        self.gin.validate()?;
        self.ramp.validate()?;
        let a = &self.atlas;
        if !(a.sigma_vox >= 0.0 && a.sigma_vox.is_finite()) {
            return Err(CliError::new("config", format!("atlas.sigma_vox = {} must be non-negative", a.sigma_vox)));
        }
        if !(a.crop_margin_mm >= 0.0 && a.crop_margin_mm.is_finite()) {
            return Err(CliError::new("config", format!("atlas.crop_margin_mm = {} must be non-negative", a.crop_margin_mm)));
        }
        if a.structures.is_empty() {
            return Err(CliError::new("config", "atlas.structures must not be empty"));
        }
        let p = &self.paths;
        let mut ids = std::collections::BTreeSet::new();
        for s in &p.subjects {
            if s.id.is_empty() || s.id.contains(['/', '\\']) || !ids.insert(&s.id) {
                return Err(CliError::new("config", format!("subject id {:?} is empty, duplicated or contains a path separator", s.id)));
            }
        }
        let inputs = p
            .atlas_ct
            .iter()
            .chain(p.atlas_masks.values())
            .chain(p.subjects.iter().flat_map(|s| std::iter::once(&s.ct).chain(s.masks.values()).chain(s.ground_truth.iter())));
        for f in inputs {
            if !f.is_file() {
                return Err(CliError::new("config", format!("input file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self, flag: Option<&PathBuf>) -> Result<PathBuf, CliError> {
        flag.or(self.paths.output_dir.as_ref())
            .cloned()
            .ok_or_else(|| CliError::new("config", "no output directory (set paths.output_dir or --out-dir)"))
    }
}
