//! File helpers shared by the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nodekit_core::volume::{read_nifti, write_nifti, write_nifti_as, NiftiDatatype};
use nodekit_core::{LabelVolume, ScalarVolume};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Content hashes keyed by path, for manifests.
pub fn hash_inputs<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<BTreeMap<String, String>, CliError> {
    paths.into_iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

pub fn read_scalar(path: &Path) -> Result<ScalarVolume, CliError> {
    Ok(read_nifti(path)?.into_scalar())
}

/// Any non-zero voxel becomes 1.
pub fn read_mask(path: &Path) -> Result<LabelVolume, CliError> {
    Ok(read_nifti(path)?.into_labels()?.nonzero_mask())
}

pub fn write_f32(vol: &ScalarVolume, path: &Path) -> Result<(), CliError> {
    Ok(write_nifti_as(vol, path, NiftiDatatype::Float32)?)
}

pub fn write_labels(vol: &LabelVolume, path: &Path) -> Result<(), CliError> {
    Ok(write_nifti(vol, path)?)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

/// File name without the `.nii` / `.nii.gz` extension.
pub fn case_name(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_string)
}

/// NIfTI files directly inside `dir`, sorted by case name.
pub fn list_cases(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(name) = case_name(&path) {
            if out.insert(name.clone(), path).is_some() {
                return Err(CliError::new("argument", format!("case {name} appears twice in {}", dir.display())));
            }
        }
    }
    Ok(out)
}
