//! Fixtures shared by the CLI test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nodekit_core::volume::write_nifti;
use nodekit_core::{LabelVolume, ScalarVolume, VolumeGeometry};

pub fn nodekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodekit")).args(args).output().expect("spawn nodekit")
}

pub fn ok(args: &[&str]) -> Output {
    let out = nodekit(args);
    assert!(out.status.success(), "nodekit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.clone(), std::fs::read(&p).unwrap());
        }
    }
    out
}

pub const DIMS: [usize; 3] = [24, 24, 28];

pub fn geom() -> VolumeGeometry {
    VolumeGeometry::new(DIMS, [2.0; 3]).unwrap().with_origin([-24.0, -24.0, -20.0])
}

pub fn mask(f: impl Fn(f64, f64, f64) -> bool) -> LabelVolume {
    LabelVolume::from_fn(geom(), |i, j, k| u32::from(f(i as f64, j as f64, k as f64))).unwrap()
}

/// A chest-like phantom: two lung boxes, a trachea that bifurcates at
/// k = 16, a heart ball and a node-like ground truth.
pub fn write_phantom(dir: &Path) -> BTreeMap<&'static str, PathBuf> {
    let lungs = mask(|i, j, k| {
        ((2.0..=8.0).contains(&i) || (15.0..=21.0).contains(&i)) && (4.0..=19.0).contains(&j) && (3.0..=24.0).contains(&k)
    });
    let trachea = mask(|i, j, k| {
        let trunk = k >= 16.0 && (i - 11.5).powi(2) + (j - 12.0).powi(2) <= 2.3;
        let left = (10.0..16.0).contains(&k) && (i - 9.0).powi(2) + (j - 12.0).powi(2) <= 1.2;
        let right = (10.0..16.0).contains(&k) && (i - 14.0).powi(2) + (j - 12.0).powi(2) <= 1.2;
        trunk || left || right
    });
    let heart = mask(|i, j, k| (i - 12.0).powi(2) + (j - 8.0).powi(2) + (k - 8.0).powi(2) <= 16.0);
    let gt = mask(|i, j, k| (i - 12.0).powi(2) + (j - 15.0).powi(2) + (k - 13.0).powi(2) <= 4.0);
    let ct = ScalarVolume::from_fn(geom(), |i, j, k| {
        let l = lungs.get(i, j, k) as f64 * -800.0;
        let t = trachea.get(i, j, k) as f64 * -1000.0;
        let h = heart.get(i, j, k) as f64 * 40.0;
        let g = gt.get(i, j, k) as f64 * 20.0;
        l + t + h + g + ((i * 7 + j * 3 + k) % 5) as f64
    })
    .unwrap();
    let mut files = BTreeMap::new();
    for (name, vol) in [("lungs", &lungs), ("trachea", &trachea), ("heart", &heart), ("gt", &gt)] {
        let p = dir.join(format!("{name}.nii.gz"));
        write_nifti(vol, &p).unwrap();
        files.insert(name, p);
    }
    let p = dir.join("ct.nii.gz");
    write_nifti(&ct, &p).unwrap();
    files.insert("ct", p);
    files
}

pub fn write_config(dir: &Path, files: &BTreeMap<&str, PathBuf>) -> PathBuf {
    let masks = serde_json::json!({ "lungs": files["lungs"], "trachea": files["trachea"], "heart": files["heart"] });
    let cfg = serde_json::json!({
        "paths": {
            "atlas_ct": files["ct"],
            "atlas_masks": masks,
            "subjects": [{ "id": "case01", "ct": files["ct"], "masks": masks, "ground_truth": files["gt"] }],
        },
        "atlas": { "sigma_vox": 1.0, "structures": ["heart", "trachea"], "crop_margin_mm": 4.0 },
        "linear": { "levels": 2, "iterations_per_level": 40 },
        "registration": { "levels": 2, "iterations_per_level": 20 },
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

pub fn probs_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let g = VolumeGeometry::new([16, 16, 12], [1.5, 1.5, 2.0]).unwrap();
    let probs = ScalarVolume::from_fn(g.clone(), |i, j, k| {
        let d1 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2) + (k as f64 - 5.0).powi(2)).sqrt();
        let d2 = ((i as f64 - 11.0).powi(2) + (j as f64 - 10.0).powi(2) + (k as f64 - 7.0).powi(2)).sqrt();
        (0.9 - 0.15 * d1).max(0.7 - 0.3 * d2).clamp(0.0, 1.0)
    })
    .unwrap();
    let pa = ScalarVolume::from_fn(g.clone(), |i, _, _| i as f64 / 15.0).unwrap();
    let lungs = LabelVolume::from_fn(g, |i, j, k| u32::from((i < 3 || i > 13) && j > 1 && k > 1)).unwrap();
    let paths = (dir.join("probs.nii.gz"), dir.join("pa.nii.gz"), dir.join("lungs.nii.gz"));
    write_nifti(&probs, &paths.0).unwrap();
    write_nifti(&pa, &paths.1).unwrap();
    write_nifti(&lungs, &paths.2).unwrap();
    paths
}
