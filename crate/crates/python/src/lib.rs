//! Python bindings. Volumes cross the boundary as flat x-fastest lists.

use nodekit_core::atlas::build_prob_atlas;
use nodekit_core::augment::{augment_pipeline, rampup_weight as ramp, GinConfig, RampConfig};
use nodekit_core::losses::{self, LossConfig, LossOutput, ProbVolume};
use nodekit_core::metrics::evaluate_case;
use nodekit_core::postprocess::{adaptive_threshold as threshold, run_postprocess, PostprocessConfig};
use nodekit_core::ssl::{ema_update as ema, ParamVector};
use nodekit_core::volume::{read_nifti as read, write_nifti as write};
use nodekit_core::{Error, LabelVolume, ScalarVolume, VolumeGeometry};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Write { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A 3D scalar volume on a physical grid.
#[pyclass(name = "Volume", module = "nodekit", frozen, from_py_object)]
#[derive(Clone)]
struct PyVolume(ScalarVolume);

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, dims, spacing = [1.0; 3], origin = [0.0; 3]))]
    fn new(data: Vec<f64>, dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> PyResult<Self> {
        let g = VolumeGeometry::new(dims, spacing).map_err(err)?.with_origin(origin);
        Ok(Self(ScalarVolume::new(g, data).map_err(err)?))
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.0.spacing()
    }

    #[getter]
    fn origin(&self) -> [f64; 3] {
        self.0.geometry().origin
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.0.dims(), self.0.spacing())
    }
}

fn labels(v: &PyVolume) -> PyResult<LabelVolume> {
    let data = v
        .0
        .data()
        .iter()
        .map(|&x| (x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64).then_some(x as u32))
        .collect::<Option<Vec<u32>>>()
        .ok_or_else(|| PyValueError::new_err("label volume must hold non-negative integers"))?;
    v.0.with_data(data).map_err(err)
}

fn probs(v: &PyVolume) -> PyResult<ProbVolume> {
    ProbVolume::new(v.0.clone()).map_err(err)
}

fn wrap(out: LossOutput) -> (f64, PyVolume) {
    (out.value, PyVolume(out.gradient))
}

#[pyfunction]
fn read_nifti(path: &str) -> PyResult<PyVolume> {
    Ok(PyVolume(read(path).map_err(err)?.into_scalar()))
}

/// Writes float32 when lossless, else float64.
#[pyfunction]
fn write_nifti(vol: &PyVolume, path: &str) -> PyResult<()> {
    write(&vol.0, path).map_err(err)
}

/// Per-voxel binarization threshold for base `t` and atlas probability `p`.
#[pyfunction]
fn adaptive_threshold(t: f64, p: f64) -> f64 {
    threshold(t, p)
}

#[pyfunction]
fn cross_entropy(pred: &PyVolume, gt: &PyVolume) -> PyResult<(f64, PyVolume)> {
    Ok(wrap(losses::cross_entropy(&probs(pred)?, &labels(gt)?).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (pred, gt, eps = 1e-5))]
fn soft_dice_loss(pred: &PyVolume, gt: &PyVolume, eps: f64) -> PyResult<(f64, PyVolume)> {
    Ok(wrap(losses::soft_dice_loss(&probs(pred)?, &labels(gt)?, None, eps).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (pred, gt, alpha = 0.25, beta = 0.75, eps = 1e-5))]
fn tversky_loss(pred: &PyVolume, gt: &PyVolume, alpha: f64, beta: f64, eps: f64) -> PyResult<(f64, PyVolume)> {
    Ok(wrap(losses::tversky_loss(&probs(pred)?, &labels(gt)?, alpha, beta, eps).map_err(err)?))
}

#[pyfunction]
fn pa_weight_map(gt: &PyVolume, pa: &PyVolume) -> PyResult<PyVolume> {
    let w = losses::pa_weight_map(&labels(gt)?, &pa.0, &LossConfig::default()).map_err(err)?;
    Ok(PyVolume(w.volume().clone()))
}

/// Default-weighted combination of cross-entropy, atlas-weighted soft Dice
/// and Tversky. Returns `(value, gradient)`.
#[pyfunction]
#[pyo3(signature = (pred, gt, pa = None))]
fn combined_loss(pred: &PyVolume, gt: &PyVolume, pa: Option<&PyVolume>) -> PyResult<(f64, PyVolume)> {
    let out = losses::combined_loss(&probs(pred)?, &labels(gt)?, pa.map(|p| &p.0), &LossConfig::default());
    Ok(wrap(out.map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (epoch, ramp_epochs = 1000))]
fn rampup_weight(epoch: u64, ramp_epochs: u64) -> f64 {
    ramp(epoch, &RampConfig { ramp_epochs, ..RampConfig::default() })
}

#[pyfunction]
fn augment(vol: &PyVolume, epoch: u64, seed: u64) -> PyResult<PyVolume> {
    let out = augment_pipeline(&vol.0, epoch, seed, &GinConfig::default(), &RampConfig::default());
    Ok(PyVolume(out.map_err(err)?))
}

#[pyfunction]
fn prob_atlas(masks: Vec<PyVolume>, sigma_vox: f64) -> PyResult<PyVolume> {
    let m = masks.iter().map(labels).collect::<PyResult<Vec<_>>>()?;
    Ok(PyVolume(build_prob_atlas(&m, sigma_vox).map_err(err)?.vol))
}

/// Ensemble → adaptive threshold → diameter filter → lung hull. Returns a
/// 0/1 volume.
#[pyfunction]
#[pyo3(signature = (probs_list, pa, lungs, t = 0.5, min_diameter_mm = None))]
fn postprocess(
    probs_list: Vec<PyVolume>,
    pa: &PyVolume,
    lungs: &PyVolume,
    t: f64,
    min_diameter_mm: Option<f64>,
) -> PyResult<PyVolume> {
    let p = probs_list.iter().map(probs).collect::<PyResult<Vec<_>>>()?;
    let cfg = PostprocessConfig { t, min_diameter_mm, ..PostprocessConfig::default() };
    let out = run_postprocess(&p, &pa.0, &labels(lungs)?, None, &cfg).map_err(err)?;
    Ok(PyVolume(out.to_scalar()))
}

/// Dice, ASSD (mm, inf when undefined), precision, recall and LN found.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: &PyVolume, gt: &PyVolume) -> PyResult<Bound<'py, PyDict>> {
    let r = evaluate_case(&labels(pred)?, &labels(gt)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("dice", r.dice)?;
    d.set_item("assd_mm", r.assd_mm)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("ln_found", r.ln_found)?;
    d.set_item("tp", r.tp)?;
    d.set_item("fp", r.fp)?;
    d.set_item("fn", r.fn_)?;
    Ok(d)
}

/// Teacher update `m·teacher + (1 − m)·student`.
#[pyfunction]
fn ema_update(teacher: Vec<f64>, student: Vec<f64>, momentum: f64) -> PyResult<Vec<f64>> {
    let t = ParamVector::new(teacher).map_err(err)?;
    let s = ParamVector::new(student).map_err(err)?;
    Ok(ema(&t, &s, momentum).map_err(err)?.into_values())
}

#[pymodule]
#[pyo3(name = "nodekit")]
fn nodekit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_function(wrap_pyfunction!(read_nifti, m)?)?;
    m.add_function(wrap_pyfunction!(write_nifti, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tversky_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pa_weight_map, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rampup_weight, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(prob_atlas, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    Ok(())
}
