//! Python bindings: volumes, fields, models and the dataset/training
//! entry points.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pm::attention::{attn_cost as core_attn_cost, cost_csv as core_cost_csv, AttnStrategy};
use pm::checkpoint::{load_checkpoint, save_checkpoint};
use pm::cli;
use pm::config::RunConfig;
use pm::data::SynthParams;
use pm::error::Error;
use pm::field::{jacobian_stats, warp, DeformationField, Interp};
use pm::mvol::{read_field, read_volume, write_mvol};
use pm::network::{build_model, ModelConfig};
use pm::objectives;
use pm::trainer::{grad_check as core_grad_check, grad_check_config, register};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for pm::error::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Scalar 3D volume, D-fastest.
#[pyclass(name = "Volume", module = "planemorph", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume(pm::volume::Volume);

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (shape, data, spacing = (1.0, 1.0, 1.0)))]
    fn new(shape: (usize, usize, usize), data: Vec<f32>, spacing: (f64, f64, f64)) -> PyResult<Self> {
        let s = [shape.0, shape.1, shape.2];
        pm::volume::Volume::new(s, [spacing.0, spacing.1, spacing.2], data).py().map(Self)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_volume(path).py().map(Self)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_mvol(path, self.0.clone()).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let s = self.0.spacing();
        (s[0], s[1], s[2])
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn normalize(&self) -> Self {
        Self(self.0.normalize())
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?})", self.0.shape())
    }
}

/// Displacement field in voxels, components interleaved after D.
#[pyclass(name = "Field", module = "planemorph", skip_from_py_object)]
#[derive(Clone)]
struct PyField(DeformationField);

#[pymethods]
impl PyField {
    #[new]
    fn new(shape: (usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        DeformationField::new([shape.0, shape.1, shape.2], data).py().map(Self)
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize)) -> Self {
        Self(DeformationField::zeros([shape.0, shape.1, shape.2]))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_field(path).py().map(Self)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_mvol(path, self.0.clone()).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    /// `(neg_fraction_percent, min_det, mean_det)` over interior voxels.
    fn jacobian_stats(&self) -> PyResult<(f64, f64, f64)> {
        let j = jacobian_stats(&self.0).py()?;
        Ok((j.neg_fraction, j.min_det, j.mean_det))
    }

    fn bending_energy(&self) -> PyResult<f64> {
        objectives::bending_energy(&self.0).py()
    }

    /// Resample `volume` through this field.
    #[pyo3(signature = (volume, interp = "trilinear"))]
    fn warp(&self, volume: &PyVolume, interp: &str) -> PyResult<PyVolume> {
        let i = match interp {
            "trilinear" => Interp::Trilinear,
            "nearest" => Interp::Nearest,
            other => return Err(PyValueError::new_err(format!("unknown interpolation {other:?}"))),
        };
        warp(&volume.0, &self.0, i).py().map(PyVolume)
    }
}

/// Registration network.
#[pyclass(name = "Model", module = "planemorph", skip_from_py_object)]
struct PyModel(pm::network::Model);

#[pymethods]
impl PyModel {
    /// Build from a JSON model section (the `model` object of a run config).
    #[new]
    #[pyo3(signature = (config = "{}"))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        build_model(&cfg).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, path).py()
    }

    fn count_params(&self) -> usize {
        self.0.count_params()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.0.cfg).expect("config serializes")
    }

    fn forward(&self, fixed: &PyVolume, moving: &PyVolume) -> PyResult<PyField> {
        self.0.forward(&fixed.0, &moving.0).py().map(PyField)
    }

    /// `(field, warped_moving)`.
    fn register(&self, fixed: &PyVolume, moving: &PyVolume) -> PyResult<(PyField, PyVolume)> {
        let (f, w) = register(&self.0, &fixed.0, &moving.0).py()?;
        Ok((PyField(f), PyVolume(w)))
    }
}

#[pyfunction]
#[pyo3(signature = (out, n, size, labels, max_disp, sigma = 4.0, seed = 0))]
fn gen_data(out: PathBuf, n: usize, size: usize, labels: usize, max_disp: f64, sigma: f64, seed: u64) -> PyResult<()> {
    cli::cmd_gen_data(&out, &SynthParams { n, size, labels, max_disp, sigma, seed }).py()
}

/// Train from a run-config file; writes checkpoints and metrics to `out`.
#[pyfunction]
fn train(config: PathBuf, data: PathBuf, out: PathBuf) -> PyResult<()> {
    cli::cmd_train(&config, &data, &out).py()
}

/// Evaluate a checkpoint; writes the report and returns it as JSON text.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, data: PathBuf, report: PathBuf) -> PyResult<String> {
    let r = cli::cmd_eval(&checkpoint, &data, &report).py()?;
    Ok(serde_json::to_string(&r).expect("report serializes"))
}

/// Validate a run config, returning the fully defaulted document.
#[pyfunction]
fn resolve_config(text: &str) -> PyResult<String> {
    RunConfig::from_json(text).py().map(|c| c.resolved_json())
}

#[pyfunction]
fn lncc(fixed: &PyVolume, warped: &PyVolume, window: usize) -> PyResult<f64> {
    objectives::lncc(&fixed.0, &warped.0, window, 1e-5).py()
}

/// Score elements, parameters and FLOPs of one attention strategy.
#[pyfunction]
fn attn_cost<'py>(py: Python<'py>, dims: (usize, usize, usize), dim: usize, strategy: &str) -> PyResult<Bound<'py, PyDict>> {
    let s: AttnStrategy = strategy.parse().py()?;
    let r = core_attn_cost([dims.0, dims.1, dims.2], dim, s);
    let d = PyDict::new(py);
    d.set_item("score_elems", r.score_elems)?;
    d.set_item("params", r.params)?;
    d.set_item("flops", r.flops())?;
    Ok(d)
}

#[pyfunction]
fn cost_csv(dims: (usize, usize, usize), dim: usize) -> String {
    core_cost_csv([dims.0, dims.1, dims.2], dim)
}

/// Maximum relative error of a finite-difference check on the tiny model.
#[pyfunction]
#[pyo3(signature = (per_tensor = 2, seed = 0))]
fn grad_check(per_tensor: usize, seed: u64) -> PyResult<f64> {
    core_grad_check(&grad_check_config(), per_tensor, seed).py().map(|r| r.max_rel_err)
}

#[pymodule]
#[pyo3(name = "planemorph")]
fn planemorph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(lncc, m)?)?;
    m.add_function(wrap_pyfunction!(attn_cost, m)?)?;
    m.add_function(wrap_pyfunction!(cost_csv, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
