//! Python bindings for `casgan-core`.
//!
//! Images cross the boundary as nested lists shaped `[C][H][W]`; a bare
//! `[H][W]` list is read as one channel. Feature sets are `[n][d]` lists.

use std::path::PathBuf;

use casgan_core::checkpoint::{load_bundle, Manifest};
use casgan_core::config::{load_config_with, RunConfig};
use casgan_core::cycles::run_forward;
use casgan_core::data::{build_synthetic_dataset, DatasetSpec, SynthScene};
use casgan_core::metrics::{self, Bandwidth, FeatureSet};
use casgan_core::nets::NetworkBundle;
use casgan_core::{plot, trainer, Error, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

type Nested = Vec<Vec<Vec<f64>>>;

fn to_tensor(img: Nested) -> PyResult<Tensor> {
    let (c, h) = (img.len(), img.first().map_or(0, Vec::len));
    let w = img.first().and_then(|p| p.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(c * h * w);
    for plane in &img {
        if plane.len() != h || plane.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("image planes must be rectangular and equal-sized"));
        }
        data.extend(plane.iter().flatten());
    }
    Tensor::new(&[1, c, h, w], data).map_err(py_err)
}

fn image_arg(obj: &Bound<'_, PyAny>) -> PyResult<Tensor> {
    if let Ok(chw) = obj.extract::<Nested>() {
        return to_tensor(chw);
    }
    let hw: Vec<Vec<f64>> = obj.extract()?;
    to_tensor(vec![hw])
}

fn to_nested(t: &Tensor) -> Nested {
    let s = t.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let d = t.data();
    (0..c)
        .map(|ch| (0..h).map(|y| d[(ch * h + y) * w..(ch * h + y + 1) * w].to_vec()).collect())
        .collect()
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<FeatureSet> {
    FeatureSet::from_rows(&rows).map_err(py_err)
}

fn parse_config(json: Option<&str>) -> PyResult<RunConfig> {
    match json {
        Some(text) => RunConfig::from_text(text).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

/// Resolved run configuration as a JSON string: defaults, then the file at
/// `path`, then `overrides` (a JSON object).
#[pyfunction]
#[pyo3(signature = (path=None, overrides=None))]
fn load_config(path: Option<PathBuf>, overrides: Option<&str>) -> PyResult<String> {
    let map = match overrides {
        Some(text) => match serde_json::from_str::<serde_json::Value>(text) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => return Err(PyValueError::new_err("overrides must be a JSON object")),
        },
        None => Default::default(),
    };
    let cfg = load_config_with(path.as_deref(), &map).map_err(py_err)?;
    Ok(cfg.to_json_string())
}

/// Learning rate at `epoch` under the config's linear-decay schedule.
#[pyfunction]
#[pyo3(signature = (epoch, config=None))]
fn lr_at(epoch: u64, config: Option<&str>) -> PyResult<f64> {
    trainer::lr_schedule(epoch, &parse_config(config)?).map_err(py_err)
}

/// `x * (1 - a) + c * a` with a single-channel gate.
#[pyfunction]
fn compose(x: &Bound<'_, PyAny>, attention: &Bound<'_, PyAny>, context: &Bound<'_, PyAny>) -> PyResult<Nested> {
    let masks = casgan_core::nets::MaskPair {
        attention: image_arg(attention)?,
        context: image_arg(context)?,
    };
    let out = casgan_core::cycles::compose(&image_arg(x)?, &masks).map_err(py_err)?;
    Ok(to_nested(&out))
}

#[pyfunction]
fn fid(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fid(&features(real)?, &features(generated)?).map_err(py_err)
}

/// Unbiased Gaussian-kernel MMD; `bandwidth=None` uses the median heuristic.
#[pyfunction]
#[pyo3(signature = (real, generated, bandwidth=None))]
fn mmd(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<f64> {
    let bw = bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed);
    metrics::mmd(&features(real)?, &features(generated)?, bw).map_err(py_err)
}

/// One synthetic scene: background, vessel mask and the rendered angiogram.
#[pyfunction]
#[pyo3(signature = (seed, size=64, imprint=casgan_core::data::DEFAULT_IMPRINT))]
fn synth_scene<'py>(py: Python<'py>, seed: u64, size: usize, imprint: f64) -> PyResult<Bound<'py, PyDict>> {
    let s = SynthScene::generate(seed, size, imprint).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("background", to_nested(&s.background))?;
    d.set_item("vessel_mask", to_nested(&s.vessel_mask))?;
    d.set_item("angiography", to_nested(&s.angiography))?;
    Ok(d)
}

/// Writes a synthetic dataset under `root`; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (root, n_background=16, n_angio=16, n_annotated=64, n_test=16, size=64, seed=0))]
fn build_dataset(
    root: PathBuf,
    n_background: usize,
    n_angio: usize,
    n_annotated: usize,
    n_test: usize,
    size: usize,
    seed: u64,
) -> PyResult<String> {
    let mut spec = DatasetSpec::new(n_background, n_angio, n_annotated, size, seed);
    spec.n_test = n_test;
    let m = build_synthetic_dataset(&spec, &root).map_err(py_err)?;
    serde_json::to_string(&m).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Parses a training loss log; returns `{column: [values]}`.
#[pyfunction]
fn read_loss_log<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let t = plot::parse_log(text).map_err(py_err)?;
    let d = PyDict::new(py);
    for name in &t.columns {
        d.set_item(name, t.column(name).unwrap_or_default())?;
    }
    Ok(d)
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    casgan_core::cli::run(std::iter::once("casgan".to_string()).chain(args))
}

/// A trained translation model loaded from a checkpoint directory.
#[pyclass]
struct Model {
    bundle: NetworkBundle,
    manifest: Manifest,
}

#[pymethods]
impl Model {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        let (bundle, manifest) = load_bundle(&path).map_err(py_err)?;
        Ok(Model { bundle, manifest })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.bundle.config.image_size
    }

    #[getter]
    fn step(&self) -> u64 {
        self.manifest.step
    }

    /// Run configuration stored with the checkpoint, as JSON.
    fn config(&self) -> String {
        self.bundle.config.to_json_string()
    }

    /// Background to angiography; returns `{generated, attention, context}`.
    fn translate<'py>(&self, py: Python<'py>, image: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyDict>> {
        let f = run_forward(&self.bundle, &image_arg(image)?).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("generated", to_nested(&f.y_g))?;
        d.set_item("attention", to_nested(&f.masks.attention))?;
        d.set_item("context", to_nested(&f.masks.context))?;
        Ok(d)
    }
}

#[pymodule]
fn casgan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_loss_log, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
