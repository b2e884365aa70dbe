//! Python module `csn`: cost reports, grouped 3D convolution, models,
//! synthetic data, training and filter images.
//!
//! Tensors cross the boundary as flat `float` sequences plus a 5-tuple of
//! dims `(N, C, T, H, W)`; `numpy` arrays work via `.ravel()`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use csn_core::analyzer::{layer_stats as stats, model_report, AnalyzerOptions};
use csn_core::data::{gen_dataset, read_dataset, write_dataset, SampleSpec, SynthTaskSpec};
use csn_core::gradcheck::{check_blocks, check_layers, check_tiny_model};
use csn_core::ops::{conv3d_forward, ConvSpec};
use csn_core::train::{evaluate, train as run_training, TrainConfig};
use csn_core::zoo::{checkpoint, known_arch_names, ArchSpec};
use csn_core::{viz, Shape5, Tensor5};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(data: Vec<f32>, dims: [usize; 5]) -> PyResult<Tensor5<f32>> {
    Tensor5::from_vec(Shape5::from_dims(dims).map_err(err)?, data).map_err(err)
}

/// `(T, H, W)`, `(C, T, H, W)` or `(N, C, T, H, W)`.
fn input_shape(dims: &[usize]) -> PyResult<Shape5> {
    let full = match *dims {
        [t, h, w] => [1, 3, t, h, w],
        [c, t, h, w] => [1, c, t, h, w],
        [n, c, t, h, w] => [n, c, t, h, w],
        _ => return Err(err("input needs 3, 4 or 5 dims")),
    };
    Shape5::from_dims(full).map_err(err)
}

/// Names accepted by `arch` arguments.
#[pyfunction]
fn arch_names() -> Vec<String> {
    known_arch_names()
}

/// Per-layer and total params, FLOPs and interactions, as a JSON string.
#[pyfunction]
#[pyo3(signature = (arch, input = vec![8, 224, 224], classes = 400, voxels = "output", include_bn = false))]
fn analyze(arch: &str, input: Vec<usize>, classes: usize, voxels: &str, include_bn: bool) -> PyResult<String> {
    let opts = AnalyzerOptions {
        voxels: voxels.parse().map_err(err)?,
        include_bn,
    };
    let arch = ArchSpec::named(arch, classes).map_err(err)?;
    model_report(&arch, &input_shape(&input)?, &opts).and_then(|r| r.to_json()).map_err(err)
}

/// Counts of one `k³` convolution evaluated at `voxels` positions.
#[pyfunction]
#[pyo3(signature = (c_in, c_out, groups = 1, kernel = 3, voxels = 1))]
fn layer_stats<'py>(py: Python<'py>, c_in: usize, c_out: usize, groups: usize, kernel: usize, voxels: u64) -> PyResult<Bound<'py, PyDict>> {
    let spec = ConvSpec::cube(c_in, c_out, groups, kernel, [1; 3]);
    spec.validate().map_err(err)?;
    let c = stats(&spec, voxels);
    let d = PyDict::new(py);
    d.set_item("params", c.params)?;
    d.set_item("flops", c.flops)?;
    d.set_item("interactions", c.interactions)?;
    Ok(d)
}

/// Grouped `k³` convolution with "same" padding; `groups == c_in == c_out`
/// is depthwise. Returns `(flat output, dims)`.
#[pyfunction]
#[pyo3(signature = (x, dims, weight, c_out, groups = 1, kernel = 3, stride = 1))]
fn conv3d(
    x: Vec<f32>,
    dims: [usize; 5],
    weight: Vec<f32>,
    c_out: usize,
    groups: usize,
    kernel: usize,
    stride: usize,
) -> PyResult<(Vec<f32>, [usize; 5])> {
    let spec = ConvSpec::cube(dims[1], c_out, groups, kernel, [stride; 3]);
    spec.validate().map_err(err)?;
    let w = Tensor5::from_vec(spec.weight_shape().map_err(err)?, weight).map_err(err)?;
    let y = conv3d_forward(&tensor(x, dims)?, &w, None, &spec).map_err(err)?;
    let out = y.shape().dims();
    Ok((y.into_vec(), out))
}

/// A network with its weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: csn_core::zoo::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch, classes = 400, seed = 0))]
    fn new(arch: &str, classes: usize, seed: u64) -> PyResult<Self> {
        let arch = ArchSpec::named(arch, classes).map_err(err)?;
        let inner = csn_core::zoo::Model::new(&arch, seed).map_err(err)?;
        Ok(PyModel { inner })
    }

    /// A model of `arch` with weights read from a checkpoint file.
    #[staticmethod]
    #[pyo3(signature = (arch, classes, path))]
    fn load(arch: &str, classes: usize, path: PathBuf) -> PyResult<Self> {
        let arch = ArchSpec::named(arch, classes).map_err(err)?;
        let mut inner = csn_core::zoo::Model::zeroed(&arch).map_err(err)?;
        checkpoint::load_into(&mut inner, &path).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch.name.clone()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Names of the convolution layers in forward order.
    fn layer_names(&self) -> Vec<String> {
        self.inner.conv_layers().map(|l| l.name.clone()).collect()
    }

    /// Eval-mode logits, one row per clip.
    fn predict(&self, x: Vec<f32>, dims: [usize; 5]) -> PyResult<Vec<Vec<f32>>> {
        let logits = self.inner.predict(&tensor(x, dims)?).map_err(err)?;
        let k = logits.shape().c();
        Ok(logits.data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} params)", self.inner.arch.name, self.inner.param_count())
    }
}

/// Write a synthetic moving-squares dataset; returns the clip count.
#[pyfunction]
#[pyo3(signature = (out, classes = None, per_class = None, seed = None))]
fn gen_data(out: PathBuf, classes: Option<usize>, per_class: Option<usize>, seed: Option<u64>) -> PyResult<usize> {
    let mut task = SynthTaskSpec::default();
    task.num_classes = classes.unwrap_or(task.num_classes);
    task.clips_per_class = per_class.unwrap_or(task.clips_per_class);
    task.seed = seed.unwrap_or(task.seed);
    let clips = gen_dataset(&task).map_err(err)?;
    write_dataset(&out, &task, &clips).map_err(err)?;
    Ok(clips.len())
}

/// Train `arch` on a dataset directory and return `(model, history JSON)`.
/// `config` takes any `TrainConfig` field, e.g. `{"total_epochs": 2}`.
#[pyfunction]
#[pyo3(signature = (arch, data, held_out = None, config = None))]
fn train(py: Python<'_>, arch: &str, data: PathBuf, held_out: Option<PathBuf>, config: Option<&str>) -> PyResult<(PyModel, String)> {
    let cfg: TrainConfig = match config {
        Some(c) => serde_json::from_str(c).map_err(err)?,
        None => TrainConfig::default(),
    };
    let (manifest, videos) = read_dataset(&data).map_err(err)?;
    let held = held_out.map(|p| read_dataset(p).map(|d| d.1)).transpose().map_err(err)?;
    let arch = ArchSpec::named(arch, manifest.task.num_classes).map_err(err)?;
    let (model, history) = py
        .detach(|| {
            let mut model = csn_core::zoo::Model::new(&arch, cfg.seed)?;
            let history = run_training(&mut model, &videos, held.as_deref(), &SampleSpec::default(), &cfg)?;
            Ok::<_, csn_core::Error>((model, history))
        })
        .map_err(err)?;
    Ok((PyModel { inner: model }, history.to_json().map_err(err)?))
}

/// `(clip@1, video@1)` of a model on a dataset directory.
#[pyfunction]
#[pyo3(signature = (model, data, clips = 10))]
fn eval(model: &PyModel, data: PathBuf, clips: usize) -> PyResult<(f64, f64)> {
    let (_, videos) = read_dataset(&data).map_err(err)?;
    evaluate(&model.inner, &videos, &SampleSpec::default(), clips).map_err(err)
}

/// Finite-difference gradient checks: `scope` is `layers`, `blocks` or
/// `tiny-model`. Returns `(name, entries, max_rel_err, tolerance)` rows.
#[pyfunction]
#[pyo3(signature = (scope, seed = 0))]
fn gradcheck(scope: &str, seed: u64) -> PyResult<Vec<(String, usize, f64, f64)>> {
    let checks = match scope {
        "layers" => check_layers(seed),
        "blocks" => check_blocks(seed),
        "tiny-model" => check_tiny_model(seed).map(|c| vec![c]),
        _ => return Err(err(format!("scope `{scope}` is not layers, blocks or tiny-model"))),
    }
    .map_err(err)?;
    Ok(checks.into_iter().map(|c| (c.name, c.entries, c.max_rel_err, c.tolerance)).collect())
}

/// Render conv1 or a depthwise layer of a checkpoint; returns the resolved
/// layer name and a binary PGM/PPM image.
#[pyfunction]
#[pyo3(signature = (checkpoint, layer, scale = viz::DEFAULT_SCALE))]
fn render_filters<'py>(py: Python<'py>, checkpoint: PathBuf, layer: &str, scale: usize) -> PyResult<(String, Bound<'py, PyBytes>)> {
    let records = checkpoint::read_file(&checkpoint).map_err(err)?;
    let (name, image) = viz::render_layer(&records, layer, scale).map_err(err)?;
    Ok((name, PyBytes::new(py, &image.to_netpbm())))
}

#[pymodule]
pub fn csn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(arch_names, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(layer_stats, m)?)?;
    m.add_function(wrap_pyfunction!(conv3d, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(render_filters, m)?)?;
    Ok(())
}
