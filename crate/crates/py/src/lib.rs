//! Python module `vnetseg`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vnetseg::data::{self, PhantomConfig, VolumeData};
use vnetseg::diffcore::{DiffTensor, Tape};
use vnetseg::losses::{self, TverskyParams};
use vnetseg::metrics::{self, Averaging, EvalReport};
use vnetseg::optim::{AmsgradConfig, OptimizerState};
use vnetseg::postproc::{self, Connectivity, PostprocConfig};
use vnetseg::vnet::{self, NamedParam, NetworkConfig, NetworkParameters};
use vnetseg::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn connectivity(n: u32) -> PyResult<Connectivity> {
    Connectivity::try_from(n).map_err(py_err)
}

/// A 3D volume, x fastest. Masks hold 0/1 bytes, gray volumes float32.
#[pyclass(name = "Volume", module = "vnetseg")]
#[derive(Clone)]
pub struct PyVolume {
    inner: data::Volume,
}

#[pymethods]
impl PyVolume {
    #[staticmethod]
    #[pyo3(signature = (dims, voxels, spacing = [1.0, 1.0, 1.0]))]
    fn mask(dims: [usize; 3], voxels: Vec<u8>, spacing: [f32; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: data::Volume::mask(dims, spacing, voxels).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (dims, voxels, spacing = [1.0, 1.0, 1.0]))]
    fn gray(dims: [usize; 3], voxels: Vec<f32>, spacing: [f32; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: data::Volume::gray(dims, spacing, voxels).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::read_volume(path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        data::write_volume(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f32; 3] {
        self.inner.spacing()
    }

    /// "mask_u8" or "gray_f32".
    #[getter]
    fn dtype(&self) -> &'static str {
        match self.inner.data() {
            VolumeData::Mask(_) => "mask_u8",
            VolumeData::Gray(_) => "gray_f32",
        }
    }

    fn voxels(&self) -> Vec<f32> {
        (0..self.inner.len()).map(|i| self.inner.value(i)).collect()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    #[staticmethod]
    fn from_bytes(bytes: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: data::Volume::from_bytes(&bytes).map_err(py_err)?,
        })
    }

    fn count_positive(&self) -> usize {
        self.inner.count_positive()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(dims={:?}, dtype={})",
            self.inner.dims(),
            self.dtype()
        )
    }
}

fn wrap(v: data::Volume) -> PyVolume {
    PyVolume { inner: v }
}

/// Synthetic joint phantom. Returns `(image, truth, distractors)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, dims = [64, 64, 64], distractors = 20, noise_sigma = 0.05))]
fn generate_phantom(
    seed: u64,
    dims: [usize; 3],
    distractors: usize,
    noise_sigma: f64,
) -> PyResult<(PyVolume, PyVolume, PyVolume)> {
    let p = data::generate_phantom(&PhantomConfig {
        seed,
        dims,
        distractor_count: distractors,
        noise_sigma,
        ..Default::default()
    })
    .map_err(py_err)?;
    Ok((wrap(p.image), wrap(p.truth), wrap(p.distractors)))
}

/// Labels foreground components. Returns `(labels, [(label, size), ...])`
/// with sizes largest first.
#[pyfunction]
#[pyo3(signature = (mask, connectivity = 26))]
fn label_components(mask: &PyVolume, connectivity: u32) -> PyResult<(Vec<u32>, Vec<(u32, usize)>)> {
    let set = postproc::label_components(&mask.inner, self::connectivity(connectivity)?)
        .map_err(py_err)?;
    Ok((set.labels().to_vec(), set.sizes().to_vec()))
}

/// Keeps the `keep` largest components of a mask, or of a probability map
/// thresholded at `threshold`.
#[pyfunction]
#[pyo3(signature = (volume, keep = 2, connectivity = 26, threshold = 0.5, labels = None))]
fn postprocess(
    volume: &PyVolume,
    keep: usize,
    connectivity: u32,
    threshold: f32,
    labels: Option<Vec<u32>>,
) -> PyResult<PyVolume> {
    let cfg = PostprocConfig {
        keep,
        connectivity: self::connectivity(connectivity)?,
        threshold,
        select_labels: labels,
    };
    postproc::postprocess(&volume.inner, &cfg)
        .map(wrap)
        .map_err(py_err)
}

#[pyfunction]
fn binarize(prob: &PyVolume, threshold: f32) -> PyResult<PyVolume> {
    postproc::binarize(&prob.inner, threshold)
        .map(wrap)
        .map_err(py_err)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tp", r.counts.tp)?;
    d.set_item("fp", r.counts.fp)?;
    d.set_item("fn", r.counts.fn_)?;
    d.set_item("tn", r.counts.tn)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("dice", r.dice)?;
    Ok(d)
}

/// Confusion counts and metrics; undefined metrics are `None`.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: &PyVolume,
    truth: &PyVolume,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&pred.inner, &truth.inner).map_err(py_err)?;
    report_dict(py, &r)
}

/// Macro or micro average over `(pred, truth)` pairs.
#[pyfunction]
#[pyo3(signature = (pairs, mode = "macro"))]
fn evaluate_many<'py>(
    py: Python<'py>,
    pairs: Vec<(PyVolume, PyVolume)>,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "macro" => Averaging::Macro,
        "micro" => Averaging::Micro,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown averaging {other:?}"
            )))
        }
    };
    let reports = pairs
        .iter()
        .map(|(p, t)| metrics::evaluate(&p.inner, &t.inner))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    report_dict(py, &metrics::aggregate(&reports, mode).map_err(py_err)?)
}

/// Tversky index of a soft prediction against a binary truth.
#[pyfunction]
#[pyo3(signature = (pred, truth, alpha = 0.4, beta = 0.6, epsilon = 1e-6))]
fn tversky_index(
    pred: Vec<f64>,
    truth: Vec<f64>,
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> PyResult<f64> {
    let params = TverskyParams::new(alpha, beta, epsilon).map_err(py_err)?;
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(vec![pred.len()], pred).map_err(py_err)?;
    let g = tape.constant(vec![truth.len()], truth).map_err(py_err)?;
    let t = losses::tversky_index(&mut tape, p, g, &params).map_err(py_err)?;
    Ok(tape.value(t)[0])
}

/// Origins of the disjoint tiles covering `dims`.
#[pyfunction]
fn tile_origins(dims: [usize; 3], patch_size: usize) -> PyResult<Vec<[usize; 3]>> {
    Ok(data::tile_volume(dims, patch_size)
        .map_err(py_err)?
        .into_iter()
        .map(|s| s.origin)
        .collect())
}

/// AMSGrad over a flat parameter vector.
#[pyclass(name = "Amsgrad", module = "vnetseg")]
pub struct PyAmsgrad {
    state: OptimizerState<f64>,
    params: Vec<NamedParam<f64>>,
}

#[pymethods]
impl PyAmsgrad {
    #[new]
    #[pyo3(signature = (params, learning_rate = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8))]
    fn new(
        params: Vec<f64>,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> PyResult<Self> {
        let state = OptimizerState::new(AmsgradConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        })
        .map_err(py_err)?;
        let n = params.len();
        let tensor = DiffTensor::new(vec![n], params)
            .map_err(py_err)?
            .with_grad();
        Ok(Self {
            state,
            params: vec![NamedParam {
                name: "params".into(),
                tensor,
            }],
        })
    }

    /// Applies one update with `grad` and returns the new parameters.
    fn step(&mut self, grad: Vec<f64>) -> PyResult<Vec<f64>> {
        let t = &mut self.params[0].tensor;
        t.zero_grad();
        t.accumulate_grad(&grad).map_err(py_err)?;
        self.state.step(&mut self.params).map_err(py_err)?;
        Ok(self.params[0].tensor.values().to_vec())
    }

    #[getter]
    fn v_hat(&self) -> Vec<f64> {
        self.state
            .moments
            .first()
            .map_or_else(Vec::new, |m| m.v_hat.clone())
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.state.step_count
    }
}

/// A V-Net, either freshly initialised or loaded from a checkpoint.
#[pyclass(name = "Network", module = "vnetseg")]
pub struct PyNetwork {
    inner: NetworkParameters<f32>,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (seed = 0, stages = 3, base_channels = 8, convs_per_stage = 2, kernel_size = 3, dropout_rate = 0.6, patch_size = 32))]
    fn new(
        seed: u64,
        stages: usize,
        base_channels: usize,
        convs_per_stage: usize,
        kernel_size: usize,
        dropout_rate: f64,
        patch_size: usize,
    ) -> PyResult<Self> {
        let config = NetworkConfig {
            stages,
            base_channels,
            convs_per_stage,
            kernel_size,
            dropout_rate,
            input_patch_size: patch_size,
        };
        let inner = NetworkParameters::build(config, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: vnet::read_checkpoint(path).map_err(py_err)?.params,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.config().input_patch_size
    }

    /// Probability map for a whole gray volume, tile by tile.
    fn predict(&self, image: &PyVolume) -> PyResult<PyVolume> {
        vnetseg::cli::predict_volume(&self.inner, &image.inner)
            .map(wrap)
            .map_err(py_err)
    }
}

/// Runs the command-line interface with `args` (without the program name).
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<()> {
    let argv = std::iter::once("vnetseg".to_string()).chain(args);
    vnetseg::cli::run(argv).map_err(|e| PyValueError::new_err(vnetseg::cli::diagnostic(&e)))
}

#[pymodule]
#[pyo3(name = "vnetseg")]
fn vnetseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyAmsgrad>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(label_components, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_many, m)?)?;
    m.add_function(wrap_pyfunction!(tversky_index, m)?)?;
    m.add_function(wrap_pyfunction!(tile_origins, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
