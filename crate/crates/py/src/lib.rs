//! Python bindings: configs, probability maps and masks, the losses and
//! pseudo-labelling, batch schedules, training, evaluation and prediction.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fixmatchseg::data::{self, load_dataset, semi_supervised_pools, write_corpus, DatasetSpec, SplitPlan};
use fixmatchseg::losses::SegLoss;
use fixmatchseg::trainer::{init_model, FitOptions, TrainData};
use fixmatchseg::{pseudolabel, Checkpoint, Error, Image, TrainMode};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_mode(mode: &str) -> PyResult<TrainMode> {
    mode.parse().map_err(err)
}

#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    inner: fixmatchseg::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// `"reference"` (320x320) or `"desk"` (96x96, small network).
    #[new]
    #[pyo3(signature = (preset = "reference"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "reference" => fixmatchseg::TrainConfig::default(),
            "desk" => fixmatchseg::TrainConfig::desk(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: fixmatchseg::TrainConfig::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Problems found by validation; empty when the config is usable.
    fn validate(&self) -> Vec<String> {
        fixmatchseg::validate_config(&self.inner)
    }

    /// Copy with input size and size-dependent knobs rescaled.
    fn scaled_to(&self, height: usize, width: usize) -> Self {
        Self {
            inner: self.inner.clone().scaled_to((height, width)),
        }
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn mu(&self) -> usize {
        self.inner.mu
    }
    #[setter]
    fn set_mu(&mut self, v: usize) {
        self.inner.mu = v;
    }
    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }
    #[setter]
    fn set_tau(&mut self, v: f64) {
        self.inner.tau = v;
    }
    #[getter]
    fn lambda_u(&self) -> f64 {
        self.inner.lambda_u
    }
    #[setter]
    fn set_lambda_u(&mut self, v: f64) {
        self.inner.lambda_u = v;
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    #[getter]
    fn max_epochs(&self) -> usize {
        self.inner.max_epochs
    }
    #[setter]
    fn set_max_epochs(&mut self, v: usize) {
        self.inner.max_epochs = v;
    }
    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }
    #[setter]
    fn set_num_classes(&mut self, v: usize) {
        self.inner.num_classes = v;
    }
    #[getter]
    fn resize_hw(&self) -> (usize, usize) {
        self.inner.resize_hw
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(resize_hw={:?}, num_classes={}, mu={}, tau={}, lambda_u={}, seed={})",
            self.inner.resize_hw, self.inner.num_classes, self.inner.mu, self.inner.tau, self.inner.lambda_u, self.inner.seed
        )
    }
}

/// Class probabilities, planar `[class][y][x]`.
#[pyclass(name = "ProbMap", from_py_object)]
#[derive(Clone)]
pub struct PyProbMap {
    inner: fixmatchseg::ProbMap,
}

#[pymethods]
impl PyProbMap {
    #[new]
    fn new(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: fixmatchseg::ProbMap::new(height, width, num_classes, probs).map_err(err)?,
        })
    }

    /// Softmax over classes of planar logits.
    #[staticmethod]
    fn from_logits(height: usize, width: usize, num_classes: usize, logits: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: fixmatchseg::ProbMap::from_logits(height, width, num_classes, &logits).map_err(err)?,
        })
    }

    /// `(height, width, num_classes)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.inner.hw();
        (h, w, self.inner.num_classes())
    }

    fn probs(&self) -> Vec<f64> {
        self.inner.probs().to_vec()
    }

    fn argmax(&self) -> PyMaskMap {
        PyMaskMap {
            inner: pseudolabel::pseudo_mask(&self.inner),
        }
    }
}

/// Integer class labels, row-major.
#[pyclass(name = "MaskMap", from_py_object)]
#[derive(Clone)]
pub struct PyMaskMap {
    inner: fixmatchseg::MaskMap,
}

#[pymethods]
impl PyMaskMap {
    #[new]
    fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: fixmatchseg::MaskMap::new(height, width, num_classes, labels).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.inner.hw();
        (h, w, self.inner.num_classes())
    }

    fn labels(&self) -> Vec<u32> {
        self.inner.labels().iter().map(|v| u32::from(*v)).collect()
    }

    fn to_prob_map(&self) -> PyProbMap {
        PyProbMap {
            inner: self.inner.to_prob_map(),
        }
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn seg_loss(config: Option<&PyTrainConfig>) -> SegLoss {
    SegLoss::new(&config.map(|c| c.inner.clone()).unwrap_or_default().loss)
}

/// Soft Dice loss.
#[pyfunction]
#[pyo3(signature = (pred, target, config = None))]
fn dice_loss(pred: &PyProbMap, target: &PyMaskMap, config: Option<&PyTrainConfig>) -> PyResult<f64> {
    seg_loss(config).dice(&pred.inner, &target.inner).map_err(err)
}

/// Boundary loss.
#[pyfunction]
#[pyo3(signature = (pred, target, config = None))]
fn boundary_loss(pred: &PyProbMap, target: &PyMaskMap, config: Option<&PyTrainConfig>) -> PyResult<f64> {
    seg_loss(config).boundary(&pred.inner, &target.inner).map_err(err)
}

/// Dice plus boundary loss and its gradient with respect to the probabilities.
#[pyfunction]
#[pyo3(signature = (pred, target, config = None))]
fn combined_loss_with_grad(
    pred: &PyProbMap,
    target: &PyMaskMap,
    config: Option<&PyTrainConfig>,
) -> PyResult<(f64, Vec<f64>)> {
    seg_loss(config).combined_with_grad(&pred.inner, &target.inner).map_err(err)
}

/// Hard-mask Dice for one class.
#[pyfunction]
fn dice_score(pred: &PyMaskMap, target: &PyMaskMap, class_id: usize) -> PyResult<f64> {
    fixmatchseg::dice_score(&pred.inner, &target.inner, class_id).map_err(err)
}

/// `(mask, confidence, accepted)` for a weak-view prediction.
#[pyfunction]
fn make_pseudolabel(pred: &PyProbMap, tau: f64) -> (PyMaskMap, f64, bool) {
    let pl = pseudolabel::make_pseudolabel(&pred.inner, tau);
    (PyMaskMap { inner: pl.label_mask }, pl.confidence, pl.accepted)
}

/// Batches of one epoch as `(labeled_indices, unlabeled_indices)` pairs.
#[pyfunction]
fn epoch_schedule(
    n_labeled: usize,
    n_unlabeled: usize,
    mu: usize,
    b: usize,
    seed: u64,
    epoch: usize,
) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    Ok(data::epoch_schedule(n_labeled, n_unlabeled, mu, b, seed, epoch)
        .map_err(err)?
        .into_iter()
        .map(|b| (b.labeled, b.unlabeled))
        .collect())
}

/// Writes a synthetic shapes corpus in the dataset layout.
#[pyfunction]
#[pyo3(signature = (out_dir, n, size = 96, num_classes = 3, seed = 0, noise = 0.1, counts = None))]
fn synth(
    out_dir: PathBuf,
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    noise: f64,
    counts: Option<(usize, usize, usize)>,
) -> PyResult<()> {
    let samples = data::make_synthetic_corpus(n, (size, size), num_classes, seed, noise).map_err(err)?;
    let split = match counts {
        Some((train, val, test)) => SplitPlan::Counts { train, val, test },
        None => SplitPlan::default(),
    };
    write_corpus(&out_dir, &samples, num_classes, split).map_err(err)?;
    Ok(())
}

fn open(data_dir: &PathBuf, config: &PyTrainConfig) -> PyResult<data::Pools> {
    let spec = DatasetSpec::open(data_dir, config.inner.num_classes).map_err(err)?;
    load_dataset(&spec, &config.inner).map_err(err)
}

/// Trains on a dataset directory and returns `{"history": [...],
/// "stop_reason": ..., "best_epoch": ..., "test": report-or-None}`.
/// Checkpoints and history go to `run_dir` when given.
#[pyfunction]
#[pyo3(signature = (data_dir, config, mode = "fixmatchseg", labeled_count = None, run_dir = None))]
fn train<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    config: &PyTrainConfig,
    mode: &str,
    labeled_count: Option<usize>,
    run_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone().validated().map_err(err)?;
    let mode = parse_mode(mode)?;
    let pools = open(&data_dir, config)?;
    let (labeled, unlabeled) = match labeled_count {
        Some(n) => semi_supervised_pools(&pools.train, n, &pools.unlabeled, cfg.seed),
        None => (pools.train.clone(), pools.unlabeled.clone()),
    };
    let channels = labeled
        .first()
        .map(|s| s.image.channels())
        .ok_or_else(|| PyValueError::new_err("no labeled training images"))?;
    let result = py
        .detach(|| {
            let model = init_model(&cfg, channels)?;
            let data = TrainData {
                labeled: &labeled,
                unlabeled: &unlabeled,
                val: &pools.val,
            };
            let opts = FitOptions {
                run_dir,
                ..Default::default()
            };
            let res = fixmatchseg::fit(model, &data, &cfg, mode, opts)?;
            let test = if pools.test.is_empty() {
                None
            } else {
                Some(fixmatchseg::evaluate(&res.best_model()?, &pools.test, &cfg)?)
            };
            Ok::<_, Error>((res, test))
        })
        .map_err(err)?;
    let (res, test) = result;
    let out = PyDict::new(py);
    out.set_item("history", to_py(py, &res.history)?)?;
    out.set_item("stop_reason", to_py(py, &res.stop_reason)?)?;
    out.set_item("best_epoch", res.best_epoch())?;
    out.set_item("test", to_py(py, &test)?)?;
    Ok(out)
}

/// A trained network loaded from a checkpoint.
#[pyclass(name = "Model")]
pub struct PyModel {
    model: fixmatchseg::Model,
    config: fixmatchseg::TrainConfig,
}

#[pymethods]
impl PyModel {
    /// Best-validation parameters unless `last` is set.
    #[staticmethod]
    #[pyo3(signature = (path, last = false))]
    fn load(path: PathBuf, last: bool) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        let model = if last { ck.model() } else { ck.best_model() }.map_err(err)?;
        Ok(Self {
            model,
            config: ck.config().clone(),
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.config.clone(),
        }
    }

    /// Class probabilities for a planar `[channel][y][x]` image in `[0, 1]`.
    fn predict(&self, py: Python<'_>, height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> PyResult<PyProbMap> {
        let image = Image::new(height, width, channels, pixels).map_err(err)?;
        let inner = py.detach(|| self.model.predict_one(&image)).map_err(err)?;
        Ok(PyProbMap { inner })
    }

    /// Metrics report on one split (`"train"`, `"val"` or `"test"`) of a dataset.
    #[pyo3(signature = (data_dir, split = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let pools = open(&data_dir, &PyTrainConfig { inner: self.config.clone() })?;
        let samples = match split {
            "train" => &pools.train,
            "val" => &pools.val,
            "test" => &pools.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let report = py.detach(|| fixmatchseg::evaluate(&self.model, samples, &self.config)).map_err(err)?;
        to_py(py, &report)
    }
}

#[pymodule]
#[pyo3(name = "fixmatchseg")]
pub fn fixmatchseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyProbMap>()?;
    m.add_class::<PyMaskMap>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss_with_grad, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(make_pseudolabel, m)?)?;
    m.add_function(wrap_pyfunction!(epoch_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
