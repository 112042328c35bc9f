//! Python bindings: configs, synthetic data, pretraining, the forgetting
//! engine and its metrics, and checkpoint IO.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gslora::checkpoint;
use gslora::config::ExperimentConfig;
use gslora::data::{self, Splits};
use gslora::engine::{self, ForgettingTask};
use gslora::lora::LoraSet;
use gslora::metrics::{self, MetricsRecord};
use gslora::model::{self, TransformerClassifier};
use gslora::objective;
use gslora::tensor::Tensor;

fn to_py(e: gslora::Error) -> PyErr {
    match e {
        gslora::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_user_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Experiment configuration parsed from TOML.
#[pyclass(name = "Config", module = "gslora_py")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    /// SHA-256 of the canonical TOML form.
    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.dataset.num_classes
    }

    #[getter]
    fn bnd(&self) -> f64 {
        self.inner.objective.bnd
    }

    #[getter]
    fn alpha_k(&self) -> f64 {
        self.inner.objective.alpha_k
    }

    #[setter]
    fn set_alpha_k(&mut self, value: f64) {
        self.inner.objective.alpha_k = value;
    }

    #[getter]
    fn warmup_epochs(&self) -> usize {
        self.inner.objective.warmup_epochs
    }

    #[setter]
    fn set_warmup_epochs(&mut self, value: usize) {
        self.inner.objective.warmup_epochs = value;
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.lora.rank
    }

    #[setter]
    fn set_rank(&mut self, value: usize) {
        self.inner.lora.rank = value;
    }

    #[getter]
    fn forget_epochs(&self) -> usize {
        self.inner.forget.epochs
    }

    #[setter]
    fn set_forget_epochs(&mut self, value: usize) {
        self.inner.forget.epochs = value;
    }

    /// Forget-class lists of the scheduled tasks.
    #[getter]
    fn tasks(&self) -> Vec<Vec<usize>> {
        self.inner.tasks.iter().map(|t| t.forget.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(classes={}, rank={}, bnd={:.4}, alpha_k={}, tasks={:?})",
            self.inner.dataset.num_classes,
            self.inner.lora.rank,
            self.inner.objective.bnd,
            self.inner.objective.alpha_k,
            self.tasks()
        )
    }
}

/// Train and test splits of the synthetic dataset.
#[pyclass(name = "Splits", module = "gslora_py", frozen)]
struct PySplits {
    inner: Splits,
}

#[pymethods]
impl PySplits {
    #[getter]
    fn train_len(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.inner.test.len()
    }

    fn train_labels(&self) -> Vec<usize> {
        self.inner.train.labels().to_vec()
    }

    fn test_labels(&self) -> Vec<usize> {
        self.inner.test.labels().to_vec()
    }
}

#[pyfunction]
fn generate_dataset(config: &PyConfig) -> PyResult<PySplits> {
    data::generate_dataset(&config.inner.dataset).map(|inner| PySplits { inner }).map_err(to_py)
}

/// Frozen base classifier.
#[pyclass(name = "Model", module = "gslora_py", frozen)]
struct PyModel {
    inner: TransformerClassifier,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(config: &PyConfig, path: PathBuf) -> PyResult<Self> {
        let tensors = checkpoint::load_checkpoint(&path).map_err(to_py)?;
        TransformerClassifier::from_named(config.inner.model_config(), &tensors)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&path, &self.inner.named_tensors()).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Test-split accuracy (percent) on `classes`, or on all classes.
    #[pyo3(signature = (splits, classes=None, split="test"))]
    fn accuracy(&self, splits: &PySplits, classes: Option<Vec<usize>>, split: &str) -> PyResult<f64> {
        accuracy_of(&self.inner, None, splits, classes, split)
    }
}

fn accuracy_of(
    model: &TransformerClassifier,
    lora: Option<&LoraSet>,
    splits: &PySplits,
    classes: Option<Vec<usize>>,
    split: &str,
) -> PyResult<f64> {
    let data = match split {
        "train" => &splits.inner.train,
        "test" => &splits.inner.test,
        other => return Err(PyValueError::new_err(format!("split must be 'train' or 'test', got {other:?}"))),
    };
    let classes = classes.unwrap_or_else(|| (0..model.config().num_classes).collect());
    metrics::accuracy(model, lora, data, &classes).map_err(to_py)
}

#[pyfunction]
fn pretrain(py: Python<'_>, config: &PyConfig, splits: &PySplits) -> PyResult<PyModel> {
    let cfg = &config.inner;
    let data = &splits.inner.train;
    py.detach(|| {
        model::pretrain(&cfg.model_config(), data, &cfg.pretrain.optimizer(), cfg.pretrain.dropout, cfg.seed)
    })
    .map(|inner| PyModel { inner })
    .map_err(to_py)
}

/// Metrics of one forgetting task.
#[pyclass(name = "Record", module = "gslora_py", frozen, get_all)]
struct PyRecord {
    task: u32,
    acc_r: f64,
    acc_f: f64,
    acc_o: Option<f64>,
    drop: f64,
    h_mean: f64,
    zero_group_ratio: f64,
    tunable_ratio: f64,
}

impl From<&MetricsRecord> for PyRecord {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            task: r.task,
            acc_r: r.acc_r,
            acc_f: r.acc_f,
            acc_o: r.acc_o,
            drop: r.drop,
            h_mean: r.h_mean,
            zero_group_ratio: r.zero_group_ratio,
            tunable_ratio: r.tunable_ratio,
        }
    }
}

#[pymethods]
impl PyRecord {
    fn as_dict(&self) -> BTreeMap<&'static str, Option<f64>> {
        BTreeMap::from([
            ("task", Some(f64::from(self.task))),
            ("acc_r", Some(self.acc_r)),
            ("acc_f", Some(self.acc_f)),
            ("acc_o", self.acc_o),
            ("drop", Some(self.drop)),
            ("h_mean", Some(self.h_mean)),
            ("zero_group_ratio", Some(self.zero_group_ratio)),
            ("tunable_ratio", Some(self.tunable_ratio)),
        ])
    }

    fn __repr__(&self) -> String {
        format!(
            "Record(task={}, acc_r={:.2}, acc_f={:.2}, acc_o={}, h_mean={:.2}, zero_group_ratio={:.3})",
            self.task,
            self.acc_r,
            self.acc_f,
            self.acc_o.map_or("None".to_string(), |o| format!("{o:.2}")),
            self.h_mean,
            self.zero_group_ratio
        )
    }
}

/// Sequential forgetting on top of a frozen base model.
#[pyclass(name = "Engine", module = "gslora_py")]
struct PyEngine {
    inner: engine::Engine,
    last_adapters: Option<LoraSet>,
}

#[pymethods]
impl PyEngine {
    #[new]
    fn new(model: &PyModel, config: &PyConfig) -> PyResult<Self> {
        let inner = engine::Engine::new(model.inner.clone(), config.inner.engine_config()).map_err(to_py)?;
        Ok(Self {
            inner,
            last_adapters: None,
        })
    }

    /// Forgets `classes`; returns the task's metrics.
    #[pyo3(signature = (splits, classes, data_ratio=0.1, epochs=None))]
    fn run_task(
        &mut self,
        py: Python<'_>,
        splits: &PySplits,
        classes: Vec<usize>,
        data_ratio: f64,
        epochs: Option<usize>,
    ) -> PyResult<PyRecord> {
        let task = ForgettingTask {
            data_ratio,
            epochs,
            ..ForgettingTask::new(classes)
        };
        let engine = &mut self.inner;
        let data = &splits.inner;
        let outcome = py.detach(|| engine.run_task(data, &task)).map_err(to_py)?;
        let rec = PyRecord::from(&outcome.record);
        self.last_adapters = Some(outcome.adapters);
        Ok(rec)
    }

    /// Runs every task scheduled in `config`.
    fn run_schedule(&mut self, py: Python<'_>, splits: &PySplits, config: &PyConfig) -> PyResult<Vec<PyRecord>> {
        let mut out = Vec::new();
        for task in &config.inner.tasks {
            let engine = &mut self.inner;
            let data = &splits.inner;
            let outcome = py.detach(|| engine.run_task(data, task)).map_err(to_py)?;
            out.push(PyRecord::from(&outcome.record));
            self.last_adapters = Some(outcome.adapters);
        }
        Ok(out)
    }

    fn records(&self) -> Vec<PyRecord> {
        self.inner.records().iter().map(PyRecord::from).collect()
    }

    fn forgotten(&self) -> Vec<Vec<usize>> {
        self.inner.forgotten().to_vec()
    }

    /// Accuracy of the base model with all merged adapters.
    #[pyo3(signature = (splits, classes=None, split="test"))]
    fn accuracy(&self, splits: &PySplits, classes: Option<Vec<usize>>, split: &str) -> PyResult<f64> {
        accuracy_of(self.inner.model(), Some(self.inner.lora()), splits, classes, split)
    }

    /// Group norms of the most recent task's adapters, before merging.
    fn last_group_norms(&self) -> Vec<f64> {
        self.last_adapters.as_ref().map(LoraSet::group_norms).unwrap_or_default()
    }

    fn save_last_adapters(&self, path: PathBuf) -> PyResult<()> {
        let set = self
            .last_adapters
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("no task has been run yet"))?;
        checkpoint::save_checkpoint(&path, &set.named_tensors()).map_err(to_py)
    }

    fn write_metrics(&self, path: PathBuf) -> PyResult<()> {
        metrics::save_csv(&path, self.inner.records()).map_err(to_py)
    }

    fn base_fingerprint(&self) -> String {
        self.inner.model().fingerprint()
    }
}

#[pyfunction]
fn h_mean(acc_r: f64, drop: f64) -> f64 {
    metrics::h_mean(acc_r, drop)
}

#[pyfunction]
fn alpha_schedule(epoch: usize, warmup: usize, alpha_k: f64) -> f64 {
    objective::alpha_schedule(epoch, warmup, alpha_k)
}

#[pyfunction]
fn default_bnd(num_classes: usize) -> f64 {
    objective::default_bnd(num_classes)
}

/// Reads a checkpoint as `{name: (shape, values)}`.
#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let tensors = checkpoint::load_checkpoint(&path).map_err(to_py)?;
    Ok(tensors
        .into_iter()
        .map(|(n, t)| (n, (t.shape().to_vec(), t.into_data())))
        .collect())
}

/// Writes `{name: (shape, values)}` as a checkpoint.
#[pyfunction]
fn save_checkpoint(path: PathBuf, tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> PyResult<()> {
    let named = tensors
        .into_iter()
        .map(|(n, (shape, values))| Tensor::new(shape, values).map(|t| (n, t)))
        .collect::<gslora::Result<Vec<_>>>()
        .map_err(to_py)?;
    checkpoint::save_checkpoint(&path, &named).map_err(to_py)
}

#[pymodule]
pub fn gslora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySplits>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRecord>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(h_mean, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(default_bnd, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(save_checkpoint, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
