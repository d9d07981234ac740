//! Python bindings: configs, the ensemble model, metrics, synthetic data,
//! the gradient suite and whole experiments.
//!
//! Images cross the boundary as flat row-major float lists plus a batch
//! size; reports come back as plain dicts.

use fusionnet::checkpoint::Checkpoint;
use fusionnet::config::ExperimentConfig;
use fusionnet::data::{synth_dataset as synth, SynthSpec};
use fusionnet::gradcheck::{run_suite, Scope};
use fusionnet::metrics::{evaluate, metrics_named, ConfusionMatrix};
use fusionnet::train::fit;
use fusionnet::{build_ensemble, EnsembleConfig, EnsembleModel, Error, Module, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(fusionnet_py, FusionNetError, PyException);
create_exception!(fusionnet_py, CheckpointError, FusionNetError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Checkpoint(_) => CheckpointError::new_err(e.to_string()),
        _ => FusionNetError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?
        .call_method1("loads", (value.to_string(),))
}

#[pyclass(name = "EnsembleConfig", from_py_object)]
#[derive(Clone)]
struct PyEnsembleConfig {
    inner: EnsembleConfig,
}

#[pymethods]
impl PyEnsembleConfig {
    #[staticmethod]
    fn tiny() -> Self {
        Self {
            inner: EnsembleConfig::tiny(),
        }
    }

    #[staticmethod]
    fn full() -> Self {
        Self {
            inner: EnsembleConfig::full(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: EnsembleConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    #[getter]
    fn fused_dim(&self) -> usize {
        self.inner.fused_dim()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn get_freeze_backbones(&self) -> bool {
        self.inner.freeze_backbones
    }

    #[setter]
    fn set_freeze_backbones(&mut self, frozen: bool) {
        self.inner.freeze_backbones = frozen;
    }

    fn __repr__(&self) -> String {
        format!(
            "EnsembleConfig(input_size={}, fused_dim={}, seed={})",
            self.inner.input_size(),
            self.inner.fused_dim(),
            self.inner.seed
        )
    }
}

#[pyclass(name = "EnsembleModel")]
struct PyEnsembleModel {
    inner: EnsembleModel,
}

#[pymethods]
impl PyEnsembleModel {
    #[new]
    fn new(config: &PyEnsembleConfig) -> PyResult<Self> {
        Ok(Self {
            inner: build_ensemble(&config.inner).map_err(to_py)?,
        })
    }

    #[getter]
    fn config(&self) -> PyEnsembleConfig {
        PyEnsembleConfig {
            inner: self.inner.config().clone(),
        }
    }

    #[getter]
    fn branch_dims(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.inner.branch_dims();
        (a, b, c)
    }

    #[getter]
    fn fused_dim(&self) -> usize {
        self.inner.fused_dim()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn trainable_count(&self) -> usize {
        self.inner.trainable_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// `(shape, values)` of one parameter or buffer.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let mut found = None;
        self.inner.visit(&mut |p| {
            if p.name == name {
                found = Some((p.tensor.shape().to_vec(), p.tensor.data().to_vec()));
            }
        });
        found.ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))
    }

    /// Eval-mode class probabilities for `batch` images flattened `[b, 3, s, s]`.
    fn predict_proba(&mut self, images: Vec<f64>, batch: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = self.inner.input_size();
        let x = Tensor::new(vec![batch, 3, s, s], images).map_err(to_py)?;
        let probs = self.inner.predict_proba(&x).map_err(to_py)?;
        Ok(probs
            .data()
            .chunks(self.inner.num_classes())
            .map(<[f64]>::to_vec)
            .collect())
    }

    #[pyo3(signature = (path, metadata_json = None))]
    fn save(&self, path: &str, metadata_json: Option<&str>) -> PyResult<()> {
        let metadata = match metadata_json {
            Some(text) => {
                serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?
            }
            None => serde_json::json!({}),
        };
        Checkpoint::from_module(&self.inner, &self.inner.config().fingerprint(), metadata)
            .save(path.as_ref())
            .map_err(to_py)
    }

    /// Loads weights saved from a model of the same architecture.
    fn load(&mut self, path: &str) -> PyResult<()> {
        let fp = self.inner.config().fingerprint();
        Checkpoint::load(path.as_ref())
            .and_then(|c| c.apply(&mut self.inner, &fp))
            .map_err(to_py)
    }
}

/// Report for a `k × k` count matrix (rows true, columns predicted).
#[pyfunction]
#[pyo3(signature = (counts, positive_class = None, class_names = None))]
fn metrics<'py>(
    py: Python<'py>,
    counts: Vec<Vec<u64>>,
    positive_class: Option<usize>,
    class_names: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cm = ConfusionMatrix::from_counts(counts).map_err(to_py)?;
    let k = cm.num_classes();
    let names = class_names.unwrap_or_else(|| (0..k).map(|i| i.to_string()).collect());
    let report = metrics_named(&cm, positive_class.unwrap_or(k - 1), &names).map_err(to_py)?;
    json_to_py(
        py,
        &serde_json::to_value(&report).expect("report serializes"),
    )
}

/// `(images, labels)` with images flattened `[2n, 3, size, size]`.
#[pyfunction]
fn synth_dataset(n_per_class: usize, size: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let ds = synth(
        &SynthSpec {
            n_per_class,
            size,
            seed,
        },
        "train",
    )
    .map_err(to_py)?;
    let images = ds
        .samples()
        .iter()
        .flat_map(|s| s.image.data().to_vec())
        .collect();
    Ok((images, ds.labels()))
}

#[pyfunction]
#[pyo3(signature = (scope = "all", seed = 1))]
fn gradcheck<'py>(py: Python<'py>, scope: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let scope: Scope = scope.parse().map_err(to_py)?;
    let report = run_suite(scope, seed).map_err(to_py)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["passed"] = report.passed().into();
    json_to_py(py, &value)
}

/// Trains from an experiment config (JSON) in memory and returns the
/// curve, best epoch and validation report. Writes no files.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json)
        .and_then(|c| c.resolve())
        .map_err(to_py)?;
    let run = || -> fusionnet::Result<serde_json::Value> {
        let data = cfg.load_datasets()?;
        let mut model = build_ensemble(&cfg.ensemble()?)?;
        let record = fit(&mut model, &data.train, &data.val, &cfg.train)?;
        let (_, report) = evaluate(&mut model, &data.val, 32)?;
        Ok(serde_json::json!({
            "curve_csv": record.curve_csv(),
            "epochs": record.epochs,
            "best_epoch": record.best_epoch,
            "early_stopped": record.early_stopped,
            "val_metrics": report,
            "resolved_config": cfg,
        }))
    };
    json_to_py(py, &run().map_err(to_py)?)
}

#[pymodule]
fn fusionnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnsembleConfig>()?;
    m.add_class::<PyEnsembleModel>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("FusionNetError", m.py().get_type::<FusionNetError>())?;
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    Ok(())
}
