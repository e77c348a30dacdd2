//! Python bindings: prompt parsing, filtering, generation, training and
//! prediction. Structured values cross the boundary as Python dicts/lists
//! (converted through JSON).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::de::DeserializeOwned;
use serde::Serialize;

use air_core::backend::mock::MockEmbedder;
use air_core::backend::Backends;
use air_core::filter::FilterParams;
use air_core::manifest::{load_dataset, manifest_path, save_dataset};
use air_core::model::{ContextGrammar, DatasetManifest};
use air_core::pipeline::{NullEvents, PipelineConfig};
use air_core::prompt::{self, WeightedTerm};
use air_core::trainer::{MergeFraction, ModelArtifact, NullSink, TrainConfig};
use air_service::ops;

create_exception!(air_py, AirError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    AirError::new_err(e.to_string())
}

/// Python object -> Rust value through `json.dumps`. Strings are taken as JSON text.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(err)
}

fn opt_from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match obj {
        Some(o) if !o.is_none() => from_py(o),
        _ => Ok(T::default()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn backends(mock_sigma: Option<f64>) -> PyResult<Backends> {
    match mock_sigma {
        Some(s) => Ok(Backends::mock_with_sigma(s)),
        None => Backends::from_env().map_err(err),
    }
}

/// Parses a weighted prompt into `(term, weight)` pairs.
#[pyfunction]
fn parse_prompt(text: &str) -> PyResult<Vec<(String, f64)>> {
    let terms = prompt::parse_prompt(text).map_err(err)?;
    Ok(terms.into_iter().map(|t| (t.term, t.weight.value())).collect())
}

#[pyfunction]
fn serialize_prompt(terms: Vec<(String, f64)>) -> PyResult<String> {
    let terms = terms
        .into_iter()
        .map(|(t, w)| if w == 1.0 { Ok(WeightedTerm::plain(t)) } else { WeightedTerm::weighted(t, w) })
        .collect::<air_core::Result<Vec<_>>>()
        .map_err(err)?;
    prompt::serialize_prompt(&terms).map_err(err)
}

/// Every option combination of a grammar, leftmost context varying slowest.
#[pyfunction]
fn enumerate_combinations(grammar: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<String>>> {
    let grammar: ContextGrammar = from_py(grammar)?;
    grammar.validate().map_err(err)?;
    let combos = prompt::enumerate_combinations(&grammar).map_err(err)?;
    Ok(combos.iter().map(|c| c.options().map(str::to_string).collect()).collect())
}

#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    air_core::filter::cosine_similarity(&u, &v).map_err(err)
}

/// Deterministic embedder used by the mock backend bundle.
#[pyclass(name = "MockEmbedder")]
struct PyMockEmbedder(MockEmbedder);

#[pymethods]
impl PyMockEmbedder {
    #[new]
    #[pyo3(signature = (sigma = 0.05))]
    fn new(sigma: f64) -> Self {
        PyMockEmbedder(MockEmbedder::new(sigma))
    }

    fn embed_label(&self, label: &str, content: &[u8]) -> Vec<f32> {
        self.0.embed_label(label, content).values().to_vec()
    }
}

/// A dataset manifest loaded from disk.
#[pyclass(name = "Dataset")]
struct PyDataset {
    manifest: DatasetManifest,
    dir: PathBuf,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let manifest = load_dataset(&path).map_err(err)?;
        Ok(PyDataset { manifest, dir: path })
    }

    #[getter]
    fn dataset_id(&self) -> &str {
        &self.manifest.dataset_id
    }

    #[getter]
    fn name(&self) -> &str {
        &self.manifest.name
    }

    #[getter]
    fn revision(&self) -> u64 {
        self.manifest.revision as u64
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.manifest.classes.clone()
    }

    #[getter]
    fn path(&self) -> PathBuf {
        self.dir.clone()
    }

    fn __len__(&self) -> usize {
        self.manifest.images.len()
    }

    fn kept(&self) -> usize {
        self.manifest.kept_images().count()
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ops::DatasetSummary::of(&self.manifest))
    }

    /// The on-disk `manifest.json` as a dict (embeddings are stored separately).
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = std::fs::read_to_string(manifest_path(&self.dir)).map_err(err)?;
        py.import("json")?.call_method1("loads", (text,))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&self.manifest, &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(id={:?}, images={}, kept={})",
            self.manifest.dataset_id,
            self.manifest.images.len(),
            self.manifest.kept_images().count()
        )
    }
}

/// A trained linear probe.
#[pyclass(name = "Model")]
struct PyModel(ModelArtifact);

#[pymethods]
impl PyModel {
    /// Loads `model.json`, or the model directory containing it.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ops::load_model(&path).map(PyModel).map_err(err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.0.class_names.clone()
    }

    fn predict<'py>(&self, py: Python<'py>, embedding: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ops::predict_embedding(&self.0, &embedding).map_err(err)?)
    }

    #[pyo3(signature = (image, mock_sigma = None))]
    fn predict_image<'py>(&self, py: Python<'py>, image: &Bound<'py, PyBytes>, mock_sigma: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let b = backends(mock_sigma)?;
        to_py(py, &ops::predict_image(&self.0, &b, image.as_bytes()).map_err(err)?)
    }

    /// Metrics on the model's validation split of `dataset`, or on all kept images.
    #[pyo3(signature = (dataset, all = false))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: PathBuf, all: bool) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ops::evaluate_dir(&self.0, &dataset, all).map_err(err)?)
    }
}

/// Runs AIR-Gen. `config` is a pipeline-config dict; backends come from the
/// environment unless `mock_sigma` selects the mock bundle.
#[pyfunction]
#[pyo3(signature = (grammar, out_dir, config = None, mock_sigma = None))]
fn generate<'py>(
    py: Python<'py>,
    grammar: &Bound<'py, PyAny>,
    out_dir: PathBuf,
    config: Option<&Bound<'py, PyAny>>,
    mock_sigma: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let grammar: ContextGrammar = from_py(grammar)?;
    let config: PipelineConfig = opt_from_py(config)?;
    let b = backends(mock_sigma)?;
    let out = py
        .detach(|| ops::generate(&grammar, &config, &b, &NullEvents, None, &out_dir))
        .map_err(err)?;
    to_py(py, &out)
}

/// Runs AIR-Aug over the dataset in `source_dir`.
#[pyfunction]
#[pyo3(signature = (source_dir, out_dir, config = None, mock_sigma = None))]
fn augment<'py>(
    py: Python<'py>,
    source_dir: PathBuf,
    out_dir: PathBuf,
    config: Option<&Bound<'py, PyAny>>,
    mock_sigma: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: PipelineConfig = opt_from_py(config)?;
    let b = backends(mock_sigma)?;
    let out = py
        .detach(|| ops::augment(&source_dir, &config, &b, &NullEvents, None, &out_dir))
        .map_err(err)?;
    to_py(py, &out)
}

/// Filters a dataset directory; with `persist` the verdicts are written back.
#[pyfunction]
#[pyo3(signature = (dataset, beta = None, retention = None, alpha = None, per_class = true, persist = false))]
fn filter_dataset<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    beta: Option<f64>,
    retention: Option<f64>,
    alpha: Option<f64>,
    per_class: bool,
    persist: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let d = FilterParams::default();
    let params = FilterParams {
        beta: beta.unwrap_or(d.beta),
        retention_target: retention.unwrap_or(d.retention_target),
        alpha,
        per_class,
        ..d
    };
    params.validate().map_err(err)?;
    let report = py.detach(|| ops::filter_dir(&dataset, &params, persist)).map_err(err)?;
    to_py(py, &report)
}

/// Trains a linear probe and writes `model.json` / `metrics.json` to `out_dir`.
#[pyfunction]
#[pyo3(signature = (dataset, out_dir, config = None, augmented = None, fraction = None, folds = None))]
fn train<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    out_dir: PathBuf,
    config: Option<&Bound<'py, PyAny>>,
    augmented: Option<PathBuf>,
    fraction: Option<f64>,
    folds: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: TrainConfig = opt_from_py(config)?;
    config.validate().map_err(err)?;
    let merge_fraction = fraction.map(MergeFraction::from_f64).transpose().map_err(err)?;
    let request = ops::TrainRequest {
        config,
        folds,
        merge_fraction,
    };
    let metrics = py
        .detach(|| ops::train(&dataset, augmented.as_deref(), &request, &NullSink, &out_dir))
        .map_err(err)?;
    to_py(py, &metrics)
}

#[pymodule]
fn air_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AirError", m.py().get_type::<AirError>())?;
    m.add("DEFAULT_BETA", air_core::filter::DEFAULT_BETA)?;
    m.add_class::<PyMockEmbedder>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_combinations, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(filter_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
