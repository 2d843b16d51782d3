//! Python bindings: datasets, configs, training, retrieval evaluation and
//! the standalone losses.

use std::path::PathBuf;

use irra_kit::data::{generate_synthetic as gen_synthetic, Dataset, Split, SyntheticConfig};
use irra_kit::losses::{infonce_loss, sdm_loss as sdm, SdmConfig};
use irra_kit::metrics::evaluate;
use irra_kit::model::IrraModel;
use irra_kit::tensor::{Tape, Tensor};
use irra_kit::train::{train_run, TrainConfig};
use irra_kit::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Parse(_) | Error::Config(_) | Error::Shape { .. } | Error::Index { .. } | Error::Contract(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn parse_split(split: &str) -> PyResult<Split> {
    split.parse().map_err(py_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows_of(t: &Tensor) -> PyResult<Vec<Vec<f64>>> {
    let (r, _) = t.dims2().map_err(py_err)?;
    Ok((0..r).map(|i| t.row(i).to_vec()).collect())
}

#[pyclass(name = "Dataset", module = "irra_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    /// Number of records in `split`.
    fn count(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split(parse_split(split)?).len())
    }

    /// `(identity, caption)` for every caption in `split`.
    fn captions(&self, split: &str) -> PyResult<Vec<(usize, String)>> {
        Ok(self
            .inner
            .split(parse_split(split)?)
            .into_iter()
            .flat_map(|r| r.captions.iter().map(move |c| (r.identity_id, c.clone())))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(records={})", self.inner.records.len())
    }
}

#[pyfunction]
#[pyo3(signature = (num_identities, images_per_id, captions_per_image, seed))]
fn generate_synthetic(num_identities: usize, images_per_id: usize, captions_per_image: usize, seed: u64) -> PyResult<PyDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inner, _) = gen_synthetic(num_identities, images_per_id, captions_per_image, &mut rng, &SyntheticConfig::default())
        .map_err(py_err)?;
    Ok(PyDataset { inner })
}

#[pyclass(name = "TrainConfig", module = "irra_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => TrainConfig::from_toml_str(text).map_err(py_err)?,
            None => TrainConfig::toy(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn paper() -> Self {
        Self {
            inner: TrainConfig::paper(),
        }
    }

    /// Returns a copy with `key=value` overrides applied, e.g.
    /// `cfg.with_overrides(["epochs=2", "loss.irr=false"])`.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_overrides(&overrides).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
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
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.epochs = epochs;
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(seed={}, epochs={})", self.inner.seed, self.inner.epochs)
    }
}

#[pyclass(name = "Model", module = "irra_py")]
pub struct PyModel {
    inner: IrraModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: IrraModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Retrieval report for `split` as a dict.
    #[pyo3(signature = (dataset, split="val"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.evaluate_split(&dataset.inner, parse_split(split)?).map_err(py_err)?;
        json_to_py(py, &to_json(&report.summary())?)
    }

    /// `(similarity rows, query identities, gallery identities)` for `split`.
    #[pyo3(signature = (dataset, split="val"))]
    fn similarity(&self, dataset: &PyDataset, split: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
        let t = self.inner.split_similarity(&dataset.inner, parse_split(split)?).map_err(py_err)?;
        Ok((rows_of(&t.sim)?, t.query_ids, t.gallery_ids))
    }

    /// Global text embeddings, one row per caption.
    fn encode_texts(&self, captions: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let ids = captions.iter().map(|c| self.inner.tokenize(c)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
        rows_of(&self.inner.encode_texts(&ids).map_err(py_err)?)
    }

    #[getter]
    fn fusion_calls(&self) -> usize {
        self.inner.fusion_calls()
    }

    fn param_counts(&self) -> std::collections::BTreeMap<String, usize> {
        self.inner.param_counts()
    }
}

/// Trains a fresh model; returns the model and the run log as JSON lines.
#[pyfunction]
fn train(py: Python<'_>, dataset: &PyDataset, config: &PyTrainConfig) -> PyResult<(PyModel, String)> {
    let (ds, cfg) = (dataset.inner.clone(), config.inner.clone());
    let out = py.detach(move || train_run(&ds, &cfg)).map_err(py_err)?;
    Ok((PyModel { inner: out.model }, out.log.to_jsonl()))
}

/// Rank-k, mAP and mINP of a query x gallery similarity matrix.
#[pyfunction]
#[pyo3(signature = (similarity, query_ids, gallery_ids, ks=vec![1, 5, 10]))]
fn evaluate_similarity<'py>(
    py: Python<'py>,
    similarity: Vec<Vec<f64>>,
    query_ids: Vec<usize>,
    gallery_ids: Vec<usize>,
    ks: Vec<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let sim = matrix(similarity)?;
    let report = evaluate(&sim, &query_ids, &gallery_ids, &ks).map_err(py_err)?;
    json_to_py(py, &to_json(&report.summary())?)
}

/// Similarity distribution matching loss of paired image/text embeddings.
#[pyfunction]
#[pyo3(signature = (image, text, labels, temperature=0.02, epsilon=1e-8))]
fn sdm_loss(image: Vec<Vec<f64>>, text: Vec<Vec<f64>>, labels: Vec<usize>, temperature: f64, epsilon: f64) -> PyResult<f64> {
    let mut tape = Tape::new();
    let i = tape.input(matrix(image)?);
    let t = tape.input(matrix(text)?);
    let cfg = SdmConfig {
        temperature,
        epsilon,
        ..Default::default()
    };
    let l = sdm(&mut tape, i, t, &labels, &cfg).map_err(py_err)?;
    Ok(tape.value(l).item())
}

#[pyfunction]
#[pyo3(signature = (image, text, temperature=0.02))]
fn infonce(image: Vec<Vec<f64>>, text: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let mut tape = Tape::new();
    let i = tape.input(matrix(image)?);
    let t = tape.input(matrix(text)?);
    let l = infonce_loss(&mut tape, i, t, temperature).map_err(py_err)?;
    Ok(tape.value(l).item())
}

/// Finite-difference check of every differentiable operation.
#[pyfunction]
#[pyo3(signature = (cases=10, seed=0))]
fn gradcheck<'py>(py: Python<'py>, cases: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let results = py.detach(move || irra_kit::gradcheck::run_suite(cases, seed)).map_err(py_err)?;
    json_to_py(py, &to_json(&results)?)
}

#[pymodule]
fn irra_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function of the extension to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(sdm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
