//! Python bindings for `ocreid`.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ocreid::data::synth::{generate_synthetic_dataset as synth, SynthSpec};
use ocreid::data::{load_dataset, Layout, SampleMeta};
use ocreid::eval::{self, Protocol};
use ocreid::image::Image;
use ocreid::losses::{self, Reduction};
use ocreid::model::{batch_from_chw, checkpoint};
use ocreid::occlusion::{build_occluded_dataset, LabelTable, OcclusionConfig};
use ocreid::train::{self as core_train, EvalRequest};

fn to_py(e: ocreid::Error) -> PyErr {
    match e {
        ocreid::Error::Io { .. } | ocreid::Error::Image { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = ocreid::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn parse_reduction(s: &str) -> PyResult<Reduction> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        other => Err(PyValueError::new_err(format!("unknown reduction '{other}'"))),
    }
}

fn array2(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array3(batch: Vec<Vec<Vec<f64>>>) -> PyResult<Array3<f64>> {
    let m = batch.first().map_or(0, Vec::len);
    let c = batch.first().and_then(|b| b.first()).map_or(0, Vec::len);
    if batch.iter().any(|b| b.len() != m || b.iter().any(|p| p.len() != c)) {
        return Err(PyValueError::new_err("ragged embedding batch"));
    }
    let n = batch.len();
    Array3::from_shape_vec((n, m, c), batch.into_iter().flatten().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn metas(rows: Vec<(usize, usize, usize)>) -> Vec<SampleMeta> {
    rows.into_iter()
        .map(|(identity_id, clothes_id, camera_id)| SampleMeta { identity_id, clothes_id, camera_id })
        .collect()
}

/// Mean over parts of per-part Euclidean distances between two `M x C` embeddings.
#[pyfunction]
fn part_mean_distance(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::part_mean_distance(array2(x)?.view(), array2(y)?.view()).map_err(to_py)
}

/// Batch-hard part-robust triplet loss over an `N x M x C` batch. Returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, margin=0.3, reduction="sum"))]
fn prt_loss(embeddings: Vec<Vec<Vec<f64>>>, labels: Vec<usize>, margin: f64, reduction: &str) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let x = array3(embeddings)?;
    let s = losses::prt_loss(x.view(), &labels, margin, parse_reduction(reduction)?).map_err(to_py)?;
    let grad = s
        .grad
        .outer_iter()
        .map(|sample| sample.outer_iter().map(|part| part.to_vec()).collect())
        .collect();
    Ok((s.loss, grad))
}

/// CMC and mAP for a query x gallery distance matrix. Metadata rows are
/// `(identity_id, clothes_id, camera_id)`.
#[pyfunction]
#[pyo3(signature = (distmat, query_meta, gallery_meta, protocol="standard", max_rank=20))]
fn cmc_map<'py>(
    py: Python<'py>,
    distmat: Vec<Vec<f64>>,
    query_meta: Vec<(usize, usize, usize)>,
    gallery_meta: Vec<(usize, usize, usize)>,
    protocol: &str,
    max_rank: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let d = array2(distmat)?;
    let (q, g) = (metas(query_meta), metas(gallery_meta));
    let mask = eval::apply_protocol(&q, &g, parse::<Protocol>(protocol)?);
    let r = eval::cmc_map(&d, &mask, &q, &g, max_rank).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("rank1", r.rank1)?;
    out.set_item("map", r.map)?;
    out.set_item("cmc", r.cmc)?;
    out.set_item("num_dropped_queries", r.num_dropped_queries)?;
    out.set_item("ap", r.ap)?;
    Ok(out)
}

/// Writes a synthetic dataset with parsing maps and a manifest; returns the record count.
#[pyfunction]
#[pyo3(signature = (out, ids=8, clothes=2, images=10, occluder_prob=0.0, seed=1))]
fn generate_synthetic_dataset(out: PathBuf, ids: usize, clothes: usize, images: usize, occluder_prob: f64, seed: u64) -> PyResult<usize> {
    let spec = SynthSpec { occluder_prob, ..SynthSpec::new(ids, clothes, images) };
    Ok(synth(&spec, seed, &out).map_err(to_py)?.index.records.len())
}

/// Builds an occluded copy of a dataset and returns its stats.
#[pyfunction]
#[pyo3(signature = (src, dst, parsing=None, layout="manifest", pool_size=4, threshold=0.5, seed=42, label_table="pascal"))]
#[allow(clippy::too_many_arguments)]
fn synthesize_occlusions<'py>(
    py: Python<'py>,
    src: PathBuf,
    dst: PathBuf,
    parsing: Option<PathBuf>,
    layout: &str,
    pool_size: usize,
    threshold: f64,
    seed: u64,
    label_table: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let index = load_dataset(&src, parse::<Layout>(layout)?).map_err(to_py)?;
    let cfg = OcclusionConfig {
        pool_size,
        binarize_threshold: threshold,
        seed,
        label_table: LabelTable::resolve(label_table).map_err(to_py)?,
        ..OcclusionConfig::default()
    };
    let parsing = parsing.unwrap_or_else(|| src.clone());
    let stats = build_occluded_dataset(&index, &parsing, &dst, &cfg).map_err(to_py)?;
    json_to_py(py, &stats)
}

/// Training configuration. Fields are read and written through `get`/`set`
/// or as a whole through `to_dict`/`from_dict`.
#[pyclass(name = "TrainConfig", skip_from_py_object)]
struct PyTrainConfig {
    inner: core_train::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[staticmethod]
    fn toy(dataset_root: PathBuf) -> Self {
        Self { inner: core_train::TrainConfig::toy(dataset_root) }
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: core_train::TrainConfig::from_json_file(&path).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner)
    }

    fn get<'py>(&self, py: Python<'py>, field: &str) -> PyResult<Bound<'py, PyAny>> {
        let all = self.to_dict(py)?;
        all.get_item(field).map_err(|_| PyValueError::new_err(format!("unknown field '{field}'")))
    }

    fn set(&mut self, py: Python<'_>, field: &str, value: Bound<'_, PyAny>) -> PyResult<()> {
        let json = py.import("json")?;
        let all = self.to_dict(py)?;
        all.set_item(field, value)?;
        let text: String = json.call_method1("dumps", (all,))?.extract()?;
        self.inner = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.inner.lr_at(epoch)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// Trains a model. With `run_dir` all artifacts go there; otherwise a fresh
/// directory under the config's `output_dir` is used.
#[pyfunction]
#[pyo3(signature = (config, run_dir=None))]
fn train<'py>(py: Python<'py>, config: &PyTrainConfig, run_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let outcome = match run_dir {
        Some(d) => core_train::train_in(&config.inner, &d),
        None => core_train::train(&config.inner),
    }
    .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("run_dir", outcome.run_dir)?;
    out.set_item("checkpoint", outcome.checkpoint)?;
    out.set_item("log", outcome.log)?;
    out.set_item("seconds", outcome.seconds)?;
    out.set_item("report", json_to_py(py, &outcome.report)?)?;
    Ok(out)
}

/// Scores a checkpoint on a dataset's query/gallery splits and writes
/// `eval_report.json` into `out_dir`.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset_root, out_dir, protocol="prcc_cc", lam=0.35, layout="manifest", query_root=None, max_rank=20, distmat=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset_root: PathBuf,
    out_dir: PathBuf,
    protocol: &str,
    lam: f64,
    layout: &str,
    query_root: Option<PathBuf>,
    max_rank: usize,
    distmat: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let req = EvalRequest {
        checkpoint,
        dataset_root,
        layout: parse(layout)?,
        query_root,
        protocol: parse(protocol)?,
        lambda: lam,
        max_rank,
    };
    let report = core_train::evaluate(&req, &out_dir, distmat.as_deref()).map_err(to_py)?;
    json_to_py(py, &report)
}

/// Summarises a `train_log.csv` and writes `summary.json` beside it.
#[pyfunction]
fn export_metrics<'py>(py: Python<'py>, log: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &core_train::export_metrics(&log).map_err(to_py)?)
}

/// Reads a binary distance matrix as a list of rows.
#[pyfunction]
fn read_distmat(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    let d = eval::read_distmat(&path).map_err(to_py)?;
    Ok(d.outer_iter().map(|r| r.to_vec()).collect())
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    model: ocreid::model::Model,
    header: checkpoint::CheckpointHeader,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, header) = checkpoint::load(&path).map_err(to_py)?;
        Ok(Self { model, header })
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.header.input_size
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.header.lambda
    }

    fn header<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.header)
    }

    /// Embeds image files, resized to the model's input size. Defaults to
    /// the checkpoint's lambda.
    #[pyo3(signature = (paths, lam=None))]
    fn embed_files(&self, paths: Vec<PathBuf>, lam: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
        let size = self.header.input_size;
        let images = paths
            .iter()
            .map(|p| Image::load(p, Some(size)).map(|im| im.to_chw()))
            .collect::<ocreid::Result<Vec<_>>>()
            .map_err(to_py)?;
        let x = batch_from_chw(&images, size).map_err(to_py)?;
        let e = self.model.embed(&x, lam.unwrap_or(self.header.lambda)).map_err(to_py)?;
        Ok(e.outer_iter().map(|r| r.to_vec()).collect())
    }
}

#[pymodule]
fn ocreid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(part_mean_distance, m)?)?;
    m.add_function(wrap_pyfunction!(prt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cmc_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_occlusions, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(export_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(read_distmat, m)?)?;
    Ok(())
}
