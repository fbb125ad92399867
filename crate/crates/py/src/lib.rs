//! Python bindings: configuration, scenario generation, losses, the embedding
//! store, temporal inference and the pipeline commands.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tempcobev::bev::{BevEmbedding, EmbeddingSource};
use tempcobev::config::RunConfig;
use tempcobev::objectives::{self, GroundTruthMap};
use tempcobev::pipeline::{self, Layout};
use tempcobev::store;
use tempcobev::temporal::{HistoryBuffer, TemporalFusion};
use tempcobev::world::{self, generate_scenario};
use tempcobev::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingDependency { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Argument(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_nested3(v: Vec<Vec<Vec<f32>>>) -> PyResult<Array3<f32>> {
    let c = v.len();
    let h = v.first().map_or(0, Vec::len);
    let w = v.first().and_then(|x| x.first()).map_or(0, Vec::len);
    let flat: Vec<f32> = v.into_iter().flatten().flatten().collect();
    Array3::from_shape_vec((c, h, w), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_nested3(a: &Array3<f32>) -> Vec<Vec<Vec<f32>>> {
    a.outer_iter().map(|ch| to_rows(&ch.to_owned())).collect()
}

/// Resolved run configuration.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (quick = false))]
    fn new(quick: bool) -> Self {
        let inner = if quick { RunConfig::quick() } else { RunConfig::default() };
        Self { inner }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Returns a copy with one `section.key=value` override applied.
    fn set(&self, assignment: &str) -> PyResult<Self> {
        self.inner.set(assignment).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn grid_cells(&self) -> usize {
        self.inner.world.grid_cells
    }
}

/// One generated driving scenario.
#[pyclass(name = "Scenario")]
struct PyScenario {
    inner: world::Scenario,
    world: world::WorldConfig,
}

#[pymethods]
impl PyScenario {
    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn ego_id(&self) -> u32 {
        self.inner.ego_id
    }

    #[getter]
    fn cav_ids(&self) -> Vec<u32> {
        self.inner.cav_ids.clone()
    }

    #[getter]
    fn n_vehicles(&self) -> usize {
        self.inner.vehicles.len()
    }

    fn ground_truth(&self, frame: usize) -> PyResult<Vec<Vec<bool>>> {
        world::ground_truth_map(&self.inner, &self.world, frame)
            .map(|g| to_rows(&g))
            .map_err(py_err)
    }

    fn observation(&self, frame: usize, agent_id: u32) -> PyResult<Vec<Vec<bool>>> {
        world::agent_observation(&self.inner, &self.world, frame, agent_id)
            .map(|g| to_rows(&g))
            .map_err(py_err)
    }

    /// CAV ids reaching the ego at each frame.
    fn comm_schedule(&self) -> PyResult<Vec<Vec<u32>>> {
        world::comm_schedule(&self.inner, &self.world, &[])
            .map(|s| s.available)
            .map_err(py_err)
    }
}

#[pyfunction]
fn generate(config: &PyRunConfig, seed: u64) -> PyResult<PyScenario> {
    let world = config.inner.world.clone();
    let inner = generate_scenario(&world, seed).map_err(py_err)?;
    Ok(PyScenario { inner, world })
}

#[pyfunction]
fn iou_loss(logits: Vec<Vec<f64>>, gt: Vec<Vec<bool>>) -> PyResult<f64> {
    objectives::iou_loss(&from_rows(logits)?, &GroundTruthMap(from_rows(gt)?)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (logits, gt, pos_weight = 2.0))]
fn weighted_cross_entropy(logits: Vec<Vec<f64>>, gt: Vec<Vec<bool>>, pos_weight: f64) -> PyResult<f64> {
    objectives::weighted_cross_entropy(&from_rows(logits)?, &GroundTruthMap(from_rows(gt)?), pos_weight)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (logits, gt, threshold = 0.5))]
fn iou_metric(logits: Vec<Vec<f64>>, gt: Vec<Vec<bool>>, threshold: f64) -> PyResult<f64> {
    objectives::iou_metric(&from_rows(logits)?, &GroundTruthMap(from_rows(gt)?), threshold).map_err(py_err)
}

/// Read access to a cached embedding store.
#[pyclass(name = "EmbeddingStore")]
struct PyEmbeddingStore {
    inner: store::EmbeddingStore,
}

#[pymethods]
impl PyEmbeddingStore {
    #[new]
    fn open(path: PathBuf) -> PyResult<Self> {
        store::EmbeddingStore::open(&path)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn scenario_ids(&self) -> Vec<u64> {
        self.inner.scenario_ids()
    }

    fn n_frames(&self, scenario_id: u64) -> PyResult<usize> {
        self.inner.n_frames(scenario_id).map_err(py_err)
    }

    /// `(channels, height, width, grid_cells)`
    fn geometry(&self) -> (usize, usize, usize, usize) {
        let g = self.inner.geometry();
        (g.channels, g.height, g.width, g.grid_cells)
    }

    fn read_record<'py>(&self, py: Python<'py>, scenario_id: u64, frame: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.read_record(scenario_id, frame).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("scenario_id", r.scenario_id)?;
        d.set_item("frame_index", r.frame_index)?;
        d.set_item("ego_id", r.ego_id)?;
        d.set_item("n_cavs_available", r.n_cavs_available)?;
        d.set_item("fused", to_nested3(&r.fused))?;
        d.set_item("ego_only", to_nested3(&r.ego_only))?;
        d.set_item("gt", to_rows(&r.gt.0))?;
        Ok(d)
    }
}

/// A trained temporal module streaming one scenario.
#[pyclass(name = "TemporalModel")]
struct PyTemporalModel {
    model: TemporalFusion<f32>,
    buffer: HistoryBuffer<f32>,
}

#[pymethods]
impl PyTemporalModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let model = pipeline::load_temporal(&path).map_err(py_err)?;
        let buffer = HistoryBuffer::new(model.config.history_len);
        Ok(Self { model, buffer })
    }

    #[getter]
    fn history_len(&self) -> usize {
        self.model.config.history_len
    }

    /// Refines `embedding` (`[C][H][W]`) with the buffered history, then updates the buffer.
    fn step(&mut self, embedding: Vec<Vec<Vec<f32>>>, frame_index: i64) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let emb = BevEmbedding::new(from_nested3(embedding)?, frame_index, EmbeddingSource::FusedMultiCav)
            .map_err(py_err)?;
        let out = self.model.step(&emb, &mut self.buffer).map_err(py_err)?;
        Ok(to_nested3(&out.data))
    }

    fn reset(&mut self) {
        self.buffer.clear();
    }
}

/// The command pipeline rooted at one output directory.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    config: RunConfig,
    layout: Layout,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(out: PathBuf, config: &PyRunConfig) -> Self {
        Self {
            config: config.inner.clone(),
            layout: Layout::new(out),
        }
    }

    fn gen(&self) -> PyResult<(usize, usize, usize)> {
        let s = pipeline::cmd_gen(&self.config, &self.layout).map_err(py_err)?;
        Ok((s.train, s.eval, s.frames))
    }

    /// Returns the best epoch's evaluation IoU.
    fn pretrain(&self) -> PyResult<f64> {
        let s = pipeline::cmd_pretrain(&self.config, &self.layout).map_err(py_err)?;
        Ok(s.log[s.best_epoch].eval_iou)
    }

    /// Returns the record count of each split.
    fn cache(&self) -> PyResult<Vec<u64>> {
        let r = pipeline::cmd_cache(&self.config, &self.layout).map_err(py_err)?;
        Ok(r.iter().map(|v| v.records).collect())
    }

    /// Returns `(epoch, train_loss, eval_iou)` per epoch.
    fn train(&self) -> PyResult<Vec<(usize, f64, f64)>> {
        let s = pipeline::cmd_train(&self.config, &self.layout).map_err(py_err)?;
        Ok(s.log.iter().map(|e| (e.epoch, e.train_loss, e.eval_iou)).collect())
    }

    /// Returns `{variant: [iou at t, t+1, ...]}`.
    fn eval<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = pipeline::cmd_eval(&self.config, &self.layout).map_err(py_err)?;
        let d = PyDict::new(py);
        for v in s.report.variants() {
            let ious: Vec<f64> = s.report.rows.iter().filter(|r| r.variant == v).map(|r| r.iou).collect();
            d.set_item(v, ious)?;
        }
        d.set_item("current_tempcobev", s.current_temporal)?;
        d.set_item("current_base", s.current_base)?;
        Ok(d)
    }

    fn verify(&self) -> PyResult<Vec<u64>> {
        let r = pipeline::cmd_verify(&self.layout.stage_dir(pipeline::Stage::Cache)).map_err(py_err)?;
        Ok(r.iter().map(|(_, v)| v.records).collect())
    }

    fn store(&self, split: &str) -> PyResult<PyEmbeddingStore> {
        let split = match split {
            "train" => pipeline::Split::Train,
            "eval" => pipeline::Split::Eval,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        PyEmbeddingStore::open(self.layout.store(split))
    }

    fn temporal_checkpoint(&self) -> PathBuf {
        self.layout.temporal_checkpoint()
    }
}

#[pymodule]
fn tempcobev_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyEmbeddingStore>()?;
    m.add_class::<PyTemporalModel>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(iou_loss, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(iou_metric, m)?)?;
    Ok(())
}
