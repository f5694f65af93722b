//! Python bindings: task sequences, continual runs, checkpoints and the
//! mask and metric primitives.
//!
//! Configuration is passed as keyword arguments mirroring the Rust
//! `RunConfig` (nested `train` and `kkt` dicts); unknown keys raise
//! `ValueError`.

use std::path::PathBuf;

use exssnet::data::{synth_gaussian_tasks, Dataset, SynthConfig};
use exssnet::harness::{self, AccuracyMatrix, RunConfig, RunOutput};
use exssnet::mask::{self, LayerMask, ScoreTensor, Supermask};
use exssnet::network::ModelState;
use exssnet::{kkt, persistence, MaskRegistry, TaskSpec};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: exssnet::Error) -> PyErr {
    use exssnet::Error::*;
    match e {
        Io(e) => PyIOError::new_err(e.to_string()),
        Lookup(m) => PyKeyError::new_err(m),
        Domain(_) | Shape(_) | Format(_) => PyValueError::new_err(e.to_string()),
        State(_) | Numeric(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn layer_to_rows(l: &LayerMask) -> Vec<Vec<bool>> {
    let (r, c) = l.shape();
    (0..r).map(|i| (0..c).map(|j| l.get(i, j)).collect()).collect()
}

fn mask_to_py(m: &Supermask) -> Vec<Vec<Vec<bool>>> {
    m.layers.iter().map(layer_to_rows).collect()
}

fn mask_from_py(layers: Vec<Vec<Vec<bool>>>) -> PyResult<Supermask> {
    let mut out = Vec::new();
    for rows in layers {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("ragged mask layer"));
        }
        let flat: Vec<bool> = rows.iter().flatten().copied().collect();
        out.push(LayerMask::from_bools(rows.len(), cols, &flat).map_err(to_py)?);
    }
    Ok(Supermask { layers: out })
}

/// A dataset split into a sequence of tasks.
#[pyclass(module = "exssnet_py", frozen)]
struct TaskSet {
    data: Dataset,
    tasks: Vec<TaskSpec>,
}

#[pymethods]
impl TaskSet {
    /// Gaussian-blob tasks; `duplicate=(source, copy)` makes task `copy`
    /// reuse task `source`'s class centers.
    #[staticmethod]
    #[pyo3(signature = (n_tasks=5, classes_per_task=2, dim=16, separation=10.0, train_per_class=200, test_per_class=100, clusters_per_class=1, duplicate=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        n_tasks: usize,
        classes_per_task: usize,
        dim: usize,
        separation: f32,
        train_per_class: usize,
        test_per_class: usize,
        clusters_per_class: usize,
        duplicate: Option<(usize, usize)>,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = SynthConfig {
            n_tasks,
            classes_per_task,
            dim,
            separation,
            train_per_class,
            test_per_class,
            duplicate,
            clusters_per_class,
            seed,
        };
        let (data, tasks) = synth_gaussian_tasks(&cfg).map_err(to_py)?;
        Ok(Self { data, tasks })
    }

    /// SplitMNIST from a directory of the four IDX files.
    #[staticmethod]
    #[pyo3(signature = (dir, n_tasks=5, seed=0))]
    fn split_mnist(dir: PathBuf, n_tasks: usize, seed: u64) -> PyResult<Self> {
        let (data, tasks) = harness::split_mnist(dir, n_tasks, seed).map_err(to_py)?;
        Ok(Self { data, tasks })
    }

    fn __len__(&self) -> usize {
        self.tasks.len()
    }

    #[getter]
    fn features(&self) -> usize {
        self.data.features()
    }

    /// Total output units needed by all task heads.
    #[getter]
    fn outputs(&self) -> usize {
        self.tasks.iter().map(|t| t.head.end).max().unwrap_or(0)
    }

    /// Global class ids of each task.
    #[getter]
    fn classes(&self) -> Vec<Vec<usize>> {
        self.tasks.iter().map(|t| t.classes.clone()).collect()
    }

    /// `(train, val, test)` sample counts of each task.
    #[getter]
    fn sizes(&self) -> Vec<(usize, usize, usize)> {
        self.tasks.iter().map(|t| (t.train.len(), t.val.len(), t.test.len())).collect()
    }

    fn __repr__(&self) -> String {
        format!("TaskSet({} tasks, {} samples, {} features)", self.tasks.len(), self.data.len(), self.data.features())
    }
}

/// Result of a continual run: metrics, final weights and masks.
#[pyclass(module = "exssnet_py", frozen)]
struct Run {
    out: RunOutput,
}

#[pymethods]
impl Run {
    /// Lower-triangular accuracy matrix; row `i` is after learning task `i`.
    #[getter]
    fn accuracy_matrix(&self) -> Vec<Vec<f64>> {
        self.out.report.metrics.matrix.rows().to_vec()
    }

    #[getter]
    fn average_accuracy(&self) -> f64 {
        self.out.report.metrics.average_accuracy
    }

    /// `None` for single-task runs.
    #[getter]
    fn forgetting(&self) -> Option<f64> {
        self.out.report.metrics.forgetting
    }

    #[getter]
    fn sparse_overlaps(&self) -> Vec<f64> {
        self.out.report.metrics.overlaps.iter().map(|o| o.sparse_overlap).collect()
    }

    #[getter]
    fn mean_sparse_overlap(&self) -> f64 {
        self.out.report.mean_sparse_overlap()
    }

    /// Task chosen by knowledge transfer for each task, if any.
    #[getter]
    fn transfers(&self) -> Vec<Option<usize>> {
        self.out.report.metrics.transfers.iter().map(|t| t.as_ref().and_then(|d| d.chosen_task)).collect()
    }

    /// `(task, phase, epoch, val_accuracy)` when curves were recorded.
    #[getter]
    fn curves(&self) -> Vec<(usize, String, usize, f64)> {
        self.out
            .report
            .metrics
            .curves
            .iter()
            .map(|p| (p.task_id, format!("{:?}", p.phase).to_lowercase(), p.epoch, p.val_accuracy))
            .collect()
    }

    fn task_mask(&self, task: usize) -> PyResult<Vec<Vec<Vec<bool>>>> {
        Ok(mask_to_py(self.out.registry.task_mask(task).map_err(to_py)?))
    }

    fn free_mask(&self, task: usize) -> PyResult<Vec<Vec<Vec<bool>>>> {
        Ok(mask_to_py(self.out.registry.free_mask(task).map_err(to_py)?))
    }

    fn weights(&self) -> Vec<Vec<Vec<f32>>> {
        weights_to_py(&self.out.model)
    }

    /// Writes a checkpoint and returns its size in bytes.
    fn save_checkpoint(&self, path: PathBuf) -> PyResult<u64> {
        let density = self.out.report.config.train.mask_density as f32;
        persistence::save_checkpoint(path, &self.out.model, &self.out.registry, density).map_err(to_py)
    }

    /// Test accuracy of every learned task on `tasks`.
    fn evaluate(&self, tasks: &TaskSet) -> PyResult<Vec<f64>> {
        harness::evaluate_row(&self.out.model, &self.out.registry, &tasks.data, &tasks.tasks).map_err(to_py)
    }

    /// Bit-for-bit equality of metrics, weights and masks.
    fn same_as(&self, other: &Run) -> bool {
        self.out.report.metrics == other.out.report.metrics
            && self.out.model == other.out.model
            && self.out.registry == other.out.registry
    }
}

fn weights_to_py(model: &ModelState) -> Vec<Vec<Vec<f32>>> {
    model.weights().iter().map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect()).collect()
}

/// Learns every task of `tasks` in order. Keyword arguments follow the Rust
/// `RunConfig`: `widths`, `train={...}`, `kkt={...}`, `kkt_enabled`,
/// `record_curves`. `widths` defaults to `[features, 300, 100, outputs]`.
#[pyfunction]
#[pyo3(signature = (tasks, **config))]
fn run_continual(py: Python<'_>, tasks: &TaskSet, config: Option<&Bound<'_, PyDict>>) -> PyResult<Run> {
    let json: String = match config {
        Some(d) => py.import("json")?.call_method1("dumps", (d,))?.extract()?,
        None => "{}".into(),
    };
    let mut cfg: RunConfig = serde_json::from_str(&json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if config.is_none_or(|d| !d.contains("widths").unwrap_or(false)) {
        let outputs = tasks.tasks.iter().map(|t| t.head.end).max().unwrap_or(0);
        cfg.widths = vec![tasks.data.features(), 300, 100, outputs];
    }
    let (data, specs) = (&tasks.data, &tasks.tasks);
    let out = py.detach(|| harness::run_continual(data, specs, &cfg)).map_err(to_py)?;
    Ok(Run { out })
}

/// Checkpoint contents: layer shapes, weights and per-task masks.
#[pyclass(module = "exssnet_py", frozen)]
struct Checkpoint {
    model: ModelState,
    registry: MaskRegistry,
    density: f32,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, registry, meta) = persistence::load_checkpoint(path).map_err(to_py)?;
        Ok(Self { model, registry, density: meta.density })
    }

    #[getter]
    fn shapes(&self) -> Vec<(usize, usize)> {
        self.model.shapes()
    }

    #[getter]
    fn task_count(&self) -> usize {
        self.registry.task_count()
    }

    #[getter]
    fn density(&self) -> f32 {
        self.density
    }

    fn weights(&self) -> Vec<Vec<Vec<f32>>> {
        weights_to_py(&self.model)
    }

    fn task_mask(&self, task: usize) -> PyResult<Vec<Vec<Vec<bool>>>> {
        Ok(mask_to_py(self.registry.task_mask(task).map_err(to_py)?))
    }

    fn free_mask(&self, task: usize) -> PyResult<Vec<Vec<Vec<bool>>>> {
        Ok(mask_to_py(self.registry.free_mask(task).map_err(to_py)?))
    }

    /// Fraction of all weights used by at least one task.
    fn used_fraction(&self) -> PyResult<f64> {
        let used = self.registry.union_of_task_masks(&self.model.shapes()).map_err(to_py)?;
        Ok(used.count_ones() as f64 / self.model.param_count() as f64)
    }
}

/// Per-layer top-`density` masks of `scores` (list of 2-D lists).
#[pyfunction]
fn threshold_topk(scores: Vec<Vec<Vec<f32>>>, density: f64) -> PyResult<Vec<Vec<Vec<bool>>>> {
    let layers = scores.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let m = mask::threshold_topk(&ScoreTensor { layers }, density).map_err(to_py)?;
    Ok(mask_to_py(&m))
}

/// Bits of `current` not used by any mask in `previous`.
#[pyfunction]
fn free_mask(current: Vec<Vec<Vec<bool>>>, previous: Vec<Vec<Vec<Vec<bool>>>>) -> PyResult<Vec<Vec<Vec<bool>>>> {
    let cur = mask_from_py(current)?;
    let prev = previous.into_iter().map(mask_from_py).collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&Supermask> = prev.iter().collect();
    Ok(mask_to_py(&mask::free_mask(&cur, &refs).map_err(to_py)?))
}

/// Fraction of `current`'s kept weights already used by `previous`.
#[pyfunction]
fn sparse_overlap(current: Vec<Vec<Vec<bool>>>, previous: Vec<Vec<Vec<Vec<bool>>>>) -> PyResult<f64> {
    let cur = mask_from_py(current)?;
    let prev = previous.into_iter().map(mask_from_py).collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&Supermask> = prev.iter().collect();
    Ok(mask::sparse_overlap(0, &cur, &refs).map_err(to_py)?.sparse_overlap)
}

#[pyfunction]
fn average_accuracy(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let n = rows.len();
    harness::average_accuracy(&AccuracyMatrix::from_rows(rows).map_err(to_py)?, n).map_err(to_py)
}

#[pyfunction]
fn forgetting(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let n = rows.len();
    harness::forgetting_metric(&AccuracyMatrix::from_rows(rows).map_err(to_py)?, n).map_err(to_py)
}

#[pyfunction]
fn storage_bits(param_count: u64, density: f64, tasks: u64) -> PyResult<u64> {
    persistence::storage_bits(param_count, density, tasks).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (train, labels, queries, k=5))]
fn knn_classify(train: Vec<Vec<f32>>, labels: Vec<usize>, queries: Vec<Vec<f32>>, k: usize) -> PyResult<Vec<usize>> {
    let (t, q) = (matrix(train)?, matrix(queries)?);
    kkt::knn_classify(t.view(), &labels, q.view(), k).map_err(to_py)
}

#[pymodule]
fn exssnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TaskSet>()?;
    m.add_class::<Run>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(run_continual, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_topk, m)?)?;
    m.add_function(wrap_pyfunction!(free_mask, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(average_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(storage_bits, m)?)?;
    m.add_function(wrap_pyfunction!(knn_classify, m)?)?;
    m.add("MODES", exssnet::Mode::ALL.map(|m| m.as_str()).to_vec())?;
    Ok(())
}
