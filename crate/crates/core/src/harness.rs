//! Task-incremental loop, accuracy matrix and continual-learning metrics.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{load_mnist_dir, normalize, Dataset, MNIST_MEAN, MNIST_STD};
use crate::error::{ensure, Error, Result};
use crate::kkt::{KktConfig, TransferDecision};
use crate::mask::{MaskRegistry, OverlapReport, Supermask};
use crate::network::{init_signed_kaiming, mlp_specs, predict_task, ModelState};
use crate::rng;
use crate::training::{learn_task, EpochEvent, Phase, TrainConfig};

/// Share of each task's training pool held out for validation curves.
pub const VAL_FRACTION: f64 = 0.1;

const EVAL_CHUNK: usize = 2048;

/// One task: its global classes, sample indices and output-layer slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    /// Global class ids; `classes[j]` maps to output `head.start + j`.
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub head: Range<usize>,
}

impl TaskSpec {
    pub fn new(
        id: usize,
        classes: Vec<usize>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
        head_start: usize,
    ) -> Self {
        let head = head_start..head_start + classes.len();
        Self { id, classes, train, val, test, head }
    }

    /// Output index for a global label.
    pub fn target(&self, label: usize) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == label)
            .map(|j| self.head.start + j)
            .ok_or_else(|| Error::Domain(format!("label {label} is not a class of task {}", self.id)))
    }
}

/// Partitions the classes into `n_tasks` equal groups after a seeded shuffle.
/// Rows before `test_start` form the training pools (minus a validation
/// holdout), the rest the test sets.
pub fn split_into_tasks(dataset: &Dataset, n_tasks: usize, seed: u64, test_start: usize) -> Result<Vec<TaskSpec>> {
    ensure!(n_tasks >= 1, Domain, "need at least one task");
    ensure!(
        dataset.class_count.is_multiple_of(n_tasks),
        Domain,
        "{} classes cannot be split into {n_tasks} equal tasks",
        dataset.class_count
    );
    ensure!(test_start <= dataset.len(), Domain, "test boundary {test_start} past {} rows", dataset.len());
    let per = dataset.class_count / n_tasks;
    let mut classes: Vec<usize> = (0..dataset.class_count).collect();
    classes.shuffle(&mut rng::stream(seed, &[rng::SPLIT, u64::MAX]));

    let mut owner = vec![0usize; dataset.class_count];
    let mut groups: Vec<Vec<usize>> = classes.chunks(per).map(|g| g.to_vec()).collect();
    for (t, g) in groups.iter_mut().enumerate() {
        g.sort_unstable();
        for &c in g.iter() {
            owner[c] = t;
        }
    }
    let mut pools = vec![Vec::new(); n_tasks];
    let mut tests = vec![Vec::new(); n_tasks];
    for (row, &label) in dataset.labels.iter().enumerate() {
        let t = owner[label];
        if row < test_start { pools[t].push(row) } else { tests[t].push(row) }
    }
    let mut out = Vec::with_capacity(n_tasks);
    for (t, ((group, mut pool), test)) in groups.into_iter().zip(pools).zip(tests).enumerate() {
        pool.shuffle(&mut rng::stream(seed, &[rng::SPLIT, t as u64]));
        let n_val = (pool.len() as f64 * VAL_FRACTION).round() as usize;
        let val = pool.split_off(pool.len() - n_val);
        out.push(TaskSpec::new(t, group, pool, val, test, t * per));
    }
    Ok(out)
}

/// Loads an MNIST directory, normalizes it and splits it into tasks.
pub fn split_mnist(dir: impl AsRef<Path>, n_tasks: usize, seed: u64) -> Result<(Dataset, Vec<TaskSpec>)> {
    let (train, test) = load_mnist_dir(dir)?;
    let test_start = train.len();
    let all = normalize(&train.concat(&test)?, MNIST_MEAN, MNIST_STD)?;
    let tasks = split_into_tasks(&all, n_tasks, seed, test_start)?;
    Ok((all, tasks))
}

/// Lower-triangular `a[i][j]`: accuracy on task `j` after learning task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends row `i`, which must have exactly `i + 1` entries in [0, 1].
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        ensure!(
            row.len() == self.rows.len() + 1,
            Shape,
            "row {} needs {} entries, got {}",
            self.rows.len(),
            self.rows.len() + 1,
            row.len()
        );
        ensure!(row.iter().all(|a| (0.0..=1.0).contains(a)), Domain, "accuracies must lie in [0, 1]: {row:?}");
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    /// True when every column is constant from the diagonal down.
    pub fn columns_frozen(&self) -> bool {
        (0..self.rows.len()).all(|j| self.rows[j..].iter().all(|r| r[j].to_bits() == self.rows[j][j].to_bits()))
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean of row `n` (1-based number of tasks learned).
pub fn average_accuracy(a: &AccuracyMatrix, n: usize) -> Result<f64> {
    ensure!(n >= 1 && n <= a.len(), State, "row {n} is not available ({} rows)", a.len());
    let row = &a.rows[n - 1];
    Ok(row.iter().sum::<f64>() / n as f64)
}

/// Mean over the first `n - 1` tasks of (best earlier accuracy − final
/// accuracy). Not clamped: backward transfer makes terms negative.
pub fn forgetting_metric(a: &AccuracyMatrix, n: usize) -> Result<f64> {
    ensure!(n >= 2, Domain, "forgetting needs at least two tasks, got {n}");
    ensure!(n <= a.len(), State, "row {n} is not available ({} rows)", a.len());
    let last = &a.rows[n - 1];
    let total: f64 = (0..n - 1)
        .map(|t| {
            let best = a.rows[t..n - 1].iter().map(|r| r[t]).fold(f64::NEG_INFINITY, f64::max);
            best - last[t]
        })
        .sum();
    Ok(total / (n - 1) as f64)
}

/// Exact-match accuracy of `mask` on `indices` of task `spec`.
pub fn task_accuracy(
    model: &ModelState,
    mask: &Supermask,
    dataset: &Dataset,
    spec: &TaskSpec,
    indices: &[usize],
) -> Result<f64> {
    ensure!(!indices.is_empty(), Domain, "task {} has no evaluation samples", spec.id);
    let mut hits = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = dataset.inputs.select(Axis(0), chunk);
        let pred = predict_task(model, mask, x.view(), spec.head.clone())?;
        for (&i, &p) in chunk.iter().zip(&pred) {
            hits += usize::from(spec.target(dataset.labels[i])? == p);
        }
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Test accuracy of every task in `tasks` under its registered mask.
pub fn evaluate_row(model: &ModelState, registry: &MaskRegistry, dataset: &Dataset, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| {
            let mask = registry
                .task_mask(t.id)
                .map_err(|_| Error::State(format!("task {} has no registered mask", t.id)))?;
            task_accuracy(model, mask, dataset, t, &t.test)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Layer widths including input and output, e.g. `[784, 300, 100, 10]`.
    pub widths: Vec<usize>,
    pub train: TrainConfig,
    pub kkt: KktConfig,
    pub kkt_enabled: bool,
    /// Record validation accuracy after every epoch of every task.
    pub record_curves: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            widths: vec![784, 300, 100, 10],
            train: TrainConfig::default(),
            kkt: KktConfig::default(),
            kkt_enabled: false,
            record_curves: false,
        }
    }
}

/// Validation accuracy of a task's inference mask after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task_id: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub task_id: usize,
    pub mask_secs: f64,
    pub weight_secs: f64,
    pub eval_secs: f64,
}

/// The seed-determined part of a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub matrix: AccuracyMatrix,
    pub average_accuracy: f64,
    /// `None` for single-task runs.
    pub forgetting: Option<f64>,
    pub overlaps: Vec<OverlapReport>,
    pub transfers: Vec<Option<TransferDecision>>,
    pub curves: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub timings: Vec<PhaseTiming>,
    pub config: RunConfig,
}

impl RunReport {
    pub fn mean_sparse_overlap(&self) -> f64 {
        let o = &self.metrics.overlaps;
        if o.is_empty() {
            return 0.0;
        }
        o.iter().map(|r| r.sparse_overlap).sum::<f64>() / o.len() as f64
    }
}

/// A finished run together with the final model and masks.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub model: ModelState,
    pub registry: MaskRegistry,
}

/// Learns `tasks` in order, evaluating every learned task after each one.
pub fn run_continual(dataset: &Dataset, tasks: &[TaskSpec], cfg: &RunConfig) -> Result<RunOutput> {
    cfg.train.validate()?;
    if cfg.kkt_enabled {
        cfg.kkt.validate()?;
    }
    ensure!(!tasks.is_empty(), Domain, "no tasks to learn");
    ensure!(cfg.widths.first() == Some(&dataset.features()), Shape, "input width {:?} vs {} features", cfg.widths.first(), dataset.features());
    let outputs = *cfg.widths.last().unwrap_or(&0);
    for t in tasks {
        ensure!(t.head.end <= outputs, Shape, "task {} head {:?} exceeds {outputs} outputs", t.id, t.head);
    }

    let mut model = init_signed_kaiming(&mlp_specs(&cfg.widths), cfg.train.seed)?;
    let mut registry = MaskRegistry::new();
    let mut matrix = AccuracyMatrix::new();
    let mut overlaps = Vec::new();
    let mut transfers = Vec::new();
    let mut curves = Vec::new();
    let mut timings = Vec::new();

    for (i, spec) in tasks.iter().enumerate() {
        let start = Instant::now();
        let mut mask_done = None;
        let mut hook = |ev: &EpochEvent| -> Result<()> {
            if ev.phase == Phase::Mask && ev.epoch == cfg.train.mask_epochs {
                mask_done = Some(Instant::now());
            }
            if cfg.record_curves && !spec.val.is_empty() {
                let val_accuracy = task_accuracy(ev.model, ev.mask, dataset, spec, &spec.val)?;
                curves.push(CurvePoint { task_id: ev.task_id, phase: ev.phase, epoch: ev.epoch, val_accuracy });
            }
            Ok(())
        };
        let kkt = cfg.kkt_enabled.then_some(&cfg.kkt);
        let outcome = learn_task(&mut model, &mut registry, dataset, spec, &cfg.train, kkt, Some(&mut hook))?;
        let trained = Instant::now();
        let mask_end = mask_done.unwrap_or(trained);

        matrix.push_row(evaluate_row(&model, &registry, dataset, &tasks[..=i])?)?;
        overlaps.push(outcome.overlap);
        transfers.push(outcome.transfer);
        timings.push(PhaseTiming {
            task_id: spec.id,
            mask_secs: (mask_end - start).as_secs_f64(),
            weight_secs: (trained - mask_end).as_secs_f64(),
            eval_secs: trained.elapsed().as_secs_f64(),
        });
    }

    let n = matrix.len();
    let metrics = RunMetrics {
        average_accuracy: average_accuracy(&matrix, n)?,
        forgetting: if n >= 2 { Some(forgetting_metric(&matrix, n)?) } else { None },
        matrix,
        overlaps,
        transfers,
        curves,
    };
    Ok(RunOutput { report: RunReport { metrics, timings, config: cfg.clone() }, model, registry })
}
