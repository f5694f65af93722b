//! Supermask learning, exclusive and overlapping weight training, and the
//! per-task procedure that ties them together.
//!
//! For task `i` the procedure is:
//!
//! 1. initialize scores (fresh, or from a transferred mask when KKT is on);
//! 2. learn the supermask `M_i` over the frozen current weights;
//! 3. compute the free mask `F_i = M_i ∧ ¬(M_1 ∨ … ∨ M_{i-1})`;
//! 4. train weights according to the mode (none, `F_i` only, or all of `M_i`);
//! 5. register `(M_i, F_i)`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::harness::TaskSpec;
use crate::kkt::{scores_from_mask, select_transfer_task, KktConfig, TransferDecision};
use crate::mask::{
    free_mask, keep_count, sparse_overlap, ste_layer_gradient, threshold_topk, MaskRegistry, OverlapReport, ScoreTensor,
    Supermask,
};
use crate::network::{backward_masked, backward_upstream, forward_masked, ActivationCache, ModelState};
use crate::optim::{LrSchedule, OptimizerKind, OptimizerState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Masks only; weights stay at their initialization.
    SupSup,
    /// Masks, then training every weight of the task mask.
    SsNet,
    /// Masks, then training only the weights no earlier task selected.
    ExSsNet,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::SupSup, Mode::SsNet, Mode::ExSsNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SupSup => "supsup",
            Mode::SsNet => "ssnet",
            Mode::ExSsNet => "exssnet",
        }
    }

    /// Modes whose finished tasks can never lose accuracy.
    pub fn is_frozen(self) -> bool {
        matches!(self, Mode::SupSup | Mode::ExSsNet)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "supsup" => Ok(Mode::SupSup),
            "ssnet" => Ok(Mode::SsNet),
            "exssnet" => Ok(Mode::ExSsNet),
            other => Err(format!("unknown mode `{other}` (expected supsup, ssnet or exssnet)")),
        }
    }
}

/// Which mask the exclusive weight-training forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainForwardMask {
    /// `W ⊙ F_i`: weights shared with earlier tasks are dropped while training.
    Free,
    /// `W ⊙ M_i`: the inference mask; gradients still restricted to `F_i`.
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mask_density: f64,
    pub mask_epochs: usize,
    pub weight_epochs: usize,
    /// Weight-training learning rate.
    pub lr: f64,
    /// Score learning rate.
    pub score_lr: f64,
    pub batch_size: usize,
    /// Weight-training optimizer.
    pub optimizer: OptimizerKind,
    pub score_optimizer: OptimizerKind,
    /// Momentum used whenever an optimizer is `sgd`.
    pub momentum: f32,
    pub lr_schedule: LrSchedule,
    pub mode: Mode,
    pub seed: u64,
    pub train_forward_mask: TrainForwardMask,
    /// Fraction of each layer's keep budget pinned onto weights earlier tasks
    /// already use, before mask learning starts.
    pub forced_overlap: f64,
    /// Diagnostic: run exclusive weight training with empty free masks.
    pub empty_free_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_density: 0.1,
            mask_epochs: 5,
            weight_epochs: 5,
            lr: 1e-3,
            score_lr: 1.0,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            score_optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            lr_schedule: LrSchedule::Cosine,
            mode: Mode::ExSsNet,
            seed: 0,
            train_forward_mask: TrainForwardMask::Free,
            forced_overlap: 0.0,
            empty_free_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.mask_density > 0.0 && self.mask_density <= 1.0,
            Domain,
            "mask_density must lie in (0, 1], got {}",
            self.mask_density
        );
        ensure!(self.lr > 0.0 && self.score_lr > 0.0, Domain, "learning rates must be positive");
        ensure!(self.batch_size >= 1, Domain, "batch_size must be at least 1");
        ensure!(
            (0.0..=1.0).contains(&self.forced_overlap),
            Domain,
            "forced_overlap must lie in [0, 1], got {}",
            self.forced_overlap
        );
        ensure!((0.0..1.0).contains(&self.momentum), Domain, "momentum must lie in [0, 1)");
        Ok(())
    }
}

/// Training samples of one task with their output-layer targets.
#[derive(Debug, Clone)]
pub struct TaskData<'a> {
    pub inputs: &'a Array2<f32>,
    pub indices: Vec<usize>,
    /// Output index (inside `head`) for each entry of `indices`.
    pub targets: Vec<usize>,
    pub head: Range<usize>,
}

impl<'a> TaskData<'a> {
    pub fn new(dataset: &'a Dataset, spec: &TaskSpec, indices: &[usize]) -> Result<Self> {
        let targets = indices.iter().map(|&i| spec.target(dataset.labels[i])).collect::<Result<_>>()?;
        Ok(Self { inputs: &dataset.inputs, indices: indices.to_vec(), targets, head: spec.head.clone() })
    }

    pub fn train(dataset: &'a Dataset, spec: &TaskSpec) -> Result<Self> {
        Self::new(dataset, spec, &spec.train)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch(&self, positions: &[usize]) -> (Array2<f32>, Vec<usize>) {
        let rows: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        (self.inputs.select(Axis(0), &rows), positions.iter().map(|&p| self.targets[p]).collect())
    }
}

/// Mean softmax cross-entropy over the head slice and its gradient with
/// respect to all logits (zero outside the slice).
pub fn cross_entropy_grad(logits: ArrayView2<f32>, targets: &[usize], head: Range<usize>) -> Result<(f32, Array2<f32>)> {
    ensure!(logits.nrows() == targets.len(), Shape, "{} logit rows for {} targets", logits.nrows(), targets.len());
    ensure!(!head.is_empty() && head.end <= logits.ncols(), Shape, "head {head:?} outside {} outputs", logits.ncols());
    if let Some(t) = targets.iter().find(|t| !head.contains(t)) {
        return Err(crate::Error::Domain(format!("target {t} outside head {head:?}")));
    }
    let n = targets.len().max(1) as f32;
    let mut grad = Array2::<f32>::zeros(logits.dim());
    let mut loss = 0.0f32;
    for (b, &t) in targets.iter().enumerate() {
        let row = logits.row(b);
        let max = head.clone().map(|j| row[j]).fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = head.clone().map(|j| (row[j] - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[t];
        for j in head.clone() {
            let p = (row[j] - log_sum).exp();
            grad[[b, j]] = (p - if j == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mask,
    Weights,
}

/// State visible to an epoch observer. `mask` is the task's inference mask
/// at that point.
pub struct EpochEvent<'a> {
    pub task_id: usize,
    pub phase: Phase,
    /// 0 before the first mask epoch, then counted per phase from 1.
    pub epoch: usize,
    pub model: &'a ModelState,
    pub mask: &'a Supermask,
}

pub type EpochHook<'h> = &'h mut dyn FnMut(&EpochEvent) -> Result<()>;

fn reborrow<'s>(hook: &'s mut Option<EpochHook<'_>>) -> Option<EpochHook<'s>> {
    match hook {
        Some(h) => Some(&mut **h),
        None => None,
    }
}

fn batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Learns a supermask over the frozen weights with straight-through score
/// gradients. Returns the final mask and the last epoch's mean loss.
pub fn learn_supermask(
    model: &ModelState,
    data: &TaskData,
    cfg: &TrainConfig,
    score_init: ScoreTensor,
    task_id: usize,
    mut hook: Option<EpochHook>,
) -> Result<(Supermask, f32)> {
    ensure!(!data.is_empty(), Domain, "task {task_id} has no training data");
    ensure!(score_init.shapes() == model.shapes(), Shape, "score shapes do not match the model");
    let mut scores = score_init;
    let mut mask = threshold_topk(&scores, cfg.mask_density)?;
    if let Some(h) = hook.as_deref_mut() {
        h(&EpochEvent { task_id, phase: Phase::Mask, epoch: 0, model, mask: &mask })?;
    }
    if cfg.mask_density >= 1.0 || cfg.mask_epochs == 0 {
        return Ok((mask, f32::NAN));
    }

    let mut rng = rng::stream(cfg.seed, &[rng::MASK_SHUFFLE, task_id as u64]);
    let mut opt = OptimizerState::new(cfg.score_optimizer, &model.shapes(), cfg.momentum);
    let per_epoch = batches(data.len(), cfg.batch_size);
    let total = cfg.mask_epochs * per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cache = ActivationCache::default();
    let mut step = 0;
    let mut last_loss = f32::NAN;
    for epoch in 1..=cfg.mask_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let logits = forward_masked(model, &mask, x.view(), Some(&mut cache))?;
            let (loss, grad) = cross_entropy_grad(logits.view(), &y, data.head.clone())?;
            loss_sum += loss as f64 * chunk.len() as f64;
            let upstream = backward_upstream(model, &cache, grad.view())?;
            let grads = upstream
                .iter()
                .zip(&cache.inputs)
                .zip(model.weights())
                .map(|((d, z), w)| ste_layer_gradient(d.view(), z.view(), w.view()))
                .collect::<Result<Vec<_>>>()?;
            let lr = cfg.lr_schedule.lr(cfg.score_lr, step, total)? as f32;
            if lr > 0.0 {
                opt.update(&mut scores.layers, &grads, lr)?;
            }
            mask = threshold_topk(&scores, cfg.mask_density)?;
            step += 1;
        }
        last_loss = (loss_sum / data.len() as f64) as f32;
        if let Some(h) = hook.as_deref_mut() {
            h(&EpochEvent { task_id, phase: Phase::Mask, epoch, model, mask: &mask })?;
        }
    }
    Ok((mask, last_loss))
}

/// Shared weight-training loop: forward under `forward_mask`, gradients kept
/// only where `grad_mask` is set. Nothing runs when `grad_mask` is empty.
#[allow(clippy::too_many_arguments)]
fn train_weights(
    model: &mut ModelState,
    task_mask: &Supermask,
    forward_mask: &Supermask,
    grad_mask: &Supermask,
    data: &TaskData,
    cfg: &TrainConfig,
    task_id: usize,
    mut hook: Option<EpochHook>,
) -> Result<f32> {
    ensure!(
        task_mask.shapes() == model.shapes() && grad_mask.shapes() == model.shapes(),
        Shape,
        "mask shapes do not match the model"
    );
    if cfg.weight_epochs == 0 || data.is_empty() || grad_mask.count_ones() == 0 {
        return Ok(f32::NAN);
    }
    let mut rng = rng::stream(cfg.seed, &[rng::WEIGHT_SHUFFLE, task_id as u64]);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.shapes(), cfg.momentum);
    let per_epoch = batches(data.len(), cfg.batch_size);
    let total = cfg.weight_epochs * per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cache = ActivationCache::default();
    let mut step = 0;
    let mut last_loss = f32::NAN;
    for epoch in 1..=cfg.weight_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let logits = forward_masked(model, forward_mask, x.view(), Some(&mut cache))?;
            let (loss, grad) = cross_entropy_grad(logits.view(), &y, data.head.clone())?;
            loss_sum += loss as f64 * chunk.len() as f64;
            let grads = backward_masked(model, grad_mask, &cache, grad.view())?;
            let lr = cfg.lr_schedule.lr(cfg.lr, step, total)? as f32;
            if lr > 0.0 {
                opt.update(model.weights_mut(), &grads.weights, lr)?;
            }
            step += 1;
        }
        last_loss = (loss_sum / data.len() as f64) as f32;
        if let Some(h) = hook.as_deref_mut() {
            h(&EpochEvent { task_id, phase: Phase::Weights, epoch, model, mask: task_mask })?;
        }
    }
    Ok(last_loss)
}

/// Trains only the weights selected by `free` (which must lie inside
/// `task_mask`). Every other weight is left bitwise unchanged.
pub fn train_exclusive_weights(
    model: &mut ModelState,
    task_mask: &Supermask,
    free: &Supermask,
    data: &TaskData,
    cfg: &TrainConfig,
    task_id: usize,
    hook: Option<EpochHook>,
) -> Result<f32> {
    ensure!(free.shapes() == task_mask.shapes(), Shape, "free and task masks differ in shape");
    ensure!(free.is_subset_of(task_mask)?, State, "free mask is not contained in the task mask");
    let forward_mask = match cfg.train_forward_mask {
        TrainForwardMask::Free => free,
        TrainForwardMask::Task => task_mask,
    };
    train_weights(model, task_mask, forward_mask, free, data, cfg, task_id, hook)
}

/// Trains every weight of `task_mask`, including weights earlier tasks use.
pub fn train_overlapping_weights(
    model: &mut ModelState,
    task_mask: &Supermask,
    data: &TaskData,
    cfg: &TrainConfig,
    task_id: usize,
    hook: Option<EpochHook>,
) -> Result<f32> {
    train_weights(model, task_mask, task_mask, task_mask, data, cfg, task_id, hook)
}

/// Adds 1.0 to the scores of `round(fraction · keep)` randomly chosen
/// positions per layer among those `used` already selects.
pub fn pin_overlap<R: Rng + ?Sized>(
    scores: &mut ScoreTensor,
    used: &Supermask,
    fraction: f64,
    density: f64,
    rng: &mut R,
) -> Result<()> {
    ensure!(scores.shapes() == used.shapes(), Shape, "score and mask shapes differ");
    for (s, m) in scores.layers.iter_mut().zip(&used.layers) {
        let candidates: Vec<usize> = (0..m.len()).filter(|&i| m.get_flat(i)).collect();
        let want = (fraction * keep_count(m.len(), density) as f64).round() as usize;
        let n = want.min(candidates.len());
        let flat = s.as_slice_mut().expect("score tensors are contiguous");
        for pick in index::sample(rng, candidates.len(), n) {
            flat[candidates[pick]] += 1.0;
        }
    }
    Ok(())
}

/// Everything one task produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub task_id: usize,
    pub task_mask: Supermask,
    pub free_mask: Supermask,
    pub overlap: OverlapReport,
    pub mask_loss: f32,
    pub weight_loss: f32,
    pub mask_epochs: usize,
    pub weight_epochs: usize,
    pub transfer: Option<TransferDecision>,
}

/// Learns one task end to end and registers its masks.
pub fn learn_task(
    model: &mut ModelState,
    registry: &mut MaskRegistry,
    dataset: &Dataset,
    spec: &TaskSpec,
    cfg: &TrainConfig,
    kkt: Option<&KktConfig>,
    mut hook: Option<EpochHook>,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    let task_id = spec.id;
    ensure!(!registry.contains(task_id), State, "task {task_id} was already learned");
    let data = TaskData::train(dataset, spec)?;
    let shapes = model.shapes();

    let mut scores = ScoreTensor::uniform(&shapes, &mut rng::stream(cfg.seed, &[rng::SCORES, task_id as u64]));
    let transfer = match kkt {
        Some(k) => {
            let mut probe_rng = rng::stream(cfg.seed, &[rng::KKT_PROBE, task_id as u64]);
            let decision = select_transfer_task(model, registry, &data, k, &mut probe_rng)?;
            if let Some(src) = decision.chosen_task {
                scores = scores_from_mask(registry.task_mask(src)?, &scores)?;
            }
            Some(decision)
        }
        None => None,
    };
    if cfg.forced_overlap > 0.0 && !registry.is_empty() {
        let used = registry.union_of_task_masks(&shapes)?;
        let mut pin_rng = rng::stream(cfg.seed, &[rng::PIN, task_id as u64]);
        pin_overlap(&mut scores, &used, cfg.forced_overlap, cfg.mask_density, &mut pin_rng)?;
    }

    let (task_mask, mask_loss) = learn_supermask(model, &data, cfg, scores, task_id, reborrow(&mut hook))?;
    let previous = registry.task_masks();
    let free = free_mask(&task_mask, &previous)?;
    let overlap = sparse_overlap(task_id, &task_mask, &previous)?;

    let weight_loss = match cfg.mode {
        Mode::SupSup => f32::NAN,
        Mode::ExSsNet => {
            let train_free = if cfg.empty_free_masks { Supermask::zeros(&shapes) } else { free.clone() };
            train_exclusive_weights(model, &task_mask, &train_free, &data, cfg, task_id, hook)?
        }
        Mode::SsNet => train_overlapping_weights(model, &task_mask, &data, cfg, task_id, hook)?,
    };

    registry.register(task_id, task_mask.clone(), free.clone())?;
    Ok(TaskOutcome {
        task_id,
        task_mask,
        free_mask: free,
        overlap,
        mask_loss,
        weight_loss,
        mask_epochs: cfg.mask_epochs,
        weight_epochs: if cfg.mode == Mode::SupSup { 0 } else { cfg.weight_epochs },
        transfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian_tasks, SynthConfig};
    use crate::network::{init_signed_kaiming, mlp_specs, predict_task};
    use ndarray::array;

    #[test]
    fn cross_entropy_closed_form() {
        let (loss, g) = cross_entropy_grad(array![[0.0f32, 0.0]].view(), &[0], 0..2).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((g[[0, 0]] + 0.5).abs() < 1e-7 && (g[[0, 1]] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_slice_only() {
        let logits = array![[3.0f32, 0.5, -1.0, 2.0], [0.0, 1.0, 2.0, 9.0]];
        let (_, g) = cross_entropy_grad(logits.view(), &[1, 2], 1..3).unwrap();
        for b in 0..2 {
            assert_eq!(g[[b, 0]], 0.0);
            assert_eq!(g[[b, 3]], 0.0);
            assert!((g[[b, 1]] + g[[b, 2]]).abs() < 1e-7);
        }
        assert!(cross_entropy_grad(logits.view(), &[0, 2], 1..3).is_err());
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let losses: Vec<f32> = [1.0f32, 5.0, 20.0]
            .iter()
            .map(|&m| cross_entropy_grad(array![[m, 0.0]].view(), &[0], 0..2).unwrap().0)
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2] && losses[2] < 1e-6);
    }

    fn toy() -> (Dataset, Vec<TaskSpec>) {
        synth_gaussian_tasks(&SynthConfig {
            n_tasks: 2,
            classes_per_task: 2,
            dim: 8,
            separation: 6.0,
            train_per_class: 150,
            test_per_class: 50,
            duplicate: None,
            clusters_per_class: 1,
            seed: 11,
        })
        .unwrap()
    }

    fn accuracy(model: &ModelState, mask: &Supermask, d: &Dataset, spec: &TaskSpec, idx: &[usize]) -> f64 {
        let x = d.inputs.select(Axis(0), idx);
        let pred = predict_task(model, mask, x.view(), spec.head.clone()).unwrap();
        let ok = idx.iter().zip(&pred).filter(|(&i, &p)| spec.target(d.labels[i]).unwrap() == p).count();
        ok as f64 / idx.len() as f64
    }

    #[test]
    fn supermask_learning_freezes_weights_and_learns() {
        let (d, tasks) = toy();
        let model = init_signed_kaiming(&mlp_specs(&[8, 64, 4]), 3).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { mask_epochs: 10, ..Default::default() };
        let data = TaskData::train(&d, &tasks[0]).unwrap();
        let scores = ScoreTensor::uniform(&model.shapes(), &mut rng::stream(1, &[0]));
        let (mask, _) = learn_supermask(&model, &data, &cfg, scores, 0, None).unwrap();
        assert_eq!(model, before);
        let acc = accuracy(&model, &mask, &d, &tasks[0], &tasks[0].train);
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn full_density_gives_all_ones() {
        let (d, tasks) = toy();
        let model = init_signed_kaiming(&mlp_specs(&[8, 16, 4]), 3).unwrap();
        let cfg = TrainConfig { mask_density: 1.0, ..Default::default() };
        let data = TaskData::train(&d, &tasks[0]).unwrap();
        let scores = ScoreTensor::uniform(&model.shapes(), &mut rng::stream(1, &[0]));
        let (mask, _) = learn_supermask(&model, &data, &cfg, scores, 0, None).unwrap();
        assert_eq!(mask, Supermask::ones(&model.shapes()));
    }

    #[test]
    fn empty_task_is_rejected() {
        let (d, mut tasks) = toy();
        tasks[0].train.clear();
        let model = init_signed_kaiming(&mlp_specs(&[8, 16, 4]), 3).unwrap();
        let data = TaskData::train(&d, &tasks[0]).unwrap();
        let scores = ScoreTensor::uniform(&model.shapes(), &mut rng::stream(1, &[0]));
        assert!(learn_supermask(&model, &data, &TrainConfig::default(), scores, 0, None).is_err());
    }

    #[test]
    fn exclusive_training_only_moves_free_weights() {
        let (d, tasks) = toy();
        let mut model = init_signed_kaiming(&mlp_specs(&[8, 32, 4]), 5).unwrap();
        let shapes = model.shapes();
        let m = threshold_topk(&ScoreTensor::uniform(&shapes, &mut rng::stream(2, &[0])), 0.3).unwrap();
        let prev = threshold_topk(&ScoreTensor::uniform(&shapes, &mut rng::stream(3, &[0])), 0.3).unwrap();
        let f = free_mask(&m, &[&prev]).unwrap();
        let data = TaskData::train(&d, &tasks[0]).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { weight_epochs: 5, ..Default::default() };
        let first = {
            let mut probe = model.clone();
            let one = TrainConfig { weight_epochs: 1, lr_schedule: LrSchedule::Constant, lr: 1e-9, ..cfg.clone() };
            train_exclusive_weights(&mut probe, &m, &f, &data, &one, 0, None).unwrap()
        };
        let last = train_exclusive_weights(&mut model, &m, &f, &data, &cfg, 0, None).unwrap();
        assert!(last < first, "loss {first} -> {last}");
        let mut moved = 0;
        for ((a, b), fl) in model.weights().iter().zip(before.weights()).zip(&f.layers) {
            for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
                if fl.get_flat(i) {
                    moved += usize::from(x != y);
                } else {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn empty_free_mask_leaves_model_unchanged() {
        let (d, tasks) = toy();
        let mut model = init_signed_kaiming(&mlp_specs(&[8, 16, 4]), 5).unwrap();
        let before = model.clone();
        let m = Supermask::ones(&model.shapes());
        let data = TaskData::train(&d, &tasks[0]).unwrap();
        let cfg = TrainConfig { weight_epochs: 2, train_forward_mask: TrainForwardMask::Task, ..Default::default() };
        train_exclusive_weights(&mut model, &m, &Supermask::zeros(&m.shapes()), &data, &cfg, 0, None).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn overlapping_training_rewrites_shared_weights() {
        let (d, tasks) = toy();
        let mut model = init_signed_kaiming(&mlp_specs(&[8, 32, 4]), 5).unwrap();
        let shapes = model.shapes();
        let m = threshold_topk(&ScoreTensor::uniform(&shapes, &mut rng::stream(2, &[0])), 0.3).unwrap();
        let prev = threshold_topk(&ScoreTensor::uniform(&shapes, &mut rng::stream(3, &[0])), 0.3).unwrap();
        let shared = m.and(&prev).unwrap();
        assert!(shared.count_ones() > 0);
        let before = model.clone();
        let data = TaskData::train(&d, &tasks[0]).unwrap();
        train_overlapping_weights(&mut model, &m, &data, &TrainConfig::default(), 0, None).unwrap();
        let mut shared_moved = 0;
        for (((a, b), ml), sl) in model.weights().iter().zip(before.weights()).zip(&m.layers).zip(&shared.layers) {
            for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
                if !ml.get_flat(i) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
                if sl.get_flat(i) && x != y {
                    shared_moved += 1;
                }
            }
        }
        assert!(shared_moved > 0);
    }

    #[test]
    fn learn_task_registers_and_is_deterministic() {
        let (d, tasks) = toy();
        let specs = mlp_specs(&[8, 32, 4]);
        let cfg = TrainConfig { mask_epochs: 3, weight_epochs: 2, ..Default::default() };
        let run = || {
            let mut model = init_signed_kaiming(&specs, 1).unwrap();
            let mut reg = MaskRegistry::new();
            let outs: Vec<TaskOutcome> = tasks
                .iter()
                .map(|t| learn_task(&mut model, &mut reg, &d, t, &cfg, None, None).unwrap())
                .collect();
            (model, reg, outs)
        };
        let (m1, r1, o1) = run();
        let (m2, r2, o2) = run();
        assert_eq!(r1.task_count(), 2);
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        assert_eq!(o1, o2);

        let mut model = m1;
        let mut reg = r1;
        assert!(matches!(
            learn_task(&mut model, &mut reg, &d, &tasks[0], &cfg, None, None),
            Err(crate::Error::State(_))
        ));
    }

    #[test]
    fn pinning_forces_overlap() {
        let shapes = [(10, 20)];
        let mut scores = ScoreTensor::uniform(&shapes, &mut rng::stream(4, &[0]));
        let used = threshold_topk(&ScoreTensor::uniform(&shapes, &mut rng::stream(5, &[0])), 0.3).unwrap();
        pin_overlap(&mut scores, &used, 1.0, 0.1, &mut rng::stream(6, &[0])).unwrap();
        let m = threshold_topk(&scores, 0.1).unwrap();
        assert!(m.is_subset_of(&used).unwrap());
        assert_eq!(sparse_overlap(1, &m, &[&used]).unwrap().sparse_overlap, 1.0);
    }
}
