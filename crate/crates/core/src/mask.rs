//! Scores, top-k thresholding, straight-through score gradients and the
//! bit-level mask algebra.
//!
//! Bit layout (shared with the checkpoint format): one bit per weight, rows in
//! fan-out-major order, most significant bit first within each byte, each
//! layer zero-padded to a whole byte.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Real-valued scores, one matrix per layer, congruent with the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub layers: Vec<Array2<f32>>,
}

impl ScoreTensor {
    /// Scores drawn uniformly from the open interval (0, 1).
    pub fn uniform<R: Rng + ?Sized>(shapes: &[(usize, usize)], rng: &mut R) -> Self {
        let layers = shapes
            .iter()
            .map(|&(r, c)| Array2::from_shape_simple_fn((r, c), || rng.sample::<f32, _>(Open01)))
            .collect();
        Self { layers }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.dim()).collect()
    }
}

/// One layer of a bit-packed binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl LayerMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![0; (rows * cols).div_ceil(8)] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows * cols {
            m.set_flat(i, true);
        }
        m
    }

    /// Wraps packed bytes. Padding bits past `rows * cols` must be zero.
    pub fn from_bytes(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        let n = rows * cols;
        ensure!(bits.len() == n.div_ceil(8), Format, "expected {} mask bytes, got {}", n.div_ceil(8), bits.len());
        if !n.is_multiple_of(8) {
            let pad = bits[bits.len() - 1] & (0xFF >> (n % 8));
            ensure!(pad == 0, Format, "non-zero padding bits in layer mask");
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn from_bools(rows: usize, cols: usize, values: &[bool]) -> Result<Self> {
        ensure!(values.len() == rows * cols, Shape, "{} values for a {rows}x{cols} mask", values.len());
        let mut m = Self::zeros(rows, cols);
        for (i, &v) in values.iter().enumerate() {
            m.set_flat(i, v);
        }
        Ok(m)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get_flat(i)).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        (self.bits[i >> 3] >> (7 - (i & 7))) & 1 == 1
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.get_flat(row * self.cols + col)
    }

    #[inline]
    pub fn set_flat(&mut self, i: usize, value: bool) {
        let bit = 0x80u8 >> (i & 7);
        if value {
            self.bits[i >> 3] |= bit;
        } else {
            self.bits[i >> 3] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// `weights ⊙ mask`. Masked-out entries are +0.0.
    pub fn apply(&self, weights: ArrayView2<f32>) -> Array2<f32> {
        debug_assert_eq!(weights.dim(), (self.rows, self.cols));
        let mut out = Array2::<f32>::zeros((self.rows, self.cols));
        for ((i, o), &w) in out.iter_mut().enumerate().zip(weights.iter()) {
            if self.get_flat(i) {
                *o = w;
            }
        }
        out
    }

    /// Zeroes every entry of `values` whose mask bit is 0.
    pub fn zero_outside(&self, values: &mut Array2<f32>) {
        debug_assert_eq!(values.dim(), (self.rows, self.cols));
        for (i, v) in values.iter_mut().enumerate() {
            if !self.get_flat(i) {
                *v = 0.0;
            }
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        ensure!(
            self.shape() == other.shape(),
            Shape,
            "mask shapes {:?} and {:?} differ",
            self.shape(),
            other.shape()
        );
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, bits })
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    /// `self ∧ ¬other`. Padding stays zero because `self`'s padding is zero.
    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & !b)
    }
}

/// A per-layer binary mask selecting a subnetwork.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Supermask {
    pub layers: Vec<LayerMask>,
}

impl Supermask {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self { layers: shapes.iter().map(|&(r, c)| LayerMask::zeros(r, c)).collect() }
    }

    pub fn ones(shapes: &[(usize, usize)]) -> Self {
        Self { layers: shapes.iter().map(|&(r, c)| LayerMask::ones(r, c)).collect() }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(LayerMask::shape).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().map(LayerMask::count_ones).sum()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of set bits across all layers.
    pub fn density(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.len() as f64
        }
    }

    fn check_congruent(&self, other: &Self) -> Result<()> {
        ensure!(
            self.layers.len() == other.layers.len(),
            Shape,
            "masks have {} and {} layers",
            self.layers.len(),
            other.layers.len()
        );
        Ok(())
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.check_congruent(other)?;
        let layers = self.layers.iter().zip(&other.layers).map(|(a, b)| a.or(b)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.check_congruent(other)?;
        let layers = self.layers.iter().zip(&other.layers).map(|(a, b)| a.and(b)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.check_congruent(other)?;
        let layers = self.layers.iter().zip(&other.layers).map(|(a, b)| a.and_not(b)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> Result<bool> {
        Ok(self.and_not(other)?.count_ones() == 0)
    }

    pub fn is_disjoint_from(&self, other: &Self) -> Result<bool> {
        Ok(self.and(other)?.count_ones() == 0)
    }
}

/// Number of weights a layer of `n` entries keeps at density `k`.
pub fn keep_count(n: usize, density: f64) -> usize {
    ((density * n as f64).round() as usize).clamp(1, n.max(1))
}

fn check_density(density: f64) -> Result<()> {
    ensure!(density > 0.0 && density <= 1.0, Domain, "mask density must lie in (0, 1], got {density}");
    Ok(())
}

/// Per-layer top-k: exactly `keep_count(n, k)` ones at the largest scores,
/// ties broken by lowest flat index.
pub fn threshold_topk(scores: &ScoreTensor, density: f64) -> Result<Supermask> {
    check_density(density)?;
    let layers = scores.layers.iter().map(|layer| topk_layer(layer.view(), density)).collect::<Result<_>>()?;
    Ok(Supermask { layers })
}

fn topk_layer(scores: ArrayView2<f32>, density: f64) -> Result<LayerMask> {
    let (rows, cols) = scores.dim();
    let n = rows * cols;
    let mut mask = LayerMask::zeros(rows, cols);
    if n == 0 {
        return Ok(mask);
    }
    let keep = keep_count(n, density);
    if keep == n {
        return Ok(LayerMask::ones(rows, cols));
    }
    let flat: Vec<f32> = scores.iter().copied().collect();
    if let Some(i) = flat.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score at flat index {i} is {}", flat[i])));
    }
    // Descending score, ascending index: a strict total order.
    let order = |a: &u32, b: &u32| -> Ordering {
        flat[*b as usize].total_cmp(&flat[*a as usize]).then(a.cmp(b))
    };
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.select_nth_unstable_by(keep - 1, order);
    for &i in &idx[..keep] {
        mask.set_flat(i as usize, true);
    }
    Ok(mask)
}

/// Straight-through score gradient for one connection: `∂L/∂I_v · w_uv · Z_u`.
#[inline]
pub fn ste_score_gradient(upstream: f32, weight: f32, activation: f32) -> f32 {
    upstream * weight * activation
}

/// Batched straight-through score gradient of one layer, summed over the batch.
///
/// `upstream` is `batch × fan_out`, `inputs` is `batch × fan_in` and `weights`
/// is `fan_out × fan_in`. Every position gets a gradient, masked or not.
pub fn ste_layer_gradient(
    upstream: ArrayView2<f32>,
    inputs: ArrayView2<f32>,
    weights: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    ensure!(
        upstream.nrows() == inputs.nrows()
            && weights.dim() == (upstream.ncols(), inputs.ncols()),
        Shape,
        "upstream {:?}, inputs {:?}, weights {:?}",
        upstream.dim(),
        inputs.dim(),
        weights.dim()
    );
    let mut g = upstream.t().dot(&inputs);
    g *= &weights;
    Ok(g)
}

/// `s ← s − α·ĝ` on every layer.
pub fn score_update_step(scores: &mut ScoreTensor, grads: &[Array2<f32>], lr: f32) -> Result<()> {
    ensure!(lr > 0.0, Domain, "learning rate must be positive, got {lr}");
    ensure!(grads.len() == scores.layers.len(), Shape, "{} gradients for {} layers", grads.len(), scores.layers.len());
    for (s, g) in scores.layers.iter_mut().zip(grads) {
        ensure!(s.dim() == g.dim(), Shape, "score {:?} vs gradient {:?}", s.dim(), g.dim());
        s.scaled_add(-lr, g);
    }
    Ok(())
}

/// Bitwise OR of `masks`; the all-zeros mask of `shapes` when empty.
pub fn union_masks(shapes: &[(usize, usize)], masks: &[&Supermask]) -> Result<Supermask> {
    let mut acc = Supermask::zeros(shapes);
    for m in masks {
        ensure!(m.shapes() == shapes, Shape, "mask shapes {:?} differ from {:?}", m.shapes(), shapes);
        acc = acc.or(m)?;
    }
    Ok(acc)
}

/// Bits of `current` not set by any mask in `previous`.
pub fn free_mask(current: &Supermask, previous: &[&Supermask]) -> Result<Supermask> {
    let union = union_masks(&current.shapes(), previous)?;
    current.and_not(&union)
}

/// Fraction of a task's mask already claimed by earlier tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub task_id: usize,
    pub sparse_overlap: f64,
    pub kept: usize,
    pub free: usize,
}

pub fn sparse_overlap(task_id: usize, current: &Supermask, previous: &[&Supermask]) -> Result<OverlapReport> {
    let kept = current.count_ones();
    ensure!(kept > 0, Domain, "sparse overlap of an empty mask is undefined");
    let free = free_mask(current, previous)?.count_ones();
    Ok(OverlapReport { task_id, sparse_overlap: (kept - free) as f64 / kept as f64, kept, free })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRole {
    Task,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub task_id: usize,
    pub role: MaskRole,
    pub mask: Supermask,
}

/// Append-only record of every finished task's task mask and free mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskRegistry {
    entries: Vec<RegistryEntry>,
}

impl MaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a task. The free mask must lie inside the task mask and be
    /// disjoint from every earlier task mask.
    pub fn register(&mut self, task_id: usize, task_mask: Supermask, free: Supermask) -> Result<()> {
        ensure!(!self.contains(task_id), State, "task {task_id} is already registered");
        if let Some(first) = self.entries.first() {
            ensure!(
                first.mask.shapes() == task_mask.shapes(),
                Shape,
                "task {task_id} mask shapes differ from the registry's"
            );
        }
        ensure!(free.is_subset_of(&task_mask)?, State, "free mask of task {task_id} is not inside its task mask");
        let used = self.union_of_task_masks(&task_mask.shapes())?;
        ensure!(free.is_disjoint_from(&used)?, State, "free mask of task {task_id} overlaps earlier tasks");
        self.entries.push(RegistryEntry { task_id, role: MaskRole::Task, mask: task_mask });
        self.entries.push(RegistryEntry { task_id, role: MaskRole::Free, mask: free });
        Ok(())
    }

    pub fn contains(&self, task_id: usize) -> bool {
        self.entries.iter().any(|e| e.task_id == task_id)
    }

    /// Registered task ids in registration order.
    pub fn task_ids(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.role == MaskRole::Task).map(|e| e.task_id).collect()
    }

    pub fn task_count(&self) -> usize {
        self.entries.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    fn find(&self, task_id: usize, role: MaskRole) -> Result<&Supermask> {
        self.entries
            .iter()
            .find(|e| e.task_id == task_id && e.role == role)
            .map(|e| &e.mask)
            .ok_or_else(|| Error::Lookup(format!("no {role:?} mask for task {task_id}")))
    }

    pub fn task_mask(&self, task_id: usize) -> Result<&Supermask> {
        self.find(task_id, MaskRole::Task)
    }

    pub fn free_mask(&self, task_id: usize) -> Result<&Supermask> {
        self.find(task_id, MaskRole::Free)
    }

    pub fn task_masks(&self) -> Vec<&Supermask> {
        self.entries.iter().filter(|e| e.role == MaskRole::Task).map(|e| &e.mask).collect()
    }

    pub fn free_masks(&self) -> Vec<&Supermask> {
        self.entries.iter().filter(|e| e.role == MaskRole::Free).map(|e| &e.mask).collect()
    }

    /// `M_{1:i-1}`: every weight selected by some registered task.
    pub fn union_of_task_masks(&self, shapes: &[(usize, usize)]) -> Result<Supermask> {
        union_masks(shapes, &self.task_masks())
    }
}
