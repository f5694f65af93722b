//! KNN-based transfer-task selection (KKT).
//!
//! A small probe sample of the new task is embedded by every earlier task's
//! subnetwork. Each embedding gets its own KNN classifier; the earlier task
//! whose features classify the probe best seeds the new task's scores, if it
//! beats chance.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::mask::{MaskRegistry, ScoreTensor, Supermask};
use crate::network::{forward_masked, ActivationCache, ModelState};
use crate::training::TaskData;

/// Offset added to scores of transferred mask positions. Base scores lie in
/// (0, 1), so every transferred position outranks every other one.
pub const TRANSFER_OFFSET: f32 = 1.0;

/// Smallest probe sample drawn regardless of `sample_fraction`.
pub const MIN_PROBE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KktConfig {
    pub sample_fraction: f64,
    pub knn_k: usize,
    /// Share of the probe sample used as KNN training points.
    pub train_split: f64,
    pub margin: f64,
}

impl Default for KktConfig {
    fn default() -> Self {
        Self { sample_fraction: 0.05, knn_k: 5, train_split: 0.7, margin: 0.0 }
    }
}

impl KktConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sample_fraction > 0.0 && self.sample_fraction <= 1.0,
            Domain,
            "sample_fraction must lie in (0, 1], got {}",
            self.sample_fraction
        );
        ensure!(self.knn_k >= 1, Domain, "knn_k must be at least 1");
        ensure!(
            self.train_split > 0.0 && self.train_split < 1.0,
            Domain,
            "train_split must lie in (0, 1), got {}",
            self.train_split
        );
        ensure!(self.margin >= 0.0, Domain, "margin must be non-negative");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDecision {
    pub chosen_task: Option<usize>,
    pub probe_accuracies: BTreeMap<usize, f64>,
    pub random_baseline: f64,
}

/// Penultimate activations of `samples` under `mask`.
pub fn features_under_mask(model: &ModelState, mask: &Supermask, samples: ArrayView2<f32>) -> Result<Array2<f32>> {
    let mut cache = ActivationCache::default();
    forward_masked(model, mask, samples, Some(&mut cache))?;
    Ok(cache.inputs.pop().expect("a model has at least one layer"))
}

/// Penultimate activations of `samples` under the registered mask of `task_id`.
pub fn extract_features(
    model: &ModelState,
    registry: &MaskRegistry,
    task_id: usize,
    samples: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    features_under_mask(model, registry.task_mask(task_id)?, samples)
}

/// Majority vote among the `k` nearest training rows (Euclidean). Distance
/// ties go to the lower row index, vote ties to the lower label.
pub fn knn_classify(
    train: ArrayView2<f32>,
    labels: &[usize],
    queries: ArrayView2<f32>,
    k: usize,
) -> Result<Vec<usize>> {
    ensure!(train.nrows() > 0, Domain, "knn needs at least one training row");
    ensure!(train.nrows() == labels.len(), Shape, "{} rows for {} labels", train.nrows(), labels.len());
    ensure!(train.ncols() == queries.ncols(), Shape, "train width {} vs query width {}", train.ncols(), queries.ncols());
    ensure!(k >= 1 && k <= train.nrows(), Domain, "k = {k} with {} training rows", train.nrows());
    let mut out = Vec::with_capacity(queries.nrows());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.nrows());
    for q in queries.axis_iter(Axis(0)) {
        dist.clear();
        for (i, t) in train.axis_iter(Axis(0)).enumerate() {
            let d: f64 = q.iter().zip(t.iter()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            dist.push((d, i));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for &(_, i) in &dist[..k] {
            *votes.entry(labels[i]).or_default() += 1;
        }
        let best = votes.iter().fold((usize::MAX, 0), |acc, (&l, &c)| if c > acc.1 { (l, c) } else { acc });
        out.push(best.0);
    }
    Ok(out)
}

/// Probes every registered task and picks the one whose features best
/// classify a sample of the current task, if it beats chance by `margin`.
pub fn select_transfer_task<R: Rng + ?Sized>(
    model: &ModelState,
    registry: &MaskRegistry,
    data: &TaskData,
    cfg: &KktConfig,
    rng: &mut R,
) -> Result<TransferDecision> {
    cfg.validate()?;
    let random_baseline = 1.0 / data.head.len().max(1) as f64;
    let mut decision = TransferDecision { chosen_task: None, probe_accuracies: BTreeMap::new(), random_baseline };
    if registry.is_empty() || data.len() < 2 {
        return Ok(decision);
    }

    let n = ((data.len() as f64 * cfg.sample_fraction).round() as usize).max(MIN_PROBE).min(data.len());
    let picks = index::sample(rng, data.len(), n).into_vec();
    let n_train = ((n as f64 * cfg.train_split).round() as usize).clamp(1, n - 1);
    let (x_train, y_train) = data.batch(&picks[..n_train]);
    let (x_test, y_test) = data.batch(&picks[n_train..]);
    let k = cfg.knn_k.min(n_train);

    let mut best: Option<(usize, f64)> = None;
    for task_id in registry.task_ids() {
        let f_train = extract_features(model, registry, task_id, x_train.view())?;
        let f_test = extract_features(model, registry, task_id, x_test.view())?;
        let pred = knn_classify(f_train.view(), &y_train, f_test.view(), k)?;
        let hits = pred.iter().zip(&y_test).filter(|(p, y)| p == y).count();
        let acc = hits as f64 / y_test.len() as f64;
        decision.probe_accuracies.insert(task_id, acc);
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((task_id, acc));
        }
    }
    if let Some((task_id, acc)) = best {
        if acc > random_baseline + cfg.margin {
            decision.chosen_task = Some(task_id);
        }
    }
    Ok(decision)
}

/// `base + 1.0` on the positions `mask` keeps, `base` elsewhere.
pub fn scores_from_mask(mask: &Supermask, base: &ScoreTensor) -> Result<ScoreTensor> {
    ensure!(mask.shapes() == base.shapes(), Shape, "mask {:?} vs scores {:?}", mask.shapes(), base.shapes());
    let layers = base
        .layers
        .iter()
        .zip(&mask.layers)
        .map(|(s, m)| {
            let mut out = s.clone();
            for (i, v) in out.iter_mut().enumerate() {
                if m.get_flat(i) {
                    *v += TRANSFER_OFFSET;
                }
            }
            out
        })
        .collect();
    Ok(ScoreTensor { layers })
}
