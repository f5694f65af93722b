//! Dense MLP with per-layer binary masks and zero biases.
//!
//! Weights are `fan_out × fan_in` row-major matrices, so a layer computes
//! `I = Z_prev · (W ⊙ M)ᵀ` on a `batch × fan_in` input.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mask::Supermask;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, pre: f32) -> f32 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self { fan_in, fan_out, activation }
    }
}

/// Relu hidden layers and an identity output layer for widths
/// `[input, hidden.., output]`.
pub fn mlp_specs(widths: &[usize]) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
            LayerSpec::new(widths[i], widths[i + 1], act)
        })
        .collect()
}

pub type WeightTensor = Array2<f32>;

/// The shared weights `W` every task reads and (exclusively) writes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    specs: Vec<LayerSpec>,
    weights: Vec<WeightTensor>,
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    ensure!(!specs.is_empty(), Shape, "a model needs at least one layer");
    for (i, s) in specs.iter().enumerate() {
        ensure!(s.fan_in >= 1 && s.fan_out >= 1, Shape, "layer {i} has an empty side: {s:?}");
    }
    for (i, pair) in specs.windows(2).enumerate() {
        ensure!(
            pair[0].fan_out == pair[1].fan_in,
            Shape,
            "layer {i} emits {} features but layer {} expects {}",
            pair[0].fan_out,
            i + 1,
            pair[1].fan_in
        );
    }
    ensure!(
        specs.last().map(|s| s.activation) == Some(Activation::Identity),
        Shape,
        "the output layer must use the identity activation"
    );
    Ok(())
}

impl ModelState {
    pub fn new(specs: Vec<LayerSpec>, weights: Vec<WeightTensor>) -> Result<Self> {
        validate_specs(&specs)?;
        ensure!(specs.len() == weights.len(), Shape, "{} specs for {} weight tensors", specs.len(), weights.len());
        for (i, (s, w)) in specs.iter().zip(&weights).enumerate() {
            ensure!(w.dim() == (s.fan_out, s.fan_in), Shape, "layer {i} weights {:?} vs spec {s:?}", w.dim());
            ensure!(w.iter().all(|x| x.is_finite()), Numeric, "layer {i} holds non-finite weights");
        }
        Ok(Self { specs, weights })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn weights(&self) -> &[WeightTensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [WeightTensor] {
        &mut self.weights
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.weights.iter().map(|w| w.dim()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn input_width(&self) -> usize {
        self.specs[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.specs[self.specs.len() - 1].fan_out
    }

    /// Width of the last hidden layer (the input width for a 1-layer model).
    pub fn feature_width(&self) -> usize {
        self.specs[self.specs.len() - 1].fan_in
    }
}

/// Every weight is `±sqrt(2 / fan_in)` with a uniformly random sign.
pub fn init_signed_kaiming(specs: &[LayerSpec], seed: u64) -> Result<ModelState> {
    validate_specs(specs)?;
    let mut rng = rng::stream(seed, &[rng::INIT]);
    let weights = specs
        .iter()
        .map(|s| {
            let c = (2.0f32 / s.fan_in as f32).sqrt();
            Array2::from_shape_simple_fn((s.fan_out, s.fan_in), || if rng.random::<bool>() { c } else { -c })
        })
        .collect();
    ModelState::new(specs.to_vec(), weights)
}

/// Per-layer values recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    /// `inputs[l]` is the layer-`l` input `Z` (the batch itself for `l = 0`).
    pub inputs: Vec<Array2<f32>>,
    /// `pre[l]` is the layer-`l` pre-activation `I`.
    pub pre: Vec<Array2<f32>>,
    /// `W ⊙ M` per layer as used by the forward pass.
    pub effective: Vec<Array2<f32>>,
}

impl ActivationCache {
    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }
}

fn check_masks(model: &ModelState, masks: &Supermask) -> Result<()> {
    ensure!(
        masks.shapes() == model.shapes(),
        Shape,
        "mask shapes {:?} do not match weights {:?}",
        masks.shapes(),
        model.shapes()
    );
    Ok(())
}

fn check_batch(model: &ModelState, batch: ArrayView2<f32>) -> Result<()> {
    ensure!(
        batch.ncols() == model.input_width(),
        Shape,
        "batch has {} features, model expects {}",
        batch.ncols(),
        model.input_width()
    );
    if batch.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("batch contains non-finite inputs".into()));
    }
    Ok(())
}

fn run_layers(
    model: &ModelState,
    effective: Vec<Array2<f32>>,
    batch: ArrayView2<f32>,
    cache: Option<&mut ActivationCache>,
) -> Array2<f32> {
    let n = model.specs.len();
    let mut z = batch.to_owned();
    let mut inputs = Vec::with_capacity(n);
    let mut pres = Vec::with_capacity(n);
    for (spec, w) in model.specs.iter().zip(&effective) {
        let pre = z.dot(&w.t());
        let out = pre.mapv(|x| spec.activation.apply(x));
        if cache.is_some() {
            inputs.push(std::mem::replace(&mut z, out));
            pres.push(pre);
        } else {
            z = out;
        }
    }
    if let Some(c) = cache {
        c.inputs = inputs;
        c.pre = pres;
        c.effective = effective;
    }
    z
}

/// Forward pass with every weight multiplied by its mask bit. Returns logits.
pub fn forward_masked(
    model: &ModelState,
    masks: &Supermask,
    batch: ArrayView2<f32>,
    cache: Option<&mut ActivationCache>,
) -> Result<Array2<f32>> {
    check_masks(model, masks)?;
    check_batch(model, batch)?;
    let effective = masks.layers.iter().zip(&model.weights).map(|(m, w)| m.apply(w.view())).collect();
    Ok(run_layers(model, effective, batch, cache))
}

/// Unmasked forward pass on the same arithmetic path as [`forward_masked`].
pub fn forward(model: &ModelState, batch: ArrayView2<f32>, cache: Option<&mut ActivationCache>) -> Result<Array2<f32>> {
    check_batch(model, batch)?;
    Ok(run_layers(model, model.weights.clone(), batch, cache))
}

/// Gradients produced by [`backward_masked`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `∂L/∂W` per layer, zero wherever the gradient mask is zero.
    pub weights: Vec<Array2<f32>>,
    /// `∂L/∂I` per layer (`batch × fan_out`).
    pub upstream: Vec<Array2<f32>>,
}

/// Propagates `∂L/∂I` of the last layer back through the cached pass.
pub fn backward_upstream(model: &ModelState, cache: &ActivationCache, loss_grad: ArrayView2<f32>) -> Result<Vec<Array2<f32>>> {
    let n = model.specs.len();
    ensure!(!cache.is_empty() && cache.pre.len() == n, State, "backward needs the cache of a forward pass");
    ensure!(
        loss_grad.dim() == cache.pre[n - 1].dim(),
        Shape,
        "loss gradient {:?} vs logits {:?}",
        loss_grad.dim(),
        cache.pre[n - 1].dim()
    );
    let mut upstream = vec![Array2::zeros((0, 0)); n];
    let mut d = loss_grad.to_owned();
    for l in (0..n).rev() {
        if l > 0 {
            let mut prev = d.dot(&cache.effective[l]);
            let act = model.specs[l - 1].activation;
            Zip::from(&mut prev).and(&cache.pre[l - 1]).for_each(|g, &p| *g *= act.derivative(p));
            upstream[l] = std::mem::replace(&mut d, prev);
        } else {
            upstream[0] = std::mem::take(&mut d);
        }
    }
    Ok(upstream)
}

/// Backward pass through a cached masked forward pass. Weight gradients are
/// zeroed wherever `masks` is zero.
pub fn backward_masked(
    model: &ModelState,
    masks: &Supermask,
    cache: &ActivationCache,
    loss_grad: ArrayView2<f32>,
) -> Result<Gradients> {
    check_masks(model, masks)?;
    let upstream = backward_upstream(model, cache, loss_grad)?;
    let weights = upstream
        .iter()
        .zip(&cache.inputs)
        .zip(&masks.layers)
        .map(|((d, z), m)| {
            let mut g = d.t().dot(z);
            m.zero_outside(&mut g);
            g
        })
        .collect();
    Ok(Gradients { weights, upstream })
}

/// Index of the largest logit inside `head` for each row; ties go to the
/// lowest index. Returned labels are output indices within `head`.
pub fn argmax_in_range(logits: ArrayView2<f32>, head: Range<usize>) -> Result<Vec<usize>> {
    ensure!(
        !head.is_empty() && head.end <= logits.ncols(),
        Lookup,
        "head range {head:?} does not fit {} outputs",
        logits.ncols()
    );
    Ok(logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = head.start;
            for j in head.clone() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Task-incremental prediction: forward under the task's mask, then argmax
/// restricted to the task's output slice.
pub fn predict_task(model: &ModelState, mask: &Supermask, batch: ArrayView2<f32>, head: Range<usize>) -> Result<Vec<usize>> {
    let logits = forward_masked(model, mask, batch, None)?;
    argmax_in_range(logits.view(), head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::LayerMask;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> ModelState {
        let specs = vec![LayerSpec::new(2, 2, Activation::Relu), LayerSpec::new(2, 1, Activation::Identity)];
        ModelState::new(specs, vec![array![[1.0, -2.0], [0.5, 3.0]], array![[2.0, -1.0]]]).unwrap()
    }

    #[test]
    fn signed_kaiming_magnitude() {
        let specs = mlp_specs(&[8, 4, 3]);
        let m = init_signed_kaiming(&specs, 1).unwrap();
        assert!(m.weights()[0].iter().all(|&w| w == 0.5 || w == -0.5));
        let c = (2.0f32 / 4.0).sqrt();
        assert!(m.weights()[1].iter().all(|&w| w == c || w == -c));
    }

    #[test]
    fn signed_kaiming_is_deterministic_and_balanced() {
        let specs = mlp_specs(&[100, 100, 2]);
        let a = init_signed_kaiming(&specs, 42).unwrap();
        let b = init_signed_kaiming(&specs, 42).unwrap();
        assert_eq!(a, b);
        let pos = a.weights()[0].iter().filter(|&&w| w > 0.0).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&pos), "positive fraction {pos}");
    }

    #[test]
    fn init_rejects_non_composable_shapes() {
        let specs = vec![LayerSpec::new(4, 3, Activation::Relu), LayerSpec::new(2, 2, Activation::Identity)];
        assert!(matches!(init_signed_kaiming(&specs, 0), Err(Error::Shape(_))));
        let specs = vec![LayerSpec::new(4, 3, Activation::Relu)];
        assert!(matches!(init_signed_kaiming(&specs, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_computed_forward() {
        // x = [1, 2]; mask drops w[0][1] and w_out[0][1]
        // hidden pre = [1*1 + 0, 0.5*1 + 3*2] = [1, 6.5] -> relu [1, 6.5]
        // logit = 2*1 + 0 = 2
        let m = tiny();
        let masks = Supermask {
            layers: vec![
                LayerMask::from_bools(2, 2, &[true, false, true, true]).unwrap(),
                LayerMask::from_bools(1, 2, &[true, false]).unwrap(),
            ],
        };
        let out = forward_masked(&m, &masks, array![[1.0f32, 2.0]].view(), None).unwrap();
        assert_eq!(out, array![[2.0f32]]);
    }

    #[test]
    fn identity_and_zero_masks() {
        let m = init_signed_kaiming(&mlp_specs(&[5, 7, 3]), 3).unwrap();
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i as f32 - j as f32) * 0.3);
        let ones = forward_masked(&m, &Supermask::ones(&m.shapes()), x.view(), None).unwrap();
        let plain = forward(&m, x.view(), None).unwrap();
        assert_eq!(ones, plain);
        let zeros = forward_masked(&m, &Supermask::zeros(&m.shapes()), x.view(), None).unwrap();
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = tiny();
        let ones = Supermask::ones(&m.shapes());
        assert!(matches!(forward_masked(&m, &ones, array![[1.0f32, 2.0, 3.0]].view(), None), Err(Error::Shape(_))));
        assert!(matches!(forward_masked(&m, &ones, array![[f32::NAN, 2.0]].view(), None), Err(Error::Numeric(_))));
        let bad = Supermask::ones(&[(2, 2)]);
        assert!(matches!(forward_masked(&m, &bad, array![[1.0f32, 2.0]].view(), None), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_needs_a_cache() {
        let m = tiny();
        let ones = Supermask::ones(&m.shapes());
        let empty = ActivationCache::default();
        assert!(matches!(backward_masked(&m, &ones, &empty, array![[1.0f32]].view()), Err(Error::State(_))));
    }

    #[test]
    fn single_layer_squared_loss_gradient() {
        // L = 0.5 (w·x - y)^2  =>  dL/dw = (pred - y) x
        let specs = vec![LayerSpec::new(3, 1, Activation::Identity)];
        let m = ModelState::new(specs, vec![array![[0.2f32, -0.4, 0.1]]]).unwrap();
        let x = array![[1.0f32, 2.0, -1.0]];
        let y = 0.3f32;
        let ones = Supermask::ones(&m.shapes());
        let mut cache = ActivationCache::default();
        let pred = forward_masked(&m, &ones, x.view(), Some(&mut cache)).unwrap()[[0, 0]];
        let g = backward_masked(&m, &ones, &cache, array![[pred - y]].view()).unwrap();
        for j in 0..3 {
            assert!((g.weights[0][[0, j]] - (pred - y) * x[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_positions_get_zero_gradient() {
        let m = init_signed_kaiming(&mlp_specs(&[6, 5, 4]), 9).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let masks = Supermask {
            layers: m
                .shapes()
                .iter()
                .map(|&(a, b)| {
                    let v: Vec<bool> = (0..a * b).map(|_| r.random()).collect();
                    LayerMask::from_bools(a, b, &v).unwrap()
                })
                .collect(),
        };
        let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 7 + j) % 5) as f32 - 2.0);
        let mut cache = ActivationCache::default();
        let out = forward_masked(&m, &masks, x.view(), Some(&mut cache)).unwrap();
        let g = backward_masked(&m, &masks, &cache, out.view()).unwrap();
        for (gl, ml) in g.weights.iter().zip(&masks.layers) {
            for (i, v) in gl.iter().enumerate() {
                if !ml.get_flat(i) {
                    assert_eq!(v.to_bits(), 0.0f32.to_bits());
                }
            }
        }
    }

    #[test]
    fn predict_respects_head_and_ties() {
        let logits = array![[0.1f32, 0.9, 0.99, 0.0], [0.5, 0.5, 0.1, 0.2]];
        assert_eq!(argmax_in_range(logits.view(), 0..2).unwrap(), vec![1, 0]);
        assert_eq!(argmax_in_range(logits.view(), 0..4).unwrap(), vec![2, 0]);
        assert!(matches!(argmax_in_range(logits.view(), 3..6), Err(Error::Lookup(_))));
    }

    /// Independent f64 forward used as the finite-difference oracle.
    /// Returns 0.5 * Σ logits² and the hidden pre-activations.
    fn reference_loss(specs: &[LayerSpec], w: &[Vec<Vec<f64>>], masks: &Supermask, x: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut pres = Vec::new();
        for row in x {
            let mut z = row.clone();
            for (l, s) in specs.iter().enumerate() {
                let mut next = vec![0.0; s.fan_out];
                for v in 0..s.fan_out {
                    let mut acc = 0.0;
                    for u in 0..s.fan_in {
                        if masks.layers[l].get(v, u) {
                            acc += w[l][v][u] * z[u];
                        }
                    }
                    if l + 1 < specs.len() {
                        pres.push(acc);
                    }
                    next[v] = match s.activation {
                        Activation::Relu => acc.max(0.0),
                        Activation::Tanh => acc.tanh(),
                        Activation::Identity => acc,
                    };
                }
                z = next;
            }
            loss += z.iter().map(|v| 0.5 * v * v).sum::<f64>();
        }
        (loss, pres)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn backward_matches_central_differences(
            seed in any::<u64>(),
            depth in 1usize..=3,
            width in 2usize..=16,
            act in prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)],
        ) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut widths = vec![r.random_range(2..=16)];
            for _ in 1..depth { widths.push(width); }
            widths.push(r.random_range(2..=16));
            let specs: Vec<LayerSpec> = (0..depth)
                .map(|i| LayerSpec::new(widths[i], widths[i + 1], if i + 1 == depth { Activation::Identity } else { act }))
                .collect();
            let weights = specs.iter()
                .map(|s| Array2::from_shape_simple_fn((s.fan_out, s.fan_in), || r.random_range(-1.0f32..1.0)))
                .collect();
            let model = ModelState::new(specs, weights).unwrap();
            let masks = Supermask {
                layers: model.shapes().iter().map(|&(a, b)| {
                    let v: Vec<bool> = (0..a * b).map(|_| r.random_bool(0.7)).collect();
                    LayerMask::from_bools(a, b, &v).unwrap()
                }).collect(),
            };
            let x = Array2::from_shape_simple_fn((3, widths[0]), || r.random_range(-1.0f32..1.0));

            let mut cache = ActivationCache::default();
            let out = forward_masked(&model, &masks, x.view(), Some(&mut cache)).unwrap();
            let grads = backward_masked(&model, &masks, &cache, out.view()).unwrap();

            let w64: Vec<Vec<Vec<f64>>> = model.weights().iter()
                .map(|w| w.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect())
                .collect();
            let x64: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let specs = model.specs().to_vec();
            let (_, base_pre) = reference_loss(&specs, &w64, &masks, &x64);
            let h = 1e-4f64;
            let mut checked = 0;
            for l in 0..depth {
                let (rows, cols) = model.weights()[l].dim();
                for i in 0..rows {
                    for j in 0..cols {
                        if !masks.layers[l].get(i, j) { continue; }
                        let mut wp = w64.clone();
                        wp[l][i][j] += h;
                        let (up, pre_up) = reference_loss(&specs, &wp, &masks, &x64);
                        let mut wm = w64.clone();
                        wm[l][i][j] -= h;
                        let (down, pre_down) = reference_loss(&specs, &wm, &masks, &x64);
                        // relu kinks inside the stencil make the difference meaningless
                        let kinked = base_pre.iter().zip(&pre_up).zip(&pre_down)
                            .any(|((b, p), q)| (*b > 0.0) != (*p > 0.0) || (*b > 0.0) != (*q > 0.0));
                        if act == Activation::Relu && kinked { continue; }
                        let fd = (up - down) / (2.0 * h);
                        let an = grads.weights[l][[i, j]] as f64;
                        let denom = fd.abs().max(an.abs()).max(1e-3);
                        prop_assert!((fd - an).abs() / denom < 1e-3, "layer {} ({},{}) fd {} analytic {}", l, i, j, fd, an);
                        checked += 1;
                    }
                }
            }
            prop_assert!(checked > 0);
        }
    }
}
