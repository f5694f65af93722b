//! Optimizers and learning-rate schedules.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// `base · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> Result<f64> {
    ensure!(total_steps > 0, Domain, "cosine schedule needs at least one step");
    ensure!(step <= total_steps, Domain, "step {step} is past the schedule end {total_steps}");
    Ok(base * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: usize, total_steps: usize) -> Result<f64> {
        match self {
            LrSchedule::Constant => Ok(base),
            LrSchedule::Cosine => cosine_lr(base, step, total_steps),
        }
    }
}

/// Adam moments for a list of tensors; reset by constructing a new one.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step. Entries whose gradient and moments are
    /// all zero are left bitwise unchanged.
    pub fn update(&mut self, params: &mut [Array2<f32>], grads: &[Array2<f32>], lr: f32) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            Shape,
            "adam state for {} tensors, got {} params and {} grads",
            self.m.len(),
            params.len(),
            grads.len()
        );
        for (p, g) in params.iter().zip(grads) {
            ensure!(p.dim() == g.dim(), Shape, "param {:?} vs grad {:?}", p.dim(), g.dim());
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if *m != 0.0 {
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// Plain gradient descent, optionally with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    velocity: Vec<Array2<f32>>,
}

impl Sgd {
    pub fn new(shapes: &[(usize, usize)], momentum: f32) -> Self {
        Self { momentum, velocity: shapes.iter().map(|&s| Array2::zeros(s)).collect() }
    }

    pub fn update(&mut self, params: &mut [Array2<f32>], grads: &[Array2<f32>], lr: f32) -> Result<()> {
        ensure!(
            params.len() == self.velocity.len() && grads.len() == self.velocity.len(),
            Shape,
            "sgd state for {} tensors, got {} params and {} grads",
            self.velocity.len(),
            params.len(),
            grads.len()
        );
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            ensure!(p.dim() == g.dim(), Shape, "param {:?} vs grad {:?}", p.dim(), g.dim());
            if self.momentum == 0.0 {
                p.scaled_add(-lr, g);
            } else {
                let mu = self.momentum;
                Zip::from(p).and(g).and(vel).for_each(|p, &g, v| {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                });
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd(Sgd),
    Adam(Adam),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, shapes: &[(usize, usize)], momentum: f32) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd(Sgd::new(shapes, momentum)),
            OptimizerKind::Adam => OptimizerState::Adam(Adam::new(shapes)),
        }
    }

    pub fn update(&mut self, params: &mut [Array2<f32>], grads: &[Array2<f32>], lr: f32) -> Result<()> {
        match self {
            OptimizerState::Sgd(s) => s.update(params, grads, lr),
            OptimizerState::Adam(a) => a.update(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100).unwrap(), 0.1);
        assert!(cosine_lr(0.1, 100, 100).unwrap().abs() < 1e-15);
        assert!((cosine_lr(0.1, 50, 100).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 0, 0).is_err());
        assert!(cosine_lr(0.1, 5, 4).is_err());
    }

    #[test]
    fn cosine_is_non_increasing() {
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(1.0, s, 37).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // step 1: m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + ε) ≈ -lr·sign(g)
        let mut p = vec![array![[1.0f32, -2.0, 0.5]]];
        let g = vec![array![[0.3f32, -4.0, 0.0]]];
        let mut adam = Adam::new(&[(1, 3)]);
        adam.update(&mut p, &g, 0.01).unwrap();
        assert!((p[0][[0, 0]] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[0][[0, 1]] - (-2.0 + 0.01)).abs() < 1e-6);
        assert_eq!(p[0][[0, 2]], 0.5);
    }

    #[test]
    fn adam_zero_grads_leave_params_bitwise() {
        let before = vec![array![[1.25f32, -0.0, 3.0]]];
        let mut p = before.clone();
        let mut adam = Adam::new(&[(1, 3)]);
        for _ in 0..5 {
            adam.update(&mut p, &[Array2::zeros((1, 3))], 0.1).unwrap();
        }
        for (a, b) in p[0].iter().zip(before[0].iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let g = vec![array![[0.1f32, 0.2], [-0.3, 0.4]]];
        let run = || {
            let mut p = vec![array![[0.0f32, 1.0], [2.0, 3.0]]];
            let mut a = Adam::new(&[(2, 2)]);
            a.update(&mut p, &g, 0.05).unwrap();
            a.update(&mut p, &g, 0.05).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = vec![array![[1.0f32]]];
        let mut s = Sgd::new(&[(1, 1)], 0.0);
        s.update(&mut p, &[array![[0.5f32]]], 0.1).unwrap();
        assert!((p[0][[0, 0]] - 0.95).abs() < 1e-7);
    }
}
