//! Exclusive supermask subnetwork training (ExSSNeT) for task-incremental
//! continual learning.
//!
//! A single dense MLP is shared by every task. Each task learns a binary
//! supermask over the current weights with edge-popup, then trains only the
//! weights of that mask which no earlier task has selected. Weights used by a
//! finished task are never written again, so earlier tasks keep their exact
//! accuracy. An optional KNN probe (KKT) seeds a new task's mask from the
//! most predictive earlier task.
//!
//! Module map:
//!
//! - [`network`]: masked MLP forward/backward with zero biases.
//! - [`mask`]: scores, top-k thresholding, straight-through gradients and
//!   bit-packed mask algebra.
//! - [`optim`]: Adam, plain SGD and the cosine schedule.
//! - [`training`]: supermask learning, exclusive/overlapping weight training
//!   and the per-task orchestration.
//! - [`kkt`]: KNN-based transfer-task selection.
//! - [`harness`]: task splits, accuracy matrix and continual-learning metrics.
//! - [`data`]: IDX ingestion, normalization and synthetic Gaussian tasks.
//! - [`persistence`]: checkpoint format and storage accounting.

pub mod data;
pub mod error;
pub mod harness;
pub mod kkt;
pub mod mask;
pub mod network;
pub mod optim;
pub mod persistence;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use harness::{AccuracyMatrix, RunReport, TaskSpec};
pub use mask::{MaskRegistry, OverlapReport, ScoreTensor, Supermask};
pub use network::{Activation, LayerSpec, ModelState};
pub use training::{Mode, TrainConfig};
