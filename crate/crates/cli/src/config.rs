//! Flat run configuration file and `--set` overrides.

use std::path::{Path, PathBuf};

use exssnet::data::{synth_gaussian_tasks, Dataset, SynthConfig};
use exssnet::harness::{split_mnist, RunConfig};
use exssnet::kkt::KktConfig;
use exssnet::optim::{LrSchedule, OptimizerKind};
use exssnet::training::{TrainForwardMask, TrainConfig};
use exssnet::{Mode, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

/// Every key except `dataset` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: DatasetKind,
    #[serde(default = "default_mnist_dir")]
    pub mnist_dir: PathBuf,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    /// Hidden widths; input and output widths follow from the data.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Seeds used by `sweep`; `run` uses `seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub record_curves: bool,

    #[serde(default = "d::mask_density")]
    pub mask_density: f64,
    #[serde(default = "d::mask_epochs")]
    pub mask_epochs: usize,
    #[serde(default = "d::weight_epochs")]
    pub weight_epochs: usize,
    #[serde(default = "d::lr")]
    pub lr: f64,
    #[serde(default = "d::score_lr")]
    pub score_lr: f64,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d::score_optimizer")]
    pub score_optimizer: OptimizerKind,
    #[serde(default = "d::momentum")]
    pub momentum: f32,
    #[serde(default = "d::lr_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d::mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::train_forward_mask")]
    pub train_forward_mask: TrainForwardMask,
    #[serde(default)]
    pub forced_overlap: f64,
    #[serde(default)]
    pub empty_free_masks: bool,

    #[serde(default)]
    pub kkt: bool,
    #[serde(default = "k::sample_fraction")]
    pub kkt_sample_fraction: f64,
    #[serde(default = "k::knn_k")]
    pub kkt_knn_k: usize,
    #[serde(default = "k::train_split")]
    pub kkt_train_split: f64,
    #[serde(default)]
    pub kkt_margin: f64,

    #[serde(default = "s::classes_per_task")]
    pub synth_classes_per_task: usize,
    #[serde(default = "s::dim")]
    pub synth_dim: usize,
    #[serde(default = "s::separation")]
    pub synth_separation: f32,
    #[serde(default = "s::train_per_class")]
    pub synth_train_per_class: usize,
    #[serde(default = "s::test_per_class")]
    pub synth_test_per_class: usize,
    #[serde(default = "s::clusters_per_class")]
    pub synth_clusters_per_class: usize,
    /// `[source, copy]` task indices.
    #[serde(default)]
    pub synth_duplicate: Option<[usize; 2]>,
}

fn default_mnist_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

fn default_n_tasks() -> usize {
    5
}

fn default_hidden() -> Vec<usize> {
    vec![300, 100]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

mod d {
    use super::*;

    fn base() -> TrainConfig {
        TrainConfig::default()
    }
    pub fn mask_density() -> f64 {
        base().mask_density
    }
    pub fn mask_epochs() -> usize {
        base().mask_epochs
    }
    pub fn weight_epochs() -> usize {
        base().weight_epochs
    }
    pub fn lr() -> f64 {
        base().lr
    }
    pub fn score_lr() -> f64 {
        base().score_lr
    }
    pub fn batch_size() -> usize {
        base().batch_size
    }
    pub fn optimizer() -> OptimizerKind {
        base().optimizer
    }
    pub fn score_optimizer() -> OptimizerKind {
        base().score_optimizer
    }
    pub fn momentum() -> f32 {
        base().momentum
    }
    pub fn lr_schedule() -> LrSchedule {
        base().lr_schedule
    }
    pub fn mode() -> Mode {
        base().mode
    }
    pub fn train_forward_mask() -> TrainForwardMask {
        base().train_forward_mask
    }
}

mod k {
    use super::*;

    pub fn sample_fraction() -> f64 {
        KktConfig::default().sample_fraction
    }
    pub fn knn_k() -> usize {
        KktConfig::default().knn_k
    }
    pub fn train_split() -> f64 {
        KktConfig::default().train_split
    }
}

mod s {
    use super::*;

    pub fn classes_per_task() -> usize {
        SynthConfig::default().classes_per_task
    }
    pub fn dim() -> usize {
        SynthConfig::default().dim
    }
    pub fn separation() -> f32 {
        SynthConfig::default().separation
    }
    pub fn train_per_class() -> usize {
        SynthConfig::default().train_per_class
    }
    pub fn test_per_class() -> usize {
        SynthConfig::default().test_per_class
    }
    pub fn clusters_per_class() -> usize {
        SynthConfig::default().clusters_per_class
    }
}

impl ConfigFile {
    /// Reads `path` (or an empty document) and applies `key=value` overrides
    /// in order. Values parse as TOML and fall back to bare strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let cfg: ConfigFile = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |e: exssnet::Error| CliError::Config(e.to_string());
        self.train_config().validate().map_err(err)?;
        self.kkt_config().validate().map_err(err)?;
        if self.n_tasks == 0 {
            return Err(CliError::Config("n_tasks must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(CliError::Config("hidden widths must be positive".into()));
        }
        if self.dataset == DatasetKind::Mnist && !self.mnist_dir.is_dir() {
            return Err(CliError::Config(format!(
                "MNIST directory {} not found (run scripts/fetch_mnist.sh or set mnist_dir)",
                self.mnist_dir.display()
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mask_density: self.mask_density,
            mask_epochs: self.mask_epochs,
            weight_epochs: self.weight_epochs,
            lr: self.lr,
            score_lr: self.score_lr,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            score_optimizer: self.score_optimizer,
            momentum: self.momentum,
            lr_schedule: self.lr_schedule,
            mode: self.mode,
            seed: self.seed,
            train_forward_mask: self.train_forward_mask,
            forced_overlap: self.forced_overlap,
            empty_free_masks: self.empty_free_masks,
        }
    }

    pub fn kkt_config(&self) -> KktConfig {
        KktConfig {
            sample_fraction: self.kkt_sample_fraction,
            knn_k: self.kkt_knn_k,
            train_split: self.kkt_train_split,
            margin: self.kkt_margin,
        }
    }

    /// Task sequence for `seed`; MNIST class order and synthetic centers
    /// both follow the run seed.
    pub fn tasks(&self, seed: u64) -> exssnet::Result<(Dataset, Vec<TaskSpec>)> {
        match self.dataset {
            DatasetKind::Mnist => split_mnist(&self.mnist_dir, self.n_tasks, seed),
            DatasetKind::Synthetic => synth_gaussian_tasks(&SynthConfig {
                n_tasks: self.n_tasks,
                classes_per_task: self.synth_classes_per_task,
                dim: self.synth_dim,
                separation: self.synth_separation,
                train_per_class: self.synth_train_per_class,
                test_per_class: self.synth_test_per_class,
                duplicate: self.synth_duplicate.map(|[a, b]| (a, b)),
                clusters_per_class: self.synth_clusters_per_class,
                seed,
            }),
        }
    }

    pub fn run_config(&self, dataset: &Dataset, tasks: &[TaskSpec]) -> RunConfig {
        let outputs = tasks.iter().map(|t| t.head.end).max().unwrap_or(0);
        let mut widths = vec![dataset.features()];
        widths.extend(&self.hidden);
        widths.push(outputs);
        RunConfig {
            widths,
            train: self.train_config(),
            kkt: self.kkt_config(),
            kkt_enabled: self.kkt,
            record_curves: self.record_curves,
        }
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
