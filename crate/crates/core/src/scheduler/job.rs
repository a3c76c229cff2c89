//! Job specification as read from a JSON file.

use serde::{Deserialize, Serialize};

use super::SchedulerError;
use crate::optimizer::{DeploymentConfig, SearchLimits, SearchSpace, UserGoal};
use crate::platform::{check_memory, PlatformParams};
use crate::storage::StoreParams;
use crate::trainer::{DatasetConfig, ModelConfig, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchEntry {
    pub epoch: u64,
    pub batch_size: usize,
}

/// Global batch size per epoch: each entry holds until the next one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BatchSchedule(pub Vec<BatchEntry>);

impl BatchSchedule {
    pub fn constant(batch_size: usize) -> Self {
        Self(vec![BatchEntry {
            epoch: 0,
            batch_size,
        }])
    }

    pub fn batch_at(&self, epoch: u64) -> usize {
        self.0
            .iter()
            .take_while(|e| e.epoch <= epoch)
            .last()
            .map_or(self.0.first().map_or(1, |e| e.batch_size), |e| e.batch_size)
    }

    pub fn validate(&self) -> Result<(), String> {
        let first = self.0.first().ok_or("batch schedule is empty")?;
        if first.epoch != 0 {
            return Err("batch schedule must start at epoch 0".into());
        }
        if self.0.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err("batch schedule epochs must be strictly increasing".into());
        }
        if self.0.iter().any(|e| e.batch_size == 0) {
            return Err("batch sizes must be at least 1".into());
        }
        Ok(())
    }
}

/// Model size from `epoch` on, as in a scripted architecture search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSizeChange {
    pub epoch: u64,
    pub param_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    pub worker: usize,
    /// Global training iteration (counted across epochs) whose compute phase fails.
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub space: SearchSpace,
    pub limits: SearchLimits,
    /// Training iterations per profiling probe; the median is reported.
    pub profile_iterations: usize,
    /// Re-optimize when the batch size or model size changes.
    pub adapt: bool,
    /// Share of the deadline or budget that profiling may consume.
    pub profiling_share: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            space: SearchSpace::default(),
            limits: SearchLimits::default(),
            profile_iterations: 3,
            adapt: true,
            profiling_share: 0.25,
        }
    }
}

/// Simulated compute cost of a training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    /// Seconds per (sample x parameter) at compute speed 1.0.
    pub seconds_per_sample_param: f64,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            seconds_per_sample_param: 2e-8,
        }
    }
}

fn default_learning_rate() -> f64 {
    0.05
}

fn default_max_failures() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub epochs: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub batch_schedule: BatchSchedule,
    #[serde(default)]
    pub model_size_schedule: Vec<ModelSizeChange>,
    pub goal: UserGoal,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub platform: PlatformParams,
    #[serde(default = "StoreParams::object_store")]
    pub object_store: StoreParams,
    #[serde(default = "StoreParams::parameter_store")]
    pub parameter_store: StoreParams,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub workload: Workload,
    /// Fixed deployment; skips the optimizer entirely when set.
    #[serde(default)]
    pub deployment: Option<DeploymentConfig>,
    /// Shards per synchronization round; defaults to the worker count.
    #[serde(default)]
    pub shards: Option<usize>,
    #[serde(default)]
    pub faults: Vec<FaultInjection>,
    /// Consecutive failures of one slot tolerated before aborting.
    #[serde(default = "default_max_failures")]
    pub max_consecutive_failures: u32,
}

impl JobSpec {
    /// A small fixed-deployment job, handy as a starting point.
    pub fn example() -> Self {
        Self {
            model: ModelConfig {
                kind: ModelKind::LinearRegression,
                n_features: 8,
                hidden: 0,
            },
            dataset: DatasetConfig {
                n_samples: 512,
                ..DatasetConfig::default()
            },
            epochs: 2,
            learning_rate: default_learning_rate(),
            batch_schedule: BatchSchedule::constant(32),
            model_size_schedule: Vec::new(),
            goal: UserGoal::fastest(),
            seed: 0,
            platform: PlatformParams::default(),
            object_store: StoreParams::object_store(),
            parameter_store: StoreParams::parameter_store(),
            optimizer: OptimizerSettings::default(),
            workload: Workload::default(),
            deployment: Some(DeploymentConfig::new(2, 1024)),
            shards: None,
            faults: Vec::new(),
            max_consecutive_failures: default_max_failures(),
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: String| Err(SchedulerError::InvalidSpec(m));
        if self.model.n_features == 0 {
            return bad("model.n_features must be at least 1".into());
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden == 0 {
            return bad("model.hidden must be at least 1 for an mlp".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0".into());
        }
        if !(self.dataset.noise >= 0.0) || self.dataset.max_chunk_bytes == 0 {
            return bad("dataset.noise must be >= 0 and dataset.max_chunk_bytes > 0".into());
        }
        self.batch_schedule
            .validate()
            .or_else(|m| bad(format!("batch_schedule: {m}")))?;
        if self
            .model_size_schedule
            .windows(2)
            .any(|w| w[0].epoch >= w[1].epoch)
        {
            return bad("model_size_schedule epochs must be strictly increasing".into());
        }
        for c in &self.model_size_schedule {
            if self.model.hidden_for_params(c.param_count).is_none() {
                return bad(format!(
                    "no {:?} model has exactly {} parameters",
                    self.model.kind, c.param_count
                ));
            }
        }
        self.goal.validate().or_else(|e| bad(e.to_string()))?;
        self.platform.validate().or_else(|e| bad(e.to_string()))?;
        self.object_store
            .validate()
            .or_else(|m| bad(format!("object_store: {m}")))?;
        self.parameter_store
            .validate()
            .or_else(|m| bad(format!("parameter_store: {m}")))?;
        self.optimizer
            .space
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        if self.optimizer.profile_iterations == 0 || self.optimizer.limits.k_max == 0 {
            return bad("optimizer needs profile_iterations >= 1 and k_max >= 1".into());
        }
        if !(self.optimizer.profiling_share > 0.0 && self.optimizer.profiling_share <= 1.0) {
            return bad("optimizer.profiling_share must be in (0, 1]".into());
        }
        if !(self.workload.seconds_per_sample_param >= 0.0) {
            return bad("workload.seconds_per_sample_param must be >= 0".into());
        }
        if let Some(d) = self.deployment {
            if d.workers == 0 {
                return bad("deployment.workers must be at least 1".into());
            }
            check_memory(d.memory_mb).or_else(|e| bad(e.to_string()))?;
        }
        if self.shards == Some(0) {
            return bad("shards must be at least 1".into());
        }
        Ok(())
    }

    /// Model configuration in effect during `epoch`.
    pub fn model_at(&self, epoch: u64) -> ModelConfig {
        let mut config = self.model.clone();
        if let Some(c) = self
            .model_size_schedule
            .iter()
            .take_while(|c| c.epoch <= epoch)
            .last()
        {
            config.hidden = self
                .model
                .hidden_for_params(c.param_count)
                .expect("validated");
        }
        config
    }

    pub fn iterations_in_epoch(&self, epoch: u64) -> u64 {
        (self.dataset.n_samples as u64).div_ceil(self.batch_schedule.batch_at(epoch) as u64)
    }

    /// Iterations left from position `cursor` of `epoch` to the end of training.
    pub fn remaining_iterations(&self, epoch: u64, cursor: usize) -> u64 {
        if epoch >= self.epochs {
            return 0;
        }
        let n = self.dataset.n_samples;
        let here =
            (n.saturating_sub(cursor) as u64).div_ceil(self.batch_schedule.batch_at(epoch) as u64);
        here + (epoch + 1..self.epochs)
            .map(|e| self.iterations_in_epoch(e))
            .sum::<u64>()
    }

    pub fn total_iterations(&self) -> u64 {
        self.remaining_iterations(0, 0)
    }
}
