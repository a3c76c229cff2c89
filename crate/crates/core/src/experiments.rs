//! Built-in experiment presets. Each preset produces one or more CSV files
//! as in-memory strings; rerunning with the same seed gives the same bytes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::optimizer::{DeploymentConfig, SearchLimits, SearchSpace, UserGoal};
use crate::scheduler::{
    run_job, BatchEntry, BatchSchedule, EventKind, JobSpec, ModelSizeChange, OptimizerSettings,
    RunLedger, SchedulerError, Workload,
};
use crate::storage::{Store, StoreParams};
use crate::sync::{
    centralized_sync, hierarchical_sync, plan_shards, GradientVector, SyncRound, SyncTiming,
};
use crate::trainer::{DatasetConfig, ModelConfig, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    SyncScaling,
    Scenario1,
    Scenario2,
    DynamicBatching,
    NasSchedule,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::SyncScaling,
        Preset::Scenario1,
        Preset::Scenario2,
        Preset::DynamicBatching,
        Preset::NasSchedule,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::SyncScaling => "sync-scaling",
            Preset::Scenario1 => "scenario1",
            Preset::Scenario2 => "scenario2",
            Preset::DynamicBatching => "dynamic-batching",
            Preset::NasSchedule => "nas-schedule",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown preset {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// Named CSV outputs of one preset run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentOutput {
    pub files: Vec<(String, String)>,
}

impl JobSpec {
    /// Applies `key=value` overrides addressed by dotted paths into the JSON
    /// form of the spec. Values are parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(
        &self,
        overrides: &[S],
    ) -> Result<JobSpec, SchedulerError> {
        let invalid = SchedulerError::InvalidSpec;
        let mut root = serde_json::to_value(self).expect("job spec serializes");
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut root;
            for part in path.split('.') {
                if node.is_null() {
                    *node = serde_json::Value::Object(Default::default());
                }
                node = match node {
                    serde_json::Value::Object(map) => map
                        .entry(part.to_string())
                        .or_insert(serde_json::Value::Null),
                    serde_json::Value::Array(items) => {
                        let i: usize = part
                            .parse()
                            .map_err(|_| invalid(format!("{path}: {part:?} is not an index")))?;
                        items
                            .get_mut(i)
                            .ok_or_else(|| invalid(format!("{path}: index {i} out of range")))?
                    }
                    _ => return Err(invalid(format!("{path}: cannot descend into a scalar"))),
                };
            }
            *node = value;
        }
        let job: JobSpec =
            serde_json::from_value(root).map_err(|e| invalid(format!("after overrides: {e}")))?;
        job.validate()?;
        Ok(job)
    }
}

pub const SYNC_SCALING_WORKERS: [usize; 4] = [8, 16, 32, 64];
pub const SYNC_GRADIENT_LENGTH: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncScalingRow {
    pub method: &'static str,
    pub workers: usize,
    /// Slowest worker per step.
    pub timing: SyncTiming,
}

/// One synchronization round per worker count and method, each on a fresh
/// store.
pub fn sync_scaling(
    seed: u64,
    store: &StoreParams,
    workers: &[usize],
    length: usize,
) -> Result<Vec<SyncScalingRow>, SchedulerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n in workers {
        let grads: Vec<GradientVector> = (0..n)
            .map(|_| {
                GradientVector::new((0..length).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect::<Result<_, _>>()?;
        let round = SyncRound::new(0, 0);
        let plan = plan_shards(length, n, n)?;
        let (_, timings) = hierarchical_sync(&grads, &plan, round, &mut Store::new(store.clone()))?;
        let slowest = |t: &[SyncTiming]| t.iter().fold(SyncTiming::default(), |a, b| a.max(b));
        rows.push(SyncScalingRow {
            method: "hierarchical",
            workers: n,
            timing: slowest(&timings),
        });
        let (_, timings) = centralized_sync(&grads, round, &mut Store::new(store.clone()))?;
        rows.push(SyncScalingRow {
            method: "centralized",
            workers: n,
            timing: slowest(&timings),
        });
    }
    Ok(rows)
}

fn csv_string<F>(header: &[&str], write_rows: F) -> Result<String, SchedulerError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let io = |e: csv::Error| SchedulerError::InvalidSpec(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(io)?;
    write_rows(&mut w).map_err(io)?;
    let bytes = w
        .into_inner()
        .map_err(|e| SchedulerError::InvalidSpec(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const SYNC_SCALING_HEADER: [&str; 8] = [
    "method",
    "workers",
    "ul_shard_s",
    "dl_shard_s",
    "ul_aggr_s",
    "ul_grad_s",
    "dl_grad_s",
    "total_s",
];

/// Base job of the scenario and dynamic presets: a small MLP whose simulated
/// compute cost makes the worker count and memory size matter, and a
/// parameter store whose shared bandwidth penalizes very wide deployments.
pub fn preset_job(seed: u64) -> JobSpec {
    let mut job = JobSpec::example();
    job.model = ModelConfig {
        kind: ModelKind::Mlp,
        n_features: 16,
        hidden: 32,
    };
    job.dataset = DatasetConfig {
        n_samples: 16384,
        noise: 0.05,
        ..DatasetConfig::default()
    };
    job.epochs = 4;
    job.learning_rate = 0.02;
    job.batch_schedule = BatchSchedule::constant(128);
    job.seed = seed;
    job.platform.rng_seed = seed;
    job.platform.max_duration = 120.0;
    job.platform.cold_start = 1.0;
    job.platform.invocation_delay = 0.2;
    job.parameter_store = StoreParams {
        base_latency: 0.005,
        bandwidth: 5e6,
        standing_cost_per_second: 0.0,
        aggregate_bandwidth: Some(4e5),
    };
    job.workload = Workload {
        seconds_per_sample_param: 5e-5,
    };
    job.optimizer = OptimizerSettings {
        space: SearchSpace {
            min_workers: 1,
            max_workers: 32,
            min_memory: 1024,
            max_memory: 10240,
            memory_step: 1024,
        },
        limits: SearchLimits {
            seed,
            ..SearchLimits::default()
        },
        ..OptimizerSettings::default()
    };
    job.deployment = None;
    job
}

pub const SCENARIO1_T_MAX: f64 = 1500.0;
pub const SCENARIO2_S_MAX: f64 = 0.3;

pub fn scenario_job(seed: u64, goal: UserGoal) -> JobSpec {
    JobSpec {
        goal,
        ..preset_job(seed)
    }
}

/// Fixed deployments the optimizer is compared against.
pub const BASELINES: [(&str, DeploymentConfig); 3] = [
    (
        "fixed-small",
        DeploymentConfig {
            workers: 2,
            memory_mb: 1024,
        },
    ),
    (
        "fixed-medium",
        DeploymentConfig {
            workers: 8,
            memory_mb: 3072,
        },
    ),
    (
        "fixed-large",
        DeploymentConfig {
            workers: 32,
            memory_mb: 10240,
        },
    ),
];

pub const SCENARIO_HEADER: [&str; 11] = [
    "method",
    "workers",
    "memory_mb",
    "status",
    "wall_time_s",
    "training_time_s",
    "training_cost_usd",
    "profiling_time_s",
    "profiling_cost_usd",
    "total_cost_usd",
    "meets_goal",
];

/// Runs the goal-driven job and the fixed baselines. Baselines train to
/// completion with no goal guard so their overshoot is visible.
pub fn scenario(job: &JobSpec) -> Result<Vec<(String, RunLedger)>, SchedulerError> {
    let mut out = vec![("optimized".to_string(), run_job(job)?)];
    for (name, config) in BASELINES {
        let baseline = JobSpec {
            deployment: Some(config),
            goal: UserGoal::fastest(),
            ..job.clone()
        };
        out.push((name.to_string(), run_job(&baseline)?));
    }
    Ok(out)
}

fn meets_goal(goal: &UserGoal, l: &RunLedger) -> bool {
    goal.t_max.is_none_or(|t| l.wall_time <= t) && goal.s_max.is_none_or(|s| l.total_cost <= s)
}

fn scenario_csv(job: &JobSpec) -> Result<String, SchedulerError> {
    let runs = scenario(job)?;
    csv_string(&SCENARIO_HEADER, |w| {
        for (name, l) in &runs {
            let status = serde_json::to_value(l.status).expect("status serializes");
            w.write_record([
                name.clone(),
                l.final_config.workers.to_string(),
                l.final_config.memory_mb.to_string(),
                status.as_str().unwrap_or_default().to_string(),
                l.wall_time.to_string(),
                (l.wall_time - l.profiling_time).to_string(),
                (l.total_cost - l.profiling_cost).to_string(),
                l.profiling_time.to_string(),
                l.profiling_cost.to_string(),
                l.total_cost.to_string(),
                meets_goal(&job.goal, l).to_string(),
            ])?;
        }
        Ok(())
    })
}

pub const DYNAMIC_CHANGE_EPOCH: u64 = 2;

/// Batch size grows from 64 to 256 mid-run.
pub fn dynamic_batching_job(seed: u64) -> JobSpec {
    let mut job = preset_job(seed);
    job.epochs = 5;
    job.goal = UserGoal::fastest();
    job.batch_schedule = BatchSchedule(vec![
        BatchEntry {
            epoch: 0,
            batch_size: 64,
        },
        BatchEntry {
            epoch: DYNAMIC_CHANGE_EPOCH,
            batch_size: 256,
        },
    ]);
    job
}

/// Model grows in three stages, as an architecture search would.
pub fn nas_job(seed: u64) -> JobSpec {
    let mut job = preset_job(seed);
    job.epochs = 6;
    job.goal = UserGoal::fastest();
    job.model.hidden = 8;
    let params = |h: usize| {
        ModelConfig {
            hidden: h,
            ..job.model.clone()
        }
        .param_count()
    };
    job.model_size_schedule = vec![
        ModelSizeChange {
            epoch: 2,
            param_count: params(32),
        },
        ModelSizeChange {
            epoch: 4,
            param_count: params(128),
        },
    ];
    job
}

/// Samples per second over the iterations of epochs `from..`.
pub fn throughput_from(ledger: &RunLedger, from: u64) -> f64 {
    let rows = ledger.rows.iter().filter(|r| r.epoch >= from);
    let (samples, time) = rows.fold((0.0, 0.0), |(s, t), r| {
        (s + r.batch_size as f64, t + r.iter_time())
    });
    if time > 0.0 {
        samples / time
    } else {
        0.0
    }
}

/// Adapted and frozen runs of the same job.
pub fn adaptation_runs(job: &JobSpec) -> Result<(RunLedger, RunLedger), SchedulerError> {
    let adapted = run_job(job)?;
    let mut frozen = job.clone();
    frozen.optimizer.adapt = false;
    Ok((adapted, run_job(&frozen)?))
}

pub const SERIES_HEADER: [&str; 10] = [
    "variant",
    "time_s",
    "epoch",
    "iteration",
    "batch_size",
    "param_count",
    "workers",
    "memory_mb",
    "throughput_sps",
    "marker",
];

fn series_csv(runs: &[(&str, &RunLedger)]) -> Result<String, SchedulerError> {
    csv_string(&SERIES_HEADER, |w| {
        for (variant, l) in runs {
            let mut reopts = l
                .events_of(EventKind::Reoptimization)
                .map(|e| e.time)
                .peekable();
            for r in &l.rows {
                let mut marker = "";
                if reopts.peek().is_some_and(|&t| t <= r.start) {
                    reopts.next();
                    marker = "reoptimization";
                }
                w.write_record([
                    variant.to_string(),
                    r.end.to_string(),
                    r.epoch.to_string(),
                    r.iteration.to_string(),
                    r.batch_size.to_string(),
                    r.param_count.to_string(),
                    r.config.workers.to_string(),
                    r.config.memory_mb.to_string(),
                    r.throughput().to_string(),
                    marker.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub const ADAPTATION_HEADER: [&str; 8] = [
    "variant",
    "reoptimizations",
    "final_workers",
    "final_memory_mb",
    "throughput_before_sps",
    "throughput_after_sps",
    "wall_time_s",
    "total_cost_usd",
];

fn adaptation_csv(
    runs: &[(&str, &RunLedger)],
    change_epoch: u64,
) -> Result<String, SchedulerError> {
    csv_string(&ADAPTATION_HEADER, |w| {
        for (variant, l) in runs {
            let before = {
                let rows: Vec<_> = l.rows.iter().filter(|r| r.epoch < change_epoch).collect();
                let t: f64 = rows.iter().map(|r| r.iter_time()).sum();
                rows.iter().map(|r| r.batch_size as f64).sum::<f64>() / t
            };
            w.write_record([
                variant.to_string(),
                l.reoptimizations.to_string(),
                l.final_config.workers.to_string(),
                l.final_config.memory_mb.to_string(),
                before.to_string(),
                throughput_from(l, change_epoch + 1).to_string(),
                l.wall_time.to_string(),
                l.total_cost.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Runs a preset on its default job with `overrides` applied.
pub fn run_preset<S: AsRef<str>>(
    preset: Preset,
    seed: u64,
    overrides: &[S],
) -> Result<ExperimentOutput, SchedulerError> {
    let files = match preset {
        Preset::SyncScaling => {
            // default parameter store unless overridden
            let store = JobSpec::example()
                .with_overrides(overrides)?
                .parameter_store;
            let rows = sync_scaling(seed, &store, &SYNC_SCALING_WORKERS, SYNC_GRADIENT_LENGTH)?;
            let csv = csv_string(&SYNC_SCALING_HEADER, |w| {
                for r in &rows {
                    let t = r.timing;
                    w.write_record([
                        r.method.to_string(),
                        r.workers.to_string(),
                        t.ul_shard.to_string(),
                        t.dl_shard.to_string(),
                        t.ul_aggr.to_string(),
                        t.ul_grad.to_string(),
                        t.dl_grad.to_string(),
                        t.total().to_string(),
                    ])?;
                }
                Ok(())
            })?;
            vec![("sync_scaling.csv".to_string(), csv)]
        }
        Preset::Scenario1 => {
            let job = scenario_job(seed, UserGoal::deadline(SCENARIO1_T_MAX))
                .with_overrides(overrides)?;
            vec![("scenario1.csv".to_string(), scenario_csv(&job)?)]
        }
        Preset::Scenario2 => {
            let job =
                scenario_job(seed, UserGoal::budget(SCENARIO2_S_MAX)).with_overrides(overrides)?;
            vec![("scenario2.csv".to_string(), scenario_csv(&job)?)]
        }
        Preset::DynamicBatching | Preset::NasSchedule => {
            let (job, change) = if preset == Preset::DynamicBatching {
                (dynamic_batching_job(seed), DYNAMIC_CHANGE_EPOCH)
            } else {
                (nas_job(seed), 4)
            };
            let job = job.with_overrides(overrides)?;
            let (adapted, frozen) = adaptation_runs(&job)?;
            let runs = [("adaptive", &adapted), ("frozen", &frozen)];
            vec![
                (
                    format!("{}_series.csv", preset.as_str().replace('-', "_")),
                    series_csv(&runs)?,
                ),
                (
                    format!("{}_summary.csv", preset.as_str().replace('-', "_")),
                    adaptation_csv(&runs, change)?,
                ),
            ]
        }
    };
    Ok(ExperimentOutput { files })
}
