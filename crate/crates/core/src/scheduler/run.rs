//! Job driver: search, train, watch for changes, re-optimize.

use std::collections::BTreeSet;

use log::info;

use super::artifacts::upload_artifacts;
use super::change::ChangeDetector;
use super::engine::{Cluster, Ctx, Progress, Sim, GUARD_ITERATIONS};
use super::ledger::{Event, EventKind, IterationRow, RunLedger, RunStatus, SlotStats};
use super::{JobSpec, SchedulerError};
use crate::optimizer::{
    search, DeploymentConfig, ObjectiveModel, Observation, OptimizerError, Probe, ProbeError,
    Profiler, RestartModel, SearchOutcome,
};
use crate::trainer::{synthesize, Checkpoint, Model};

/// Instance ids of probe slots start here so they never share warm
/// containers with training slots.
const PROBE_INSTANCE_BASE: u64 = 1_000_000;

/// Profiles a deployment by running a few real training iterations on the
/// simulator, starting from the latest checkpoint. Probe results are thrown
/// away; training resumes from where it was.
pub struct SimProfiler<'a> {
    job: &'a JobSpec,
    sim: &'a mut Sim,
    progress: Progress,
    checkpoint: Option<String>,
    /// Profiling allowance left, in seconds and dollars.
    time_left: f64,
    cost_left: f64,
    probes: u64,
}

impl<'a> SimProfiler<'a> {
    pub fn new(
        job: &'a JobSpec,
        sim: &'a mut Sim,
        progress: Progress,
        checkpoint: Option<String>,
        time_left: f64,
        cost_left: f64,
        first_probe: u64,
    ) -> Self {
        Self {
            job,
            sim,
            progress,
            checkpoint,
            time_left,
            cost_left,
            probes: first_probe,
        }
    }

    pub fn probes(&self) -> u64 {
        self.probes
    }

    fn run_probe(
        &mut self,
        config: DeploymentConfig,
        spent: &mut (f64, f64),
    ) -> Result<Vec<IterationRow>, ProbeError> {
        let fault = |e: SchedulerError| ProbeError::Fault {
            reason: e.to_string(),
            wall_time: 0.0,
            cost: 0.0,
        };
        let base = PROBE_INSTANCE_BASE * (self.probes + 1);
        let mut cluster = Cluster::new(self.job, config, base, "probe/", self.checkpoint.clone())
            .map_err(fault)?;
        let mut progress = Progress {
            partition_base: self.progress.cursor,
            ..self.progress
        };
        let mut events = Vec::new();
        let mut faults = BTreeSet::new();
        let start = (self.sim.clock, self.sim.cost_at(self.sim.clock, &[]));
        let mut rows = Vec::new();
        let mut result = Ok(());
        for _ in 0..self.job.optimizer.profile_iterations {
            let now = (
                self.sim.clock - start.0,
                self.sim
                    .cost_at(self.sim.clock, &cluster.open_invocations())
                    - start.1,
            );
            if let Some(last) = rows.last().map(IterationRow::iter_time) {
                let rate = rows
                    .last()
                    .map_or(0.0, |r: &IterationRow| r.cost / r.iter_time());
                let next = GUARD_ITERATIONS * last;
                if now.0 + next > self.time_left || now.1 + next * rate > self.cost_left {
                    result = Err(ProbeError::BudgetExhausted);
                    break;
                }
            }
            let mut ctx = Ctx {
                job: self.job,
                sim: self.sim,
                events: &mut events,
                faults: &mut faults,
            };
            match cluster.run_iteration(&mut ctx, &progress) {
                Ok(out) => {
                    progress = out.next;
                    rows.push(out.row);
                }
                Err(e) => {
                    result = Err(ProbeError::Fault {
                        reason: e.to_string(),
                        wall_time: 0.0,
                        cost: 0.0,
                    });
                    break;
                }
            }
        }
        let end = self.sim.clock;
        cluster.shutdown(self.sim, end);
        self.sim.object_store.delete_prefix("probe/");
        spent.0 = end - start.0;
        spent.1 = self.sim.cost_at(end, &[]) - start.1;
        result.map(|_| rows)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Profiler for SimProfiler<'_> {
    fn profile(&mut self, config: DeploymentConfig) -> Result<Probe, ProbeError> {
        if self.time_left <= 0.0 || self.cost_left <= 0.0 {
            return Err(ProbeError::BudgetExhausted);
        }
        let mut spent = (0.0, 0.0);
        let result = self.run_probe(config, &mut spent);
        self.probes += 1;
        self.time_left -= spent.0;
        self.cost_left -= spent.1;
        match result {
            Ok(rows) if !rows.is_empty() => Ok(Probe {
                iter_time: median(rows.iter().map(IterationRow::iter_time).collect()),
                iter_cost: median(rows.iter().map(|r| r.cost).collect()),
                wall_time: spent.0,
                cost: spent.1,
            }),
            Ok(_) | Err(ProbeError::BudgetExhausted) => Err(ProbeError::BudgetExhausted),
            Err(ProbeError::Fault { reason, .. }) => Err(ProbeError::Fault {
                reason,
                wall_time: spent.0,
                cost: spent.1,
            }),
        }
    }
}

/// An observation together with the workload it was profiled under.
#[derive(Debug, Clone)]
struct Profiled {
    observation: Observation,
    batch_size: usize,
    param_count: usize,
}

struct Driver<'a> {
    job: &'a JobSpec,
    sim: Sim,
    events: Vec<Event>,
    rows: Vec<IterationRow>,
    slots: Vec<SlotStats>,
    profiled: Vec<Profiled>,
    profiling_time: f64,
    profiling_cost: f64,
    probes: u64,
    searches: u64,
}

impl Driver<'_> {
    fn event(&mut self, kind: EventKind, progress: &Progress, detail: String) {
        self.events.push(Event {
            time: self.sim.clock,
            kind,
            worker: None,
            epoch: progress.epoch,
            iteration: progress.iteration,
            detail,
        });
    }

    fn objective(&self, progress: &Progress) -> ObjectiveModel {
        let p = &self.job.platform;
        let mut model = ObjectiveModel::new(
            self.job.goal,
            self.job
                .remaining_iterations(progress.epoch, progress.cursor) as f64,
        );
        model.restart = Some(RestartModel {
            max_duration: p.max_duration,
            startup_time: p.startup_overhead(),
            price_per_gb_second: p.price_per_gb_second,
            price_per_invocation: p.price_per_invocation,
            guard_iterations: GUARD_ITERATIONS,
        });
        model.base_time = self.sim.clock;
        model.base_cost = self.sim.cost_at(self.sim.clock, &[]);
        model
    }

    /// Searches for a deployment for the remaining work. Returns the chosen
    /// observation and whether it is expected to meet the goal.
    fn optimize(
        &mut self,
        progress: &Progress,
        checkpoint: Option<String>,
        seed: Option<DeploymentConfig>,
    ) -> Result<(Observation, SearchOutcome), SchedulerError> {
        let job = self.job;
        let batch = job.batch_schedule.batch_at(progress.epoch);
        let params = job.model_at(progress.epoch).param_count();
        let objective = self.objective(progress);
        let prior: Vec<Observation> = self
            .profiled
            .iter()
            .filter(|p| p.batch_size == batch && p.param_count == params)
            .map(|p| p.observation.clone())
            .collect();
        let space = job.optimizer.space.cap_workers(batch as u32);
        let mut limits = job.optimizer.limits;
        limits.seed = limits.seed.wrapping_add(self.searches);
        self.searches += 1;
        let share = job.optimizer.profiling_share;
        let time_left = job
            .goal
            .t_max
            .map_or(f64::INFINITY, |t| share * t - self.profiling_time);
        let cost_left = job
            .goal
            .s_max
            .map_or(f64::INFINITY, |s| share * s - self.profiling_cost);
        let seeds: Vec<DeploymentConfig> = seed.into_iter().collect();

        let start = (self.sim.clock, self.sim.cost_at(self.sim.clock, &[]));
        let mut profiler = SimProfiler::new(
            job,
            &mut self.sim,
            *progress,
            checkpoint,
            time_left,
            cost_left,
            self.probes,
        );
        let outcome = search(&objective, &mut profiler, &space, &limits, &prior, &seeds)?;
        self.probes = profiler.probes();
        self.profiling_time += self.sim.clock - start.0;
        self.profiling_cost += self.sim.cost_at(self.sim.clock, &[]) - start.1;

        for o in &outcome.observations {
            if !prior.iter().any(|p| p.config == o.config) {
                self.profiled.push(Profiled {
                    observation: o.clone(),
                    batch_size: batch,
                    param_count: params,
                });
            }
        }
        // re-score with what profiling itself consumed
        let rebased = self.objective(progress);
        let mut scored = outcome.observations.clone();
        rebased.evaluate(&mut scored);
        let chosen = scored
            .iter()
            .min_by(|a, b| {
                b.feasible
                    .cmp(&a.feasible)
                    .then(a.objective.total_cmp(&b.objective))
                    .then(a.config.cmp(&b.config))
            })
            .cloned()
            .ok_or(OptimizerError::NoSuccessfulProbe)?;
        self.event(
            EventKind::Search,
            progress,
            format!(
                "best {} feasible={} probes={} stop={:?}",
                chosen.config, chosen.feasible, outcome.probes, outcome.stop
            ),
        );
        Ok((chosen, outcome))
    }

    fn retire(&mut self, cluster: &mut Cluster) {
        let at = self.sim.clock;
        cluster.shutdown(&mut self.sim, at);
        if self.slots.len() < cluster.stats.len() {
            self.slots.resize(cluster.stats.len(), SlotStats::default());
        }
        for (total, s) in self.slots.iter_mut().zip(&cluster.stats) {
            total.invocations += s.invocations;
            total.cold_starts += s.cold_starts;
            total.failures += s.failures;
            total.duration_kills += s.duration_kills;
            total.checkpoint_exits += s.checkpoint_exits;
        }
        cluster
            .stats
            .iter_mut()
            .for_each(|s| *s = SlotStats::default());
    }

    /// Keeps only `keep` among the training checkpoints.
    fn prune_checkpoints(&mut self, keep: Option<&str>) {
        for key in self.sim.object_store.list_keys("ckpt/") {
            if Some(key.as_str()) != keep {
                self.sim.object_store.delete(&key);
            }
        }
    }

    fn deploy(
        &mut self,
        config: DeploymentConfig,
        progress: &Progress,
        checkpoint: Option<String>,
    ) -> Result<Cluster, SchedulerError> {
        self.prune_checkpoints(checkpoint.as_deref());
        self.event(EventKind::Deploy, progress, config.to_string());
        Cluster::new(self.job, config, 0, "", checkpoint)
    }

    /// Conservative estimate of the next iteration against the goal limits.
    fn goal_stop(&self, cluster: &Cluster, expected: Option<f64>) -> Option<RunStatus> {
        let last = cluster.last_iter_time().or(expected)?;
        let params = &self.job.platform;
        let startup = if cluster.needs_startup() {
            params.startup_overhead()
        } else {
            0.0
        };
        let next = GUARD_ITERATIONS * last + startup;
        let now = self.sim.clock;
        if let Some(t_max) = self.job.goal.t_max {
            if now + next > t_max {
                return Some(RunStatus::StoppedAtDeadline);
            }
        }
        if let Some(s_max) = self.job.goal.s_max {
            let n = cluster.config.workers as f64;
            let gb = cluster.config.memory_mb as f64 / 1024.0;
            let rate = n * gb * params.price_per_gb_second
                + self.job.parameter_store.standing_cost_per_second;
            let starts = if cluster.needs_startup() {
                n * params.price_per_invocation
            } else {
                0.0
            };
            if self.sim.cost_at(now, &cluster.open_invocations()) + next * rate + starts > s_max {
                return Some(RunStatus::StoppedAtBudget);
            }
        }
        None
    }
}

/// Runs a job end to end on a fresh simulator.
pub fn run_job(job: &JobSpec) -> Result<RunLedger, SchedulerError> {
    job.validate()?;
    let mut d = Driver {
        job,
        sim: Sim::new(job)?,
        events: Vec::new(),
        rows: Vec::new(),
        slots: Vec::new(),
        profiled: Vec::new(),
        profiling_time: 0.0,
        profiling_cost: 0.0,
        probes: 0,
        searches: 0,
    };
    let data = synthesize(&job.dataset, job.model.n_features, job.seed);
    let (manifest, upload) = upload_artifacts(
        &data,
        &job.model,
        job.dataset.max_chunk_bytes,
        &mut d.sim.object_store,
    )?;
    d.sim.clock += upload;
    let mut progress = Progress::start();
    d.event(
        EventKind::Upload,
        &progress,
        format!(
            "{} chunks, {} bytes",
            manifest.chunks.len(),
            manifest.total_bytes
        ),
    );

    let mut expected = None;
    let config = match job.deployment {
        Some(c) => c,
        None => {
            let (chosen, _) = match d.optimize(&progress, None, None) {
                Err(SchedulerError::Optimizer(OptimizerError::NoSuccessfulProbe)) => {
                    return Err(SchedulerError::Infeasible {
                        best: DeploymentConfig::new(0, 0),
                        detail: "no probe completed within the profiling allowance".into(),
                    })
                }
                r => r?,
            };
            if !chosen.feasible {
                return Err(SchedulerError::Infeasible {
                    best: chosen.config,
                    detail: format!(
                        "{:.4} s and ${:.6} per iteration",
                        chosen.iter_time, chosen.iter_cost
                    ),
                });
            }
            expected = Some(chosen.iter_time);
            chosen.config
        }
    };
    let mut cluster = d.deploy(config, &progress, None)?;
    let mut detector = ChangeDetector::new(
        job.batch_schedule.batch_at(0),
        job.model_at(0).param_count(),
    );
    let mut faults: BTreeSet<(usize, u64)> =
        job.faults.iter().map(|f| (f.worker, f.iteration)).collect();
    let mut reoptimizations = 0;
    let mut status = RunStatus::Completed;

    while progress.epoch < job.epochs {
        if let Some(stop) = d.goal_stop(&cluster, expected) {
            status = stop;
            d.event(EventKind::GuardStop, &progress, format!("{stop:?}"));
            break;
        }
        let mut ctx = Ctx {
            job,
            sim: &mut d.sim,
            events: &mut d.events,
            faults: &mut faults,
        };
        let out = cluster.run_iteration(&mut ctx, &progress)?;
        let change = out.reports.iter().find_map(|r| detector.observe(r));
        d.rows.push(out.row);
        progress = out.next;
        let Some(change) = change else { continue };

        d.event(
            EventKind::ChangeDetected,
            &progress,
            format!(
                "batch {} -> {}, params {} -> {}",
                change.from.0, change.to.0, change.from.1, change.to.1
            ),
        );
        if job.optimizer.adapt && job.deployment.is_none() && progress.epoch < job.epochs {
            let checkpoint = cluster.latest_checkpoint().map(str::to_string);
            d.retire(&mut cluster);
            let current = cluster.config;
            let (chosen, _) = d.optimize(&progress, checkpoint.clone(), Some(current))?;
            reoptimizations += 1;
            d.event(
                EventKind::Reoptimization,
                &progress,
                format!("{current} -> {}", chosen.config),
            );
            expected = Some(chosen.iter_time);
            if chosen.config != current {
                progress.partition_base = progress.cursor;
            }
            cluster = d.deploy(chosen.config, &progress, checkpoint)?;
        }
        detector.rebaseline(change.to.0, change.to.1);
    }

    let final_parameters = match cluster.parameters() {
        Some(p) => p.to_vec(),
        None => match cluster.latest_checkpoint() {
            Some(key) => Checkpoint::decode(&d.sim.object_store.get(key)?.0.bytes)?.parameters,
            None => Model::init(&job.model_at(0), job.seed)?.parameters,
        },
    };
    d.retire(&mut cluster);
    let final_model_config = {
        let mut c = job.model.clone();
        c.hidden = c
            .hidden_for_params(final_parameters.len())
            .unwrap_or(c.hidden);
        c
    };
    let final_loss = Model::from_parameters(&final_model_config, final_parameters.clone())
        .ok()
        .map(|m| m.loss(&data));
    info!(
        "finished after {} iterations at t = {:.3} s",
        d.rows.len(),
        d.sim.clock
    );
    d.event(EventKind::Finished, &progress, format!("{status:?}"));

    let platform_cost = d.sim.platform.total_cost();
    let observations: Vec<Observation> = d.profiled.iter().map(|p| p.observation.clone()).collect();
    Ok(RunLedger {
        rows: d.rows,
        events: d.events,
        status,
        wall_time: d.sim.clock,
        platform_cost,
        standing_cost: d.sim.standing_cost,
        total_cost: platform_cost + d.sim.standing_cost,
        profiling_time: d.profiling_time,
        profiling_cost: d.profiling_cost,
        probes: d.probes as usize,
        reoptimizations,
        slots: d.slots,
        final_config: cluster.config,
        final_parameters,
        final_loss,
        observations,
        invocations: d.sim.platform.ledger().to_vec(),
    })
}
