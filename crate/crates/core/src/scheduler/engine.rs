//! Bulk-synchronous training on the simulated platform.
//!
//! Every iteration runs three barrier-separated phases on each worker slot:
//! compute and shard upload, shard aggregation, then reconstruction, update
//! and checkpoint. A slot whose invocation fails or hits the duration limit is
//! re-invoked right away; the fresh invocation restores from the slot's last
//! checkpoint and redoes the interrupted phase.

use std::collections::BTreeSet;

use log::debug;

use super::change::WorkerReport;
use super::ledger::{Event, EventKind, IterationRow, SlotStats};
use super::{JobSpec, SchedulerError};
use crate::optimizer::DeploymentConfig;
use crate::platform::{
    billed_cost, compute_speed, FunctionSpec, InstanceId, Invocation, Outcome, Platform,
};
use crate::scheduler::artifacts::MODEL_CONFIG_KEY;
use crate::storage::{Client, Store};
use crate::sync::{self, plan_shards, GradientVector, ShardPlan, SyncRound, SyncTiming};
use crate::trainer::{
    apply_update, checkpoint_key, fetch_partition, train_step, Checkpoint, Dataset,
    MinibatchBuffer, Model,
};

pub const HANDLER_ID: &str = "faastrain-worker";
/// Iterations of headroom the duration guard keeps before the limit.
pub const GUARD_ITERATIONS: f64 = 1.5;

/// Simulator state shared by training and profiling.
#[derive(Debug)]
pub struct Sim {
    pub platform: Platform,
    pub object_store: Store,
    pub param_store: Store,
    pub clock: f64,
    pub standing_cost: f64,
}

impl Sim {
    pub fn new(job: &JobSpec) -> Result<Self, SchedulerError> {
        let mut platform = Platform::new(job.platform.clone())?;
        platform.deploy(HANDLER_ID);
        Ok(Self {
            platform,
            object_store: Store::new(job.object_store.clone()),
            param_store: Store::new(job.parameter_store.clone()),
            clock: 0.0,
            standing_cost: 0.0,
        })
    }

    /// Platform charges so far including open invocations billed up to `at`,
    /// plus standing storage cost.
    pub fn cost_at(&self, at: f64, open: &[&Invocation]) -> f64 {
        let params = self.platform.params();
        self.platform.total_cost()
            + self.standing_cost
            + open
                .iter()
                .map(|i| billed_cost(i.memory_mb, (at - i.start_time).max(0.0), params))
                .sum::<f64>()
    }
}

/// Position of training in the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub epoch: u64,
    /// Iteration index within the epoch.
    pub iteration: u64,
    pub global_iteration: u64,
    /// Position in the epoch's sample order where the next minibatch starts.
    pub cursor: usize,
    /// Position where the current worker partitioning of this epoch began.
    pub partition_base: usize,
}

impl Progress {
    pub fn start() -> Self {
        Self {
            epoch: 0,
            iteration: 0,
            global_iteration: 0,
            cursor: 0,
            partition_base: 0,
        }
    }

    fn advanced(&self, batch: usize, epoch_len: usize) -> Self {
        let cursor = (self.cursor + batch).min(epoch_len);
        if cursor >= epoch_len {
            Self {
                epoch: self.epoch + 1,
                iteration: 0,
                global_iteration: self.global_iteration + 1,
                cursor: 0,
                partition_base: 0,
            }
        } else {
            Self {
                iteration: self.iteration + 1,
                global_iteration: self.global_iteration + 1,
                cursor,
                ..*self
            }
        }
    }
}

struct WorkerState {
    model: Model,
    buffer: MinibatchBuffer,
    computed: bool,
}

#[derive(Default)]
struct Slot {
    invocation: Option<Invocation>,
    restart_next: bool,
    state: Option<WorkerState>,
    consecutive_failures: u32,
    ckpt_key: Option<String>,
}

/// Borrowed context for one iteration.
pub struct Ctx<'a> {
    pub job: &'a JobSpec,
    pub sim: &'a mut Sim,
    pub events: &'a mut Vec<Event>,
    /// Pending injected faults as (worker, global iteration); consumed on use.
    pub faults: &'a mut BTreeSet<(usize, u64)>,
}

pub struct IterationOutcome {
    pub row: IterationRow,
    pub reports: Vec<WorkerReport>,
    pub next: Progress,
}

enum Interrupt {
    Failed,
    Killed,
}

/// The n live worker slots of one deployment.
pub struct Cluster {
    pub config: DeploymentConfig,
    shards: Option<usize>,
    speed: f64,
    slots: Vec<Slot>,
    pub stats: Vec<SlotStats>,
    instance_base: InstanceId,
    prefix: String,
    last_iter_time: Option<f64>,
}

impl Cluster {
    /// `prefix` namespaces checkpoint keys; `initial_ckpt` is where slots
    /// without a checkpoint of their own restore from.
    pub fn new(
        job: &JobSpec,
        config: DeploymentConfig,
        instance_base: InstanceId,
        prefix: &str,
        initial_ckpt: Option<String>,
    ) -> Result<Self, SchedulerError> {
        let speed = compute_speed(config.memory_mb, &job.platform)?;
        let n = config.workers as usize;
        if n == 0 {
            return Err(SchedulerError::InvalidSpec(
                "a deployment needs at least one worker".into(),
            ));
        }
        let slots = (0..n)
            .map(|_| Slot {
                ckpt_key: initial_ckpt.clone(),
                ..Slot::default()
            })
            .collect();
        Ok(Self {
            config,
            shards: job.shards,
            speed,
            slots,
            stats: vec![SlotStats::default(); n],
            instance_base,
            prefix: prefix.to_string(),
            last_iter_time: None,
        })
    }

    pub fn workers(&self) -> usize {
        self.slots.len()
    }

    pub fn latest_checkpoint(&self) -> Option<&str> {
        self.slots.first().and_then(|s| s.ckpt_key.as_deref())
    }

    pub fn last_iter_time(&self) -> Option<f64> {
        self.last_iter_time
    }

    pub fn open_invocations(&self) -> Vec<&Invocation> {
        self.slots
            .iter()
            .filter_map(|s| s.invocation.as_ref())
            .collect()
    }

    /// Time a fresh invocation needs before computing, if any slot is idle.
    pub fn needs_startup(&self) -> bool {
        self.slots.iter().any(|s| s.invocation.is_none())
    }

    fn plan(&self, params: usize) -> Result<ShardPlan, SchedulerError> {
        Ok(plan_shards(
            params,
            self.workers(),
            self.shards.unwrap_or(self.workers()),
        )?)
    }

    fn event(
        &self,
        ctx: &mut Ctx,
        time: f64,
        kind: EventKind,
        worker: Option<usize>,
        p: &Progress,
        detail: String,
    ) {
        if self.prefix.is_empty() {
            ctx.events.push(Event {
                time,
                kind,
                worker,
                epoch: p.epoch,
                iteration: p.iteration,
                detail,
            });
        }
    }

    fn interrupt(
        &mut self,
        ctx: &mut Ctx,
        w: usize,
        at: f64,
        why: Interrupt,
        p: &Progress,
    ) -> Result<f64, SchedulerError> {
        let inv = self.slots[w]
            .invocation
            .take()
            .expect("interrupting a running slot");
        let (outcome, kind) = match why {
            Interrupt::Failed => (Outcome::Failed, EventKind::Failure),
            Interrupt::Killed => (Outcome::DurationExceeded, EventKind::DurationKill),
        };
        let end = ctx.sim.platform.close(&inv, at, outcome).end_time;
        match why {
            Interrupt::Failed => self.stats[w].failures += 1,
            Interrupt::Killed => self.stats[w].duration_kills += 1,
        }
        let slot = &mut self.slots[w];
        slot.state = None;
        slot.restart_next = true;
        slot.consecutive_failures += 1;
        self.event(
            ctx,
            end,
            kind,
            Some(w),
            p,
            format!("invocation {}", inv.invocation_id),
        );
        if self.slots[w].consecutive_failures > ctx.job.max_consecutive_failures {
            return Err(SchedulerError::RestartStorm {
                worker: w,
                failures: self.slots[w].consecutive_failures,
            });
        }
        Ok(end)
    }

    /// Makes sure slot `w` has a running invocation with restored state.
    /// Returns the time at which the worker is ready.
    fn ensure_running(
        &mut self,
        ctx: &mut Ctx,
        w: usize,
        at: f64,
        p: &Progress,
    ) -> Result<f64, SchedulerError> {
        let mut t = at;
        if let Some(inv) = &self.slots[w].invocation {
            if inv.deadline(ctx.sim.platform.params()) < t {
                // killed while idling at a barrier
                let deadline = inv.deadline(ctx.sim.platform.params());
                t = self
                    .interrupt(ctx, w, deadline, Interrupt::Killed, p)?
                    .max(deadline);
                t = t.max(at);
            }
        }
        if self.slots[w].invocation.is_none() {
            let payload = format!(
                "{{\"worker\":{w},\"workers\":{},\"base\":{}}}",
                self.workers(),
                p.partition_base
            );
            let spec = FunctionSpec::new(self.config.memory_mb, HANDLER_ID)?
                .with_payload(payload.into_bytes());
            let restart = self.slots[w].restart_next;
            let inv =
                ctx.sim
                    .platform
                    .open(self.instance_base + w as InstanceId, &spec, t, restart)?;
            self.stats[w].invocations += 1;
            if inv.cold {
                self.stats[w].cold_starts += 1;
            }
            if restart {
                self.event(
                    ctx,
                    t,
                    EventKind::Restart,
                    Some(w),
                    p,
                    format!("invocation {}", inv.invocation_id),
                );
            }
            t = inv.ready_at;
            self.slots[w].invocation = Some(inv);
            self.slots[w].restart_next = false;
        }
        if self.slots[w].state.is_none() {
            let (state, dt) = self.restore(ctx, w, p)?;
            t += dt;
            self.slots[w].state = Some(state);
        }
        // a new epoch needs a new partition
        let epoch = p.epoch;
        let needs_fetch = {
            let s = self.slots[w].state.as_ref().expect("restored");
            s.buffer.partition.epoch != epoch || s.buffer.partition.base != p.partition_base
        };
        if needs_fetch {
            let (partition, dt) = fetch_partition(
                w,
                self.workers(),
                epoch,
                p.partition_base,
                ctx.job.seed,
                &mut ctx.sim.object_store,
            )?;
            t += dt;
            let s = self.slots[w].state.as_mut().expect("restored");
            s.buffer = MinibatchBuffer::new(partition, p.cursor);
        }
        Ok(t)
    }

    fn restore(
        &mut self,
        ctx: &mut Ctx,
        w: usize,
        p: &Progress,
    ) -> Result<(WorkerState, f64), SchedulerError> {
        let client = Client::Worker(w);
        let store = &mut ctx.sim.object_store;
        let (_, mut t) = store.get_by(client, MODEL_CONFIG_KEY)?;
        let model = match &self.slots[w].ckpt_key {
            Some(key) => {
                let (blob, dt) = store.get_by(client, key)?;
                t += dt;
                let ckpt = Checkpoint::decode(&blob.bytes)?;
                let mut config = ctx.job.model.clone();
                config.hidden =
                    config
                        .hidden_for_params(ckpt.parameters.len())
                        .ok_or_else(|| {
                            SchedulerError::InvalidSpec(format!(
                                "checkpoint {key} has an impossible parameter count"
                            ))
                        })?;
                Model::from_parameters(&config, ckpt.parameters)?
            }
            None => Model::init(&ctx.job.model_at(0), ctx.job.seed)?,
        };
        let (partition, dt) = fetch_partition(
            w,
            self.workers(),
            p.epoch,
            p.partition_base,
            ctx.job.seed,
            store,
        )?;
        t += dt;
        let buffer = MinibatchBuffer::new(partition, p.cursor);
        Ok((
            WorkerState {
                model,
                buffer,
                computed: false,
            },
            t,
        ))
    }

    fn deadline(&self, ctx: &Ctx, w: usize) -> f64 {
        self.slots[w]
            .invocation
            .as_ref()
            .map_or(f64::INFINITY, |i| i.deadline(ctx.sim.platform.params()))
    }

    /// Runs one training iteration starting at `ctx.sim.clock`.
    pub fn run_iteration(
        &mut self,
        ctx: &mut Ctx,
        p: &Progress,
    ) -> Result<IterationOutcome, SchedulerError> {
        let job = ctx.job;
        let t0 = ctx.sim.clock;
        let n = self.workers();
        let batch = job.batch_schedule.batch_at(p.epoch);
        let model_config = job.model_at(p.epoch);
        let params = model_config.param_count();
        let plan = self.plan(params)?;
        let round = SyncRound::new(p.epoch, p.iteration);
        let mut reports = Vec::new();

        // duration guard: leave voluntarily when the next iteration might not fit
        if let Some(last) = self.last_iter_time {
            for w in 0..n {
                if let Some(inv) = &self.slots[w].invocation {
                    let remaining = inv.deadline(ctx.sim.platform.params()) - t0;
                    if remaining < GUARD_ITERATIONS * last {
                        let inv = self.slots[w].invocation.take().expect("checked");
                        ctx.sim.platform.close(&inv, t0, Outcome::Completed);
                        self.stats[w].checkpoint_exits += 1;
                        self.slots[w].state = None;
                        self.slots[w].restart_next = true;
                        self.event(
                            ctx,
                            t0,
                            EventKind::CheckpointExit,
                            Some(w),
                            p,
                            format!("{remaining:.3} s left"),
                        );
                    }
                }
            }
        }

        // phase A: compute the local gradient and upload its shards
        let mut ends = vec![t0; n];
        let mut ul_starts = vec![t0; n];
        let mut timings = vec![SyncTiming::default(); n];
        let mut losses = vec![0.0; n];
        let bytes_before = self.param_bytes(ctx, n);
        for w in 0..n {
            let mut start = t0;
            loop {
                let mut t = self.ensure_running(ctx, w, start, p)?;
                let deadline = self.deadline(ctx, w);
                let slot = &mut self.slots[w];
                let doomed = slot.invocation.as_ref().is_some_and(|i| i.doomed);
                let state = slot.state.as_mut().expect("running");
                let doomed = doomed && !state.computed;
                if state.model.hidden != model_config.hidden {
                    state
                        .model
                        .resize_hidden(model_config.hidden, job.seed.wrapping_add(p.epoch))?;
                }
                // peek: the buffer only advances once the update is committed
                let cursor = state.buffer.cursor;
                let minibatch = state
                    .buffer
                    .next_minibatch(batch)
                    .unwrap_or_else(|| Dataset::empty(model_config.n_features));
                state.buffer.cursor = cursor;
                let compute =
                    minibatch.len() as f64 * params as f64 * job.workload.seconds_per_sample_param
                        / self.speed;
                let injected = ctx.faults.remove(&(w, p.global_iteration));
                if doomed || injected {
                    let fail_at = (t + 0.5 * compute).min(deadline);
                    reports.push(self.failed_report(w, p, batch, params));
                    start = self.interrupt(ctx, w, fail_at, Interrupt::Failed, p)?;
                    continue;
                }
                state.computed = true;
                let (grad, loss) = if minibatch.is_empty() {
                    (GradientVector::zeros(params), 0.0)
                } else {
                    train_step(&state.model, &minibatch)?
                };
                t += compute;
                if t > deadline {
                    reports.push(self.failed_report(w, p, batch, params));
                    start = self.interrupt(ctx, w, deadline, Interrupt::Killed, p)?;
                    continue;
                }
                ul_starts[w] = t;
                let timing = sync::generate_and_upload_shards(
                    w,
                    &grad,
                    &plan,
                    round,
                    &mut ctx.sim.param_store,
                )?;
                t += timing.ul_shard;
                if t > deadline {
                    reports.push(self.failed_report(w, p, batch, params));
                    start = self.interrupt(ctx, w, deadline, Interrupt::Killed, p)?;
                    continue;
                }
                timings[w] = timing;
                losses[w] = loss;
                ends[w] = t;
                break;
            }
        }
        let moved = self.param_bytes(ctx, n) - bytes_before;
        let floor = ul_starts.iter().copied().fold(f64::INFINITY, f64::min)
            + ctx.sim.param_store.params().contention_floor(moved);
        let t_a = ends.iter().copied().fold(floor, f64::max);

        // phase B: aggregate the owned shards
        let bytes_before = self.param_bytes(ctx, n);
        for w in 0..n {
            let mut start = t_a;
            loop {
                let mut t = self.ensure_running(ctx, w, start, p)?;
                let deadline = self.deadline(ctx, w);
                let timing = sync::aggregate_assigned(w, &plan, round, &mut ctx.sim.param_store)?;
                t += timing.dl_shard + timing.ul_aggr;
                if t > deadline {
                    reports.push(self.failed_report(w, p, batch, params));
                    start = self.interrupt(ctx, w, deadline, Interrupt::Killed, p)?;
                    continue;
                }
                timings[w] = timings[w].merge(&timing);
                ends[w] = t;
                break;
            }
        }
        let moved = self.param_bytes(ctx, n) - bytes_before;
        let t_b = ends.iter().copied().fold(
            t_a + ctx.sim.param_store.params().contention_floor(moved),
            f64::max,
        );

        // phase C: reconstruct, update, checkpoint
        let epoch_len = job.dataset.n_samples;
        let next = p.advanced(batch, epoch_len);
        let bytes_before = self.param_bytes(ctx, n);
        let mut new_keys = vec![String::new(); n];
        for w in 0..n {
            let mut start = t_b;
            loop {
                let mut t = self.ensure_running(ctx, w, start, p)?;
                let deadline = self.deadline(ctx, w);
                let (grad, timing) = sync::reconstruct(w, &plan, round, &mut ctx.sim.param_store)?;
                t += timing.dl_grad;
                let state = self.slots[w].state.as_mut().expect("running");
                if state.model.hidden != model_config.hidden {
                    state
                        .model
                        .resize_hidden(model_config.hidden, job.seed.wrapping_add(p.epoch))?;
                }
                let mut model = state.model.clone();
                apply_update(&mut model, &grad, job.learning_rate)?;
                let ckpt = Checkpoint {
                    epoch: next.epoch,
                    iteration: next.iteration,
                    data_cursor: next.cursor as u64,
                    parameters: model.parameters.clone(),
                    batch_size: batch as u64,
                    success_flag: true,
                    rng_state: job.seed.to_le_bytes().to_vec(),
                };
                let key = format!(
                    "{}{}",
                    self.prefix,
                    checkpoint_key(w, next.epoch, next.iteration)
                );
                t += ctx
                    .sim
                    .object_store
                    .put_by(Client::Worker(w), &key, ckpt.encode())?;
                if t > deadline {
                    reports.push(self.failed_report(w, p, batch, params));
                    start = self.interrupt(ctx, w, deadline, Interrupt::Killed, p)?;
                    continue;
                }
                let state = self.slots[w].state.as_mut().expect("running");
                state.model = model;
                state.buffer.next_minibatch(batch);
                timings[w] = timings[w].merge(&timing);
                ends[w] = t;
                new_keys[w] = key;
                break;
            }
        }
        let moved = self.param_bytes(ctx, n) - bytes_before;
        let t_c = ends.iter().copied().fold(
            t_b + ctx.sim.param_store.params().contention_floor(moved),
            f64::max,
        );

        // retire the previous checkpoints and this round's keys
        let current: BTreeSet<&String> = new_keys.iter().collect();
        let own = format!("{}ckpt/", self.prefix);
        for (w, key) in new_keys.iter().enumerate() {
            if let Some(old) = self.slots[w].ckpt_key.replace(key.clone()) {
                if !current.contains(&old) && old.starts_with(&own) {
                    ctx.sim.object_store.delete(&old);
                }
            }
            self.slots[w].consecutive_failures = 0;
        }
        ctx.sim.param_store.delete_prefix(&round.prefix());

        let iter_time = t_c - t0;
        self.last_iter_time = Some(iter_time);
        ctx.sim.clock = t_c;
        let standing = ctx.sim.param_store.params().standing_cost_per_second * iter_time;
        ctx.sim.standing_cost += standing;
        let gb_seconds = n as f64 * self.config.memory_mb as f64 / 1024.0 * iter_time;
        let cost = gb_seconds * ctx.sim.platform.params().price_per_gb_second + standing;
        let slowest = timings.iter().fold(SyncTiming::default(), |a, b| a.max(b));
        for (w, timing) in timings.iter().enumerate() {
            reports.push(WorkerReport {
                worker: w,
                epoch: p.epoch,
                iteration: p.iteration,
                success_flag: true,
                iter_time,
                sync_timing: *timing,
                observed_batch_size: batch,
                observed_param_count: params,
            });
        }
        debug!("iteration {} took {iter_time:.4} s", p.global_iteration);
        Ok(IterationOutcome {
            row: IterationRow {
                epoch: p.epoch,
                iteration: p.iteration,
                global_iteration: p.global_iteration,
                start: t0,
                end: t_c,
                config: self.config,
                batch_size: batch,
                param_count: params,
                loss: losses.iter().sum::<f64>() / n as f64,
                timing: slowest,
                cost,
            },
            reports,
            next,
        })
    }

    fn param_bytes(&self, ctx: &Ctx, n: usize) -> u64 {
        (0..n)
            .map(|w| {
                let t = ctx.sim.param_store.traffic(Client::Worker(w));
                t.bytes_up + t.bytes_down
            })
            .sum()
    }

    fn failed_report(&self, w: usize, p: &Progress, batch: usize, params: usize) -> WorkerReport {
        WorkerReport {
            worker: w,
            epoch: p.epoch,
            iteration: p.iteration,
            success_flag: false,
            iter_time: 0.0,
            sync_timing: SyncTiming::default(),
            observed_batch_size: batch,
            observed_param_count: params,
        }
    }

    /// Model replica of slot 0, if it is running.
    pub fn parameters(&self) -> Option<&[f64]> {
        self.slots
            .first()?
            .state
            .as_ref()
            .map(|s| s.model.parameters.as_slice())
    }

    /// Ends every running invocation at `at`.
    pub fn shutdown(&mut self, sim: &mut Sim, at: f64) {
        for slot in &mut self.slots {
            if let Some(inv) = slot.invocation.take() {
                sim.platform.close(&inv, at, Outcome::Completed);
            }
            slot.state = None;
        }
    }
}
