//! Run ledger and its CSV / JSON exports.

use std::io::Write;

use serde::Serialize;

use crate::optimizer::{DeploymentConfig, Observation};
use crate::platform::InvocationRecord;
use crate::sync::SyncTiming;

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub epoch: u64,
    pub iteration: u64,
    pub global_iteration: u64,
    pub start: f64,
    pub end: f64,
    pub config: DeploymentConfig,
    pub batch_size: usize,
    pub param_count: usize,
    /// Mean of the workers' local minibatch losses.
    pub loss: f64,
    /// Slowest worker per synchronization step.
    pub timing: SyncTiming,
    /// Compute time billed for this iteration across all slots, plus the
    /// parameter store's standing cost.
    pub cost: f64,
}

impl IterationRow {
    pub fn iter_time(&self) -> f64 {
        self.end - self.start
    }

    pub fn throughput(&self) -> f64 {
        self.batch_size as f64 / self.iter_time()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Upload,
    Search,
    Deploy,
    ChangeDetected,
    Reoptimization,
    Failure,
    DurationKill,
    Restart,
    CheckpointExit,
    GuardStop,
    Finished,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Upload => "upload",
            EventKind::Search => "search",
            EventKind::Deploy => "deploy",
            EventKind::ChangeDetected => "change_detected",
            EventKind::Reoptimization => "reoptimization",
            EventKind::Failure => "failure",
            EventKind::DurationKill => "duration_kill",
            EventKind::Restart => "restart",
            EventKind::CheckpointExit => "checkpoint_exit",
            EventKind::GuardStop => "guard_stop",
            EventKind::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub worker: Option<usize>,
    pub epoch: u64,
    pub iteration: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped before the next iteration could break the deadline.
    StoppedAtDeadline,
    /// Stopped before the next iteration could break the budget.
    StoppedAtBudget,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SlotStats {
    pub invocations: u64,
    pub cold_starts: u64,
    pub failures: u64,
    pub duration_kills: u64,
    pub checkpoint_exits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub rows: Vec<IterationRow>,
    pub events: Vec<Event>,
    pub status: RunStatus,
    pub wall_time: f64,
    pub platform_cost: f64,
    pub standing_cost: f64,
    pub total_cost: f64,
    pub profiling_time: f64,
    pub profiling_cost: f64,
    pub probes: usize,
    pub reoptimizations: usize,
    /// Training slots only; profiling probes are not included.
    pub slots: Vec<SlotStats>,
    pub final_config: DeploymentConfig,
    pub final_parameters: Vec<f64>,
    pub final_loss: Option<f64>,
    pub observations: Vec<Observation>,
    /// Platform ledger, probes included.
    pub invocations: Vec<InvocationRecord>,
}

impl RunLedger {
    pub fn restarts(&self) -> u64 {
        self.slots
            .iter()
            .map(|s| s.failures + s.duration_kills)
            .sum()
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            status: self.status,
            wall_time_s: self.wall_time,
            total_cost_usd: self.total_cost,
            platform_cost_usd: self.platform_cost,
            standing_cost_usd: self.standing_cost,
            profiling_time_s: self.profiling_time,
            profiling_cost_usd: self.profiling_cost,
            probes: self.probes,
            iterations: self.rows.len(),
            reoptimizations: self.reoptimizations,
            restarts: self.restarts(),
            invocations: self.slots.iter().map(|s| s.invocations).sum(),
            cold_starts: self.slots.iter().map(|s| s.cold_starts).sum(),
            final_workers: self.final_config.workers,
            final_memory_mb: self.final_config.memory_mb,
            final_loss: self.final_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub status: RunStatus,
    pub wall_time_s: f64,
    pub total_cost_usd: f64,
    pub platform_cost_usd: f64,
    pub standing_cost_usd: f64,
    pub profiling_time_s: f64,
    pub profiling_cost_usd: f64,
    pub probes: usize,
    pub iterations: usize,
    pub reoptimizations: usize,
    pub restarts: u64,
    pub invocations: u64,
    pub cold_starts: u64,
    pub final_workers: u32,
    pub final_memory_mb: u32,
    pub final_loss: Option<f64>,
}

pub const ITERATIONS_CSV_HEADER: [&str; 17] = [
    "epoch",
    "iteration",
    "global_iteration",
    "start_s",
    "end_s",
    "iter_time_s",
    "workers",
    "memory_mb",
    "batch_size",
    "param_count",
    "loss",
    "ul_shard_s",
    "dl_shard_s",
    "ul_aggr_s",
    "dl_grad_s",
    "cost_usd",
    "throughput_sps",
];

pub const EVENTS_CSV_HEADER: [&str; 6] =
    ["time_s", "kind", "worker", "epoch", "iteration", "detail"];

pub fn write_iterations_csv<W: Write>(rows: &[IterationRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ITERATIONS_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.iteration.to_string(),
            r.global_iteration.to_string(),
            r.start.to_string(),
            r.end.to_string(),
            r.iter_time().to_string(),
            r.config.workers.to_string(),
            r.config.memory_mb.to_string(),
            r.batch_size.to_string(),
            r.param_count.to_string(),
            r.loss.to_string(),
            r.timing.ul_shard.to_string(),
            r.timing.dl_shard.to_string(),
            r.timing.ul_aggr.to_string(),
            r.timing.dl_grad.to_string(),
            r.cost.to_string(),
            r.throughput().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events_csv<W: Write>(events: &[Event], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENTS_CSV_HEADER)?;
    for e in events {
        w.write_record([
            e.time.to_string(),
            e.kind.as_str().to_string(),
            e.worker.map(|w| w.to_string()).unwrap_or_default(),
            e.epoch.to_string(),
            e.iteration.to_string(),
            e.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers() {
        let mut out = Vec::new();
        write_iterations_csv(&[], &mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .starts_with("epoch,iteration,global_iteration,start_s,"));
        let mut out = Vec::new();
        write_events_csv(&[], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "time_s,kind,worker,epoch,iteration,detail\n"
        );
    }

    #[test]
    fn event_row_with_missing_worker() {
        let e = Event {
            time: 1.5,
            kind: EventKind::Search,
            worker: None,
            epoch: 0,
            iteration: 0,
            detail: "best 2x1024MB".into(),
        };
        let mut out = Vec::new();
        write_events_csv(&[e], &mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .ends_with("1.5,search,,0,0,best 2x1024MB\n"));
    }
}
