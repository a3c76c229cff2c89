//! Deterministic Function-as-a-Service simulator.
//!
//! Function instances get compute speed proportional to their memory, pay a
//! cold start on the first invocation of a slot and after every restart, and
//! are killed when they exceed the platform's execution-duration limit. Every
//! closed invocation lands in a billing ledger priced per GB-second.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_MEMORY_MB: u32 = 128;
pub const MAX_MEMORY_MB: u32 = 10240;

/// Slack allowed when checking records against the duration limit.
const DURATION_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatformError {
    #[error("memory {0} MB is outside [{MIN_MEMORY_MB}, {MAX_MEMORY_MB}]")]
    InvalidMemory(u32),
    #[error("invalid platform parameter: {0}")]
    InvalidParams(String),
    #[error("no function deployed under handler id {0:?}")]
    UnknownHandler(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformParams {
    /// Hard cap on a single execution, in seconds.
    pub max_duration: f64,
    pub cold_start: f64,
    pub invocation_delay: f64,
    pub price_per_gb_second: f64,
    pub price_per_invocation: f64,
    /// Memory (MB) at which the compute speed factor is 1.0.
    pub reference_memory: u32,
    /// Probability that an invocation fails before publishing its result.
    pub failure_rate: f64,
    pub rng_seed: u64,
}

impl Default for PlatformParams {
    fn default() -> Self {
        Self {
            max_duration: 900.0,
            cold_start: 4.0,
            invocation_delay: 0.5,
            price_per_gb_second: 1.6667e-5,
            price_per_invocation: 0.0,
            reference_memory: 3072,
            failure_rate: 0.0,
            rng_seed: 0,
        }
    }
}

impl PlatformParams {
    pub fn validate(&self) -> Result<(), PlatformError> {
        let bad = |what: &str| Err(PlatformError::InvalidParams(what.to_string()));
        if !(self.max_duration > 0.0) {
            return bad("max_duration must be > 0");
        }
        if !(self.cold_start >= 0.0) {
            return bad("cold_start must be >= 0");
        }
        if !(self.invocation_delay >= 0.0) {
            return bad("invocation_delay must be >= 0");
        }
        if !(self.price_per_gb_second >= 0.0) || !(self.price_per_invocation >= 0.0) {
            return bad("prices must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return bad("failure_rate must lie in [0, 1]");
        }
        if self.reference_memory == 0 {
            return bad("reference_memory must be > 0");
        }
        Ok(())
    }

    /// Fixed latency paid by a fresh (cold) invocation before user code runs.
    pub fn startup_overhead(&self) -> f64 {
        self.invocation_delay + self.cold_start
    }
}

pub fn check_memory(memory_mb: u32) -> Result<(), PlatformError> {
    if (MIN_MEMORY_MB..=MAX_MEMORY_MB).contains(&memory_mb) {
        Ok(())
    } else {
        Err(PlatformError::InvalidMemory(memory_mb))
    }
}

/// Speed factor of an instance relative to the reference memory size.
pub fn compute_speed(memory_mb: u32, params: &PlatformParams) -> Result<f64, PlatformError> {
    check_memory(memory_mb)?;
    Ok(memory_mb as f64 / params.reference_memory as f64)
}

/// Pay-as-you-go price of one execution.
pub fn billed_cost(memory_mb: u32, duration: f64, params: &PlatformParams) -> f64 {
    (memory_mb as f64 / 1024.0) * duration * params.price_per_gb_second
        + params.price_per_invocation
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSpec {
    pub memory_mb: u32,
    pub handler_id: String,
    pub payload: Vec<u8>,
}

impl FunctionSpec {
    pub fn new(memory_mb: u32, handler_id: impl Into<String>) -> Result<Self, PlatformError> {
        check_memory(memory_mb)?;
        Ok(Self {
            memory_mb,
            handler_id: handler_id.into(),
            payload: Vec::new(),
        })
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }
}

/// Work carried out by a one-shot invocation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Work {
    /// Seconds of compute at speed 1.0; scaled by the instance speed.
    pub compute_seconds: f64,
    /// Seconds of I/O that do not depend on the instance size.
    pub io_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    DurationExceeded,
    Failed,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::DurationExceeded => "duration_exceeded",
            Outcome::Failed => "failed",
        }
    }
}

/// Identifier of a logical instance slot. Warm reuse is tracked per slot.
pub type InstanceId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct InvocationRecord {
    pub invocation_id: u64,
    pub instance_id: InstanceId,
    pub memory_mb: u32,
    pub start_time: f64,
    pub end_time: f64,
    pub outcome: Outcome,
    pub billed_cost: f64,
}

impl InvocationRecord {
    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }
}

/// A running invocation handed out by [`Platform::open`].
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub invocation_id: u64,
    pub instance_id: InstanceId,
    pub memory_mb: u32,
    pub start_time: f64,
    /// Time at which user code starts executing.
    pub ready_at: f64,
    pub cold: bool,
    /// Drawn from the seeded failure stream at open time: this invocation will
    /// fail before publishing its first result.
    pub doomed: bool,
}

impl Invocation {
    /// Latest time the platform lets this invocation run.
    pub fn deadline(&self, params: &PlatformParams) -> f64 {
        self.start_time + params.max_duration
    }
}

#[derive(Debug)]
pub struct Platform {
    params: PlatformParams,
    rng: ChaCha8Rng,
    handlers: BTreeSet<String>,
    /// Memory of the last invocation per slot; presence means the slot is warm.
    warm: HashMap<InstanceId, u32>,
    next_invocation: u64,
    ledger: Vec<InvocationRecord>,
}

impl Platform {
    pub fn new(params: PlatformParams) -> Result<Self, PlatformError> {
        params.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(params.rng_seed),
            params,
            handlers: BTreeSet::new(),
            warm: HashMap::new(),
            next_invocation: 0,
            ledger: Vec::new(),
        })
    }

    pub fn params(&self) -> &PlatformParams {
        &self.params
    }

    pub fn deploy(&mut self, handler_id: impl Into<String>) {
        self.handlers.insert(handler_id.into());
    }

    /// Starts an invocation on `instance` at time `at`.
    ///
    /// The slot pays a cold start when it has never run, when `restart` is
    /// set, or when its memory size changed since the last invocation.
    pub fn open(
        &mut self,
        instance: InstanceId,
        spec: &FunctionSpec,
        at: f64,
        restart: bool,
    ) -> Result<Invocation, PlatformError> {
        check_memory(spec.memory_mb)?;
        if !self.handlers.contains(&spec.handler_id) {
            return Err(PlatformError::UnknownHandler(spec.handler_id.clone()));
        }
        let cold = restart || self.warm.get(&instance) != Some(&spec.memory_mb);
        self.warm.insert(instance, spec.memory_mb);
        let doomed =
            self.params.failure_rate > 0.0 && self.rng.random::<f64>() < self.params.failure_rate;
        let mut ready_at = at + self.params.invocation_delay;
        if cold {
            ready_at += self.params.cold_start;
        }
        let invocation_id = self.next_invocation;
        self.next_invocation += 1;
        Ok(Invocation {
            invocation_id,
            instance_id: instance,
            memory_mb: spec.memory_mb,
            start_time: at,
            ready_at,
            cold,
            doomed,
        })
    }

    /// Ends an invocation and bills it. Anything past the duration limit is
    /// truncated to the limit and reported as `DurationExceeded`.
    pub fn close(
        &mut self,
        invocation: &Invocation,
        at: f64,
        outcome: Outcome,
    ) -> &InvocationRecord {
        let deadline = invocation.deadline(&self.params);
        let (end_time, outcome) =
            if at > deadline + DURATION_EPSILON || outcome == Outcome::DurationExceeded {
                (deadline, Outcome::DurationExceeded)
            } else {
                (at.max(invocation.start_time), outcome)
            };
        if outcome != Outcome::Completed {
            // a crashed or killed instance does not stay warm
            self.warm.remove(&invocation.instance_id);
        }
        let billed = billed_cost(
            invocation.memory_mb,
            end_time - invocation.start_time,
            &self.params,
        );
        self.ledger.push(InvocationRecord {
            invocation_id: invocation.invocation_id,
            instance_id: invocation.instance_id,
            memory_mb: invocation.memory_mb,
            start_time: invocation.start_time,
            end_time,
            outcome,
            billed_cost: billed,
        });
        self.ledger.last().expect("just pushed")
    }

    /// One-shot invocation running `work` to completion, the duration limit,
    /// or an injected failure.
    pub fn invoke(
        &mut self,
        instance: InstanceId,
        spec: &FunctionSpec,
        work: Work,
        at: f64,
    ) -> Result<InvocationRecord, PlatformError> {
        let invocation = self.open(instance, spec, at, false)?;
        let speed = compute_speed(spec.memory_mb, &self.params)?;
        let natural_end = invocation.ready_at + work.compute_seconds / speed + work.io_seconds;
        let record = if invocation.doomed {
            let fraction: f64 = self.rng.random();
            let fail_at = at + fraction * (natural_end - at);
            self.close(
                &invocation,
                fail_at.min(invocation.deadline(&self.params)),
                Outcome::Failed,
            )
        } else if natural_end > invocation.deadline(&self.params) {
            self.close(&invocation, natural_end, Outcome::DurationExceeded)
        } else {
            self.close(&invocation, natural_end, Outcome::Completed)
        };
        Ok(record.clone())
    }

    pub fn ledger(&self) -> &[InvocationRecord] {
        &self.ledger
    }

    /// Sum of billed costs in ledger order.
    pub fn total_cost(&self) -> f64 {
        self.ledger.iter().map(|r| r.billed_cost).sum()
    }

    pub fn write_ledger_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["instance_id", "start", "end", "outcome", "cost"])?;
        for r in &self.ledger {
            writer.write_record([
                r.instance_id.to_string(),
                r.start_time.to_string(),
                r.end_time.to_string(),
                r.outcome.as_str().to_string(),
                r.billed_cost.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params() -> PlatformParams {
        PlatformParams {
            cold_start: 2.0,
            invocation_delay: 0.5,
            ..PlatformParams::default()
        }
    }

    fn platform(params: PlatformParams) -> Platform {
        let mut p = Platform::new(params).unwrap();
        p.deploy("train");
        p
    }

    #[test]
    fn speed_is_proportional_to_memory() {
        let params = PlatformParams::default();
        assert_eq!(compute_speed(3072, &params).unwrap(), 1.0);
        assert_eq!(compute_speed(6144, &params).unwrap(), 2.0);
        assert_eq!(compute_speed(1536, &params).unwrap(), 0.5);
        assert!(matches!(
            compute_speed(64, &params),
            Err(PlatformError::InvalidMemory(64))
        ));
        assert!(compute_speed(10241, &params).is_err());
    }

    #[test]
    fn billing_examples() {
        let params = PlatformParams::default();
        assert!((billed_cost(3072, 100.0, &params) - 0.0050001).abs() < 1e-12);
        assert_eq!(billed_cost(4096, 0.0, &params), 0.0);
        assert!((billed_cost(1024, 900.0, &params) - 0.0150003).abs() < 1e-12);
    }

    #[test]
    fn cold_invocation_timing() {
        let mut p = platform(quiet_params());
        let spec = FunctionSpec::new(3072, "train").unwrap();
        let work = Work {
            compute_seconds: 100.0,
            io_seconds: 0.0,
        };
        let r = p.invoke(0, &spec, work, 10.0).unwrap();
        assert_eq!(r.outcome, Outcome::Completed);
        assert!((r.duration() - 102.5).abs() < 1e-12);
        // same slot again is warm
        let r = p.invoke(0, &spec, work, 200.0).unwrap();
        assert!((r.duration() - 100.5).abs() < 1e-12);
    }

    #[test]
    fn duration_limit_truncates() {
        let mut p = platform(PlatformParams::default());
        let spec = FunctionSpec::new(3072, "train").unwrap();
        let r = p
            .invoke(
                0,
                &spec,
                Work {
                    compute_seconds: 2000.0,
                    io_seconds: 0.0,
                },
                0.0,
            )
            .unwrap();
        assert_eq!(r.outcome, Outcome::DurationExceeded);
        assert_eq!(r.duration(), 900.0);
    }

    #[test]
    fn certain_failure_fails_every_invocation() {
        let mut p = platform(PlatformParams {
            failure_rate: 1.0,
            ..PlatformParams::default()
        });
        let spec = FunctionSpec::new(1024, "train").unwrap();
        for i in 0..20 {
            let r = p
                .invoke(
                    i,
                    &spec,
                    Work {
                        compute_seconds: 10.0,
                        io_seconds: 1.0,
                    },
                    0.0,
                )
                .unwrap();
            assert_eq!(r.outcome, Outcome::Failed);
        }
    }

    #[test]
    fn unknown_handler_is_rejected() {
        let mut p = platform(PlatformParams::default());
        let spec = FunctionSpec::new(1024, "nope").unwrap();
        assert_eq!(
            p.invoke(0, &spec, Work::default(), 0.0),
            Err(PlatformError::UnknownHandler("nope".into()))
        );
    }

    #[test]
    fn restart_and_resize_pay_cold_start() {
        let mut p = platform(quiet_params());
        let small = FunctionSpec::new(1024, "train").unwrap();
        let big = FunctionSpec::new(2048, "train").unwrap();
        assert!(p.open(7, &small, 0.0, false).unwrap().cold);
        assert!(!p.open(7, &small, 1.0, false).unwrap().cold);
        assert!(p.open(7, &small, 2.0, true).unwrap().cold);
        assert!(p.open(7, &big, 3.0, false).unwrap().cold);
    }

    #[test]
    fn pure_compute_cost_is_memory_invariant() {
        let params = PlatformParams {
            cold_start: 0.0,
            invocation_delay: 0.0,
            ..PlatformParams::default()
        };
        let mut p = platform(params);
        let work = Work {
            compute_seconds: 30.0,
            io_seconds: 0.0,
        };
        let costs: Vec<f64> = [512, 1024, 3072, 6144, 10240]
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let spec = FunctionSpec::new(m, "train").unwrap();
                p.invoke(i as u64, &spec, work, 0.0).unwrap().billed_cost
            })
            .collect();
        for c in &costs {
            assert!((c - costs[0]).abs() < 1e-15, "{costs:?}");
        }
    }

    #[test]
    fn ledger_is_deterministic_and_bounded() {
        let params = PlatformParams {
            failure_rate: 0.3,
            rng_seed: 42,
            ..PlatformParams::default()
        };
        let run = || {
            let mut p = platform(params.clone());
            for i in 0..50u64 {
                let spec = FunctionSpec::new(128 + 200 * i as u32, "train").unwrap();
                let work = Work {
                    compute_seconds: 80.0 * i as f64,
                    io_seconds: 1.0,
                };
                p.invoke(i % 5, &spec, work, i as f64).unwrap();
            }
            p.ledger().to_vec()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|r| r.duration() <= 900.0 + 1e-9));
        assert!(a.iter().any(|r| r.outcome == Outcome::Failed));
        assert!(a.iter().any(|r| r.outcome == Outcome::DurationExceeded));
    }

    #[test]
    fn ledger_csv_header() {
        let mut p = platform(PlatformParams::default());
        let spec = FunctionSpec::new(1024, "train").unwrap();
        p.invoke(
            3,
            &spec,
            Work {
                compute_seconds: 1.0,
                io_seconds: 0.0,
            },
            0.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_ledger_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("instance_id,start,end,outcome,cost\n3,0,"));
    }
}
