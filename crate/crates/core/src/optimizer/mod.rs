//! Bayesian search over deployment configurations (worker count, memory).

pub mod acquisition;
pub mod gp;
pub mod objective;
pub mod search;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{MAX_MEMORY_MB, MIN_MEMORY_MB};

pub use acquisition::{expected_improvement, propose_next};
pub use gp::GpModel;
pub use objective::{GoalMode, ObjectiveModel, RestartModel, UserGoal};
pub use search::{search, Probe, ProbeError, Profiler, SearchLimits, SearchOutcome, StopReason};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("search space is empty")]
    EmptySpace,
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid goal: {0}")]
    InvalidGoal(String),
    #[error("cannot fit a GP to zero observations")]
    NoObservations,
    #[error("kernel matrix is not positive definite after jitter")]
    SingularKernel,
    #[error("every profiling probe failed")]
    NoSuccessfulProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub workers: u32,
    pub memory_mb: u32,
}

impl DeploymentConfig {
    pub fn new(workers: u32, memory_mb: u32) -> Self {
        Self { workers, memory_mb }
    }
}

impl std::fmt::Display for DeploymentConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}MB", self.workers, self.memory_mb)
    }
}

/// Rectangular grid of worker counts and memory sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub min_workers: u32,
    pub max_workers: u32,
    pub min_memory: u32,
    pub max_memory: u32,
    pub memory_step: u32,
}

/// Spaces up to this size are searched exhaustively by `propose_next`.
pub const EXHAUSTIVE_LIMIT: usize = 4096;
const RANDOM_CANDIDATES: usize = 2048;

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            min_workers: 1,
            max_workers: 64,
            min_memory: MIN_MEMORY_MB,
            max_memory: MAX_MEMORY_MB,
            memory_step: 1,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::InvalidSpace(m.to_string()));
        if self.min_workers == 0 {
            return bad("min_workers must be at least 1");
        }
        if self.memory_step == 0 {
            return bad("memory_step must be positive");
        }
        if self.min_memory < MIN_MEMORY_MB || self.max_memory > MAX_MEMORY_MB {
            return bad("memory range outside platform limits");
        }
        if self.min_workers > self.max_workers || self.min_memory > self.max_memory {
            return Err(OptimizerError::EmptySpace);
        }
        Ok(())
    }

    pub fn memory_levels(&self) -> u32 {
        (self.max_memory - self.min_memory) / self.memory_step + 1
    }

    pub fn len(&self) -> usize {
        if self.min_workers > self.max_workers
            || self.min_memory > self.max_memory
            || self.memory_step == 0
        {
            return 0;
        }
        (self.max_workers - self.min_workers + 1) as usize * self.memory_levels() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: &DeploymentConfig) -> bool {
        (self.min_workers..=self.max_workers).contains(&c.workers)
            && (self.min_memory..=self.max_memory).contains(&c.memory_mb)
            && (c.memory_mb - self.min_memory).is_multiple_of(self.memory_step)
    }

    /// Copy with the worker range capped at `max_workers`.
    pub fn cap_workers(&self, max_workers: u32) -> Self {
        let mut s = *self;
        s.max_workers = s.max_workers.min(max_workers).max(s.min_workers);
        s
    }

    /// Coordinates scaled into the unit square.
    pub fn normalize(&self, c: &DeploymentConfig) -> [f64; 2] {
        let scale = |v: u32, lo: u32, hi: u32| {
            if hi > lo {
                (v as f64 - lo as f64) / (hi - lo) as f64
            } else {
                0.0
            }
        };
        [
            scale(c.workers, self.min_workers, self.max_workers),
            scale(c.memory_mb, self.min_memory, self.max_memory),
        ]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DeploymentConfig {
        DeploymentConfig {
            workers: rng.random_range(self.min_workers..=self.max_workers),
            memory_mb: self.min_memory
                + self.memory_step * rng.random_range(0..self.memory_levels()),
        }
    }

    pub fn enumerate(&self) -> Vec<DeploymentConfig> {
        let mut out = Vec::with_capacity(self.len());
        for w in self.min_workers..=self.max_workers {
            for k in 0..self.memory_levels() {
                out.push(DeploymentConfig::new(
                    w,
                    self.min_memory + k * self.memory_step,
                ));
            }
        }
        out
    }

    /// Candidate set for acquisition maximization, sorted by (workers, memory)
    /// and free of duplicates. Small spaces are enumerated; large ones get a
    /// seeded random sample plus a coarse memory lattice for every worker count.
    pub fn candidates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DeploymentConfig> {
        if self.len() <= EXHAUSTIVE_LIMIT {
            return self.enumerate();
        }
        let mut out: Vec<DeploymentConfig> =
            (0..RANDOM_CANDIDATES).map(|_| self.sample(rng)).collect();
        let lattice = std::iter::once(128).chain((256..=MAX_MEMORY_MB).step_by(256));
        let lattice: Vec<u32> = lattice.filter_map(|m| self.snap_memory(m)).collect();
        for w in self.min_workers..=self.max_workers {
            out.extend(lattice.iter().map(|&m| DeploymentConfig::new(w, m)));
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn snap_memory(&self, m: u32) -> Option<u32> {
        if m < self.min_memory || m > self.max_memory {
            return None;
        }
        Some(self.min_memory + (m - self.min_memory) / self.memory_step * self.memory_step)
    }
}

/// One profiled configuration. `feasible` and `objective` depend on the goal
/// and are refreshed whenever the objective model changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub config: DeploymentConfig,
    pub iter_time: f64,
    pub iter_cost: f64,
    pub feasible: bool,
    pub objective: f64,
}

impl Observation {
    pub fn new(config: DeploymentConfig, iter_time: f64, iter_cost: f64) -> Self {
        Self {
            config,
            iter_time,
            iter_cost,
            feasible: true,
            objective: f64::NAN,
        }
    }
}

pub const OBSERVATION_CSV_HEADER: [&str; 6] = [
    "workers",
    "memory_mb",
    "iter_time_s",
    "iter_cost_usd",
    "feasible",
    "objective",
];

pub fn write_observations_csv<W: Write>(
    observations: &[Observation],
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OBSERVATION_CSV_HEADER)?;
    for o in observations {
        w.write_record([
            o.config.workers.to_string(),
            o.config.memory_mb.to_string(),
            o.iter_time.to_string(),
            o.iter_cost.to_string(),
            o.feasible.to_string(),
            o.objective.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn space_size_and_membership() {
        let s = SearchSpace {
            min_workers: 1,
            max_workers: 20,
            min_memory: 512,
            max_memory: 10240,
            memory_step: 512,
        };
        assert_eq!(s.len(), 400);
        assert!(s.contains(&DeploymentConfig::new(20, 10240)));
        assert!(!s.contains(&DeploymentConfig::new(3, 700)));
        assert_eq!(s.normalize(&DeploymentConfig::new(20, 512)), [1.0, 0.0]);
        assert_eq!(
            s.candidates(&mut ChaCha8Rng::seed_from_u64(0)),
            s.enumerate()
        );
    }

    #[test]
    fn large_space_candidates_are_sorted_lattice_plus_sample() {
        let s = SearchSpace::default();
        let c = s.candidates(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(c.windows(2).all(|p| p[0] < p[1]));
        assert!(c.iter().all(|x| s.contains(x)));
        assert!(c.contains(&DeploymentConfig::new(64, 10240)));
        assert!(c.contains(&DeploymentConfig::new(1, 128)));
        assert!(c.len() > 64 * 41);
    }

    #[test]
    fn validation() {
        assert!(SearchSpace::default().validate().is_ok());
        let s = SearchSpace { max_memory: 20_000, ..SearchSpace::default() };
        assert!(s.validate().is_err());
        let s = SearchSpace {
            min_workers: 4,
            max_workers: 2,
            ..SearchSpace::default()
        };
        assert_eq!(s.validate(), Err(OptimizerError::EmptySpace));
        assert!(s.is_empty());
    }

    #[test]
    fn csv_header() {
        let mut out = Vec::new();
        write_observations_csv(&[], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "workers,memory_mb,iter_time_s,iter_cost_usd,feasible,objective\n"
        );
    }
}
