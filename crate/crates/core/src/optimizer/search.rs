//! Iterative profile-and-propose search.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::acquisition::best_candidate;
use super::{DeploymentConfig, GpModel, ObjectiveModel, Observation, OptimizerError, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchLimits {
    pub k_init: usize,
    pub k_max: usize,
    pub ei_epsilon: f64,
    /// Consecutive proposals with EI below the threshold before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for SearchLimits {
    fn default() -> Self {
        Self {
            k_init: 5,
            k_max: 30,
            ei_epsilon: 0.01,
            patience: 3,
            seed: 0,
        }
    }
}

/// Result of profiling one configuration: per-iteration figures for the
/// optimizer plus what the probe itself consumed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub iter_time: f64,
    pub iter_cost: f64,
    pub wall_time: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeError {
    /// The probe failed; its configuration is skipped.
    Fault {
        reason: String,
        wall_time: f64,
        cost: f64,
    },
    /// No more profiling is affordable; the search stops.
    BudgetExhausted,
}

pub trait Profiler {
    fn profile(&mut self, config: DeploymentConfig) -> Result<Probe, ProbeError>;
}

impl<F: FnMut(DeploymentConfig) -> Result<Probe, ProbeError>> Profiler for F {
    fn profile(&mut self, config: DeploymentConfig) -> Result<Probe, ProbeError> {
        self(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EiConverged,
    ProbeLimit,
    SpaceExhausted,
    ProfilingBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: DeploymentConfig,
    pub best_feasible: bool,
    pub best_objective: f64,
    pub observations: Vec<Observation>,
    pub failed: Vec<DeploymentConfig>,
    /// Probes run by this search (reused observations excluded).
    pub probes: usize,
    pub profiling_time: f64,
    pub profiling_cost: f64,
    pub stop: StopReason,
    /// Incumbent objective after each probe.
    pub incumbents: Vec<f64>,
}

fn incumbent(observations: &[Observation]) -> Option<&Observation> {
    observations.iter().min_by(|a, b| {
        b.feasible
            .cmp(&a.feasible)
            .then(a.objective.total_cmp(&b.objective))
            .then(a.config.cmp(&b.config))
    })
}

struct State<'a, P: ?Sized> {
    profiler: &'a mut P,
    objective: &'a ObjectiveModel,
    observations: Vec<Observation>,
    failed: Vec<DeploymentConfig>,
    tried: BTreeSet<DeploymentConfig>,
    probes: usize,
    time: f64,
    cost: f64,
    incumbents: Vec<f64>,
}

impl<P: Profiler + ?Sized> State<'_, P> {
    /// Returns false when the profiling budget is exhausted.
    fn probe(&mut self, config: DeploymentConfig) -> bool {
        self.tried.insert(config);
        self.probes += 1;
        match self.profiler.profile(config) {
            Ok(p) => {
                debug!(
                    "probe {config}: {:.4} s/iter, ${:.6}/iter",
                    p.iter_time, p.iter_cost
                );
                self.time += p.wall_time;
                self.cost += p.cost;
                self.observations
                    .push(Observation::new(config, p.iter_time, p.iter_cost));
            }
            Err(ProbeError::Fault {
                reason,
                wall_time,
                cost,
            }) => {
                debug!("probe {config} failed: {reason}");
                self.time += wall_time;
                self.cost += cost;
                self.failed.push(config);
            }
            Err(ProbeError::BudgetExhausted) => {
                self.probes -= 1;
                return false;
            }
        }
        self.objective.evaluate(&mut self.observations);
        if let Some(o) = incumbent(&self.observations) {
            self.incumbents.push(o.objective);
        }
        true
    }
}

/// Runs the search. `prior` observations are reused without re-profiling;
/// `seeds` are profiled first, before the random initial probes. The random
/// phase only tops the observation count up to `k_init`.
pub fn search<P: Profiler + ?Sized>(
    objective: &ObjectiveModel,
    profiler: &mut P,
    space: &SearchSpace,
    limits: &SearchLimits,
    prior: &[Observation],
    seeds: &[DeploymentConfig],
) -> Result<SearchOutcome, OptimizerError> {
    space.validate()?;
    objective.goal.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(limits.seed);
    let observations: Vec<Observation> = prior
        .iter()
        .filter(|o| space.contains(&o.config))
        .cloned()
        .collect();
    let tried = observations.iter().map(|o| o.config).collect();
    let mut st = State {
        profiler,
        objective,
        observations,
        failed: Vec::new(),
        tried,
        probes: 0,
        time: 0.0,
        cost: 0.0,
        incumbents: Vec::new(),
    };
    st.objective.evaluate(&mut st.observations);

    let mut initial: Vec<DeploymentConfig> = Vec::new();
    for s in seeds {
        if space.contains(s) && !st.tried.contains(s) && !initial.contains(s) {
            initial.push(*s);
        }
    }
    let wanted = limits
        .k_init
        .saturating_sub(st.observations.len())
        .max(initial.len());
    let mut attempts = 0;
    while initial.len() < wanted.min(space.len() - st.tried.len())
        && attempts < 100 * limits.k_init.max(1)
    {
        let c = space.sample(&mut rng);
        if !st.tried.contains(&c) && !initial.contains(&c) {
            initial.push(c);
        }
        attempts += 1;
    }

    let mut stop = StopReason::ProbeLimit;
    let mut halted = false;
    for c in initial {
        if st.probes >= limits.k_max {
            break;
        }
        if !st.probe(c) {
            stop = StopReason::ProfilingBudget;
            halted = true;
            break;
        }
    }

    let mut quiet = 0;
    while !halted && st.probes < limits.k_max {
        if st.observations.is_empty() {
            // nothing to fit yet: keep sampling at random
            let untried: Vec<DeploymentConfig> = space
                .candidates(&mut rng)
                .into_iter()
                .filter(|c| !st.tried.contains(c))
                .collect();
            let Some(&c) = untried.first() else {
                stop = StopReason::SpaceExhausted;
                break;
            };
            if !st.probe(c) {
                stop = StopReason::ProfilingBudget;
                break;
            }
            continue;
        }
        let x: Vec<[f64; 2]> = st
            .observations
            .iter()
            .map(|o| space.normalize(&o.config))
            .collect();
        let y: Vec<f64> = st.observations.iter().map(|o| o.objective).collect();
        // Objectives span orders of magnitude; a surrogate on their logarithm
        // is far better calibrated. EI on the log scale is then a relative
        // improvement, so the stopping threshold is `epsilon` itself.
        let log_scale = y.iter().all(|v| *v > 0.0);
        let y: Vec<f64> = if log_scale {
            y.iter().map(|v| v.ln()).collect()
        } else {
            y
        };
        let gp = GpModel::fit(&x, &y)?;
        let y_best = y.iter().copied().fold(f64::INFINITY, f64::min);
        let candidates: Vec<DeploymentConfig> = space
            .candidates(&mut rng)
            .into_iter()
            .filter(|c| !st.tried.contains(c))
            .collect();
        let Some((next, ei)) = best_candidate(&gp, space, &candidates, y_best) else {
            stop = StopReason::SpaceExhausted;
            break;
        };
        let threshold = if log_scale {
            limits.ei_epsilon
        } else {
            limits.ei_epsilon * y_best.abs()
        };
        if ei < threshold {
            quiet += 1;
            if quiet >= limits.patience {
                stop = StopReason::EiConverged;
                break;
            }
        } else {
            quiet = 0;
        }
        if !st.probe(next) {
            stop = StopReason::ProfilingBudget;
            break;
        }
    }

    let best = incumbent(&st.observations)
        .ok_or(OptimizerError::NoSuccessfulProbe)?
        .clone();
    info!(
        "search: best {} ({}feasible, objective {:.6}) after {} probes, stop {:?}",
        best.config,
        if best.feasible { "" } else { "in" },
        best.objective,
        st.probes,
        stop
    );
    Ok(SearchOutcome {
        best: best.config,
        best_feasible: best.feasible,
        best_objective: best.objective,
        observations: st.observations,
        failed: st.failed,
        probes: st.probes,
        profiling_time: st.time,
        profiling_cost: st.cost,
        stop,
        incumbents: st.incumbents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{GoalMode, UserGoal};

    fn space() -> SearchSpace {
        SearchSpace {
            min_workers: 1,
            max_workers: 20,
            min_memory: 512,
            max_memory: 10240,
            memory_step: 512,
        }
    }

    fn surface(c: DeploymentConfig) -> Result<Probe, ProbeError> {
        let (w, m) = (c.workers as f64, c.memory_mb as f64 / 1024.0);
        let time = 400.0 / (w * m) + 0.8 * w;
        let cost = time * w * m * 1e-3;
        Ok(Probe {
            iter_time: time,
            iter_cost: cost,
            wall_time: time,
            cost,
        })
    }

    #[test]
    fn one_probe_budget_returns_that_probe() {
        let limits = SearchLimits {
            k_max: 1,
            ..SearchLimits::default()
        };
        let out = search(
            &ObjectiveModel::new(UserGoal::fastest(), 1.0),
            &mut surface,
            &space(),
            &limits,
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(out.probes, 1);
        assert_eq!(out.observations.len(), 1);
        assert_eq!(out.best, out.observations[0].config);
    }

    #[test]
    fn constant_surface_converges_quickly() {
        let mut flat = |_c| {
            Ok(Probe {
                iter_time: 3.0,
                iter_cost: 1.0,
                wall_time: 3.0,
                cost: 1.0,
            })
        };
        let limits = SearchLimits::default();
        let out = search(
            &ObjectiveModel::new(UserGoal::fastest(), 1.0),
            &mut flat,
            &space(),
            &limits,
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::EiConverged);
        assert!(out.probes <= limits.k_init + 2);
    }

    #[test]
    fn incumbent_never_gets_worse_and_costs_add_up() {
        let limits = SearchLimits {
            seed: 3,
            ..SearchLimits::default()
        };
        let goal = UserGoal {
            mode: GoalMode::Deadline,
            t_max: Some(40.0),
            s_max: None,
        };
        let out = search(
            &ObjectiveModel::new(goal, 1.0),
            &mut surface,
            &space(),
            &limits,
            &[],
            &[],
        )
        .unwrap();
        assert!(out.incumbents.windows(2).all(|w| w[1] <= w[0]));
        let t: f64 = out.observations.iter().map(|o| o.iter_time).sum();
        assert!((out.profiling_time - t).abs() < 1e-9);
        assert!(out.probes <= 30);
        assert!(out.best_feasible);
    }

    #[test]
    fn failed_probes_are_skipped_and_budget_stops() {
        let mut n = 0;
        let mut flaky = |c: DeploymentConfig| {
            n += 1;
            match n {
                2 => Err(ProbeError::Fault {
                    reason: "boom".into(),
                    wall_time: 1.0,
                    cost: 0.5,
                }),
                9 => Err(ProbeError::BudgetExhausted),
                _ => surface(c),
            }
        };
        let out = search(
            &ObjectiveModel::new(UserGoal::fastest(), 1.0),
            &mut flaky,
            &space(),
            &SearchLimits::default(),
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(out.failed.len(), 1);
        assert_eq!(out.stop, StopReason::ProfilingBudget);
        assert_eq!(out.probes, 8);
        assert!(!out.observations.iter().any(|o| o.config == out.failed[0]));
    }

    #[test]
    fn seeds_and_prior_are_used() {
        let seed = DeploymentConfig::new(7, 2048);
        let prior = vec![Observation::new(DeploymentConfig::new(2, 1024), 5.0, 1.0)];
        let mut seen = Vec::new();
        let mut rec = |c| {
            seen.push(c);
            surface(c)
        };
        let out = search(
            &ObjectiveModel::new(UserGoal::fastest(), 1.0),
            &mut rec,
            &space(),
            &SearchLimits::default(),
            &prior,
            &[seed],
        )
        .unwrap();
        assert_eq!(seen[0], seed);
        assert!(!seen.contains(&prior[0].config));
        assert!(out.observations.iter().any(|o| o.config == prior[0].config));
    }

    #[test]
    fn all_probes_failing_is_an_error() {
        let mut bad = |_c| {
            Err(ProbeError::Fault {
                reason: "x".into(),
                wall_time: 0.0,
                cost: 0.0,
            })
        };
        let limits = SearchLimits {
            k_max: 6,
            ..SearchLimits::default()
        };
        let r = search(
            &ObjectiveModel::new(UserGoal::fastest(), 1.0),
            &mut bad,
            &space(),
            &limits,
            &[],
            &[],
        );
        assert_eq!(r.unwrap_err(), OptimizerError::NoSuccessfulProbe);
    }
}
