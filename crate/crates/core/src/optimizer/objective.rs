//! User goals and their encoding as a single scalar to minimize.

use serde::{Deserialize, Serialize};

use super::{DeploymentConfig, Observation, OptimizerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// Cheapest run that finishes within `t_max`.
    Deadline,
    /// Fastest run that costs at most `s_max`.
    Budget,
    Fastest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserGoal {
    pub mode: GoalMode,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default)]
    pub s_max: Option<f64>,
}

impl UserGoal {
    pub fn deadline(t_max: f64) -> Self {
        Self {
            mode: GoalMode::Deadline,
            t_max: Some(t_max),
            s_max: None,
        }
    }

    pub fn budget(s_max: f64) -> Self {
        Self {
            mode: GoalMode::Budget,
            t_max: None,
            s_max: Some(s_max),
        }
    }

    pub fn fastest() -> Self {
        Self {
            mode: GoalMode::Fastest,
            t_max: None,
            s_max: None,
        }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let positive = |v: Option<f64>, name: &str| match v {
            Some(x) if x > 0.0 && x.is_finite() => Ok(()),
            _ => Err(OptimizerError::InvalidGoal(format!(
                "{:?} mode needs a positive {name}",
                self.mode
            ))),
        };
        match self.mode {
            GoalMode::Deadline => positive(self.t_max, "t_max"),
            GoalMode::Budget => positive(self.s_max, "s_max"),
            GoalMode::Fastest => Ok(()),
        }
    }
}

/// Startup overhead paid by each invocation of a worker slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestartModel {
    pub max_duration: f64,
    /// Invocation delay plus cold start.
    pub startup_time: f64,
    pub price_per_gb_second: f64,
    pub price_per_invocation: f64,
    /// Guard margin in iterations kept free before the duration limit.
    pub guard_iterations: f64,
}

impl RestartModel {
    /// Invocations one slot needs for `iterations` iterations of `iter_time`,
    /// or `None` if a single iteration does not fit in an invocation.
    pub fn invocations(&self, iterations: f64, iter_time: f64) -> Option<f64> {
        let usable = self.max_duration - self.startup_time - self.guard_iterations * iter_time;
        if usable < 0.0 || iter_time <= 0.0 {
            return None;
        }
        let per_invocation = (usable / iter_time).floor() + 1.0;
        Some((iterations / per_invocation).ceil().max(1.0))
    }
}

/// Extrapolates profiled per-iteration figures to whole-run totals and
/// scores them against the goal. `base_time`/`base_cost` are what the run
/// has consumed already (training and profiling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveModel {
    pub goal: UserGoal,
    pub iterations: f64,
    pub restart: Option<RestartModel>,
    pub base_time: f64,
    pub base_cost: f64,
}

/// Relative constraint excess is clamped so penalized values stay finite.
const MAX_EXCESS: f64 = 10.0;

impl ObjectiveModel {
    pub fn new(goal: UserGoal, iterations: f64) -> Self {
        Self {
            goal,
            iterations,
            restart: None,
            base_time: 0.0,
            base_cost: 0.0,
        }
    }

    /// Projected `(total_time, total_cost)`; infinite if the config cannot run.
    pub fn totals(&self, config: DeploymentConfig, iter_time: f64, iter_cost: f64) -> (f64, f64) {
        let mut time = self.base_time + iter_time * self.iterations;
        let mut cost = self.base_cost + iter_cost * self.iterations;
        if let Some(r) = &self.restart {
            match r.invocations(self.iterations, iter_time) {
                Some(k) => {
                    time += k * r.startup_time;
                    let per_start =
                        config.memory_mb as f64 / 1024.0 * r.startup_time * r.price_per_gb_second
                            + r.price_per_invocation;
                    cost += k * config.workers as f64 * per_start;
                }
                None => return (f64::INFINITY, f64::INFINITY),
            }
        }
        (time, cost)
    }

    /// Unpenalized objective: cost under a deadline, time otherwise.
    pub fn raw(&self, time: f64, cost: f64) -> f64 {
        match self.goal.mode {
            GoalMode::Deadline => cost,
            GoalMode::Budget | GoalMode::Fastest => time,
        }
    }

    /// Relative violation of the goal constraint, zero when satisfied.
    pub fn excess(&self, time: f64, cost: f64) -> f64 {
        let rel = |v: f64, limit: Option<f64>| match limit {
            Some(l) if v.is_finite() => ((v - l) / l).max(0.0),
            Some(_) => f64::INFINITY,
            None if v.is_finite() => 0.0,
            None => f64::INFINITY,
        };
        match self.goal.mode {
            GoalMode::Deadline => rel(time, self.goal.t_max),
            GoalMode::Budget => rel(cost, self.goal.s_max),
            GoalMode::Fastest => rel(time, None),
        }
    }

    pub fn is_feasible(&self, config: DeploymentConfig, iter_time: f64, iter_cost: f64) -> bool {
        let (t, c) = self.totals(config, iter_time, iter_cost);
        self.excess(t, c) == 0.0
    }

    /// Refreshes `feasible` and `objective` of every observation. Infeasible
    /// points score `P·(1 + excess)` with `P` ten times the largest finite
    /// raw objective in the set, so they rank behind every feasible point.
    pub fn evaluate(&self, observations: &mut [Observation]) {
        let totals: Vec<(f64, f64)> = observations
            .iter()
            .map(|o| self.totals(o.config, o.iter_time, o.iter_cost))
            .collect();
        let max_raw = totals
            .iter()
            .map(|&(t, c)| self.raw(t, c))
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let penalty = if max_raw > 0.0 { 10.0 * max_raw } else { 1.0 };
        for (o, &(t, c)) in observations.iter_mut().zip(&totals) {
            let excess = self.excess(t, c);
            o.feasible = excess == 0.0;
            o.objective = if o.feasible {
                self.raw(t, c)
            } else {
                penalty * (1.0 + excess.min(MAX_EXCESS))
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(w: u32, t: f64, c: f64) -> Observation {
        Observation::new(DeploymentConfig::new(w, 1024), t, c)
    }

    #[test]
    fn goal_validation() {
        assert!(UserGoal::deadline(10.0).validate().is_ok());
        assert!(UserGoal {
            mode: GoalMode::Budget,
            t_max: None,
            s_max: None
        }
        .validate()
        .is_err());
        assert!(UserGoal::deadline(-1.0).validate().is_err());
        let g: UserGoal = serde_json::from_str(r#"{"mode":"budget","s_max":2.5}"#).unwrap();
        assert_eq!(g, UserGoal::budget(2.5));
    }

    #[test]
    fn feasible_deadline_objective_is_cost() {
        let m = ObjectiveModel::new(UserGoal::deadline(100.0), 10.0);
        let mut o = [obs(1, 5.0, 0.2), obs(2, 20.0, 0.01)];
        m.evaluate(&mut o);
        assert!(o[0].feasible && !o[1].feasible);
        assert!((o[0].objective - 2.0).abs() < 1e-12);
        assert!(o[1].objective > o[0].objective);
    }

    #[test]
    fn penalized_minimum_is_the_constrained_minimum() {
        // 5x5 toy grid with known times and costs
        let times = [
            [9.0, 7.0, 5.0, 4.0, 3.5],
            [8.0, 6.0, 4.5, 3.0, 2.5],
            [7.5, 5.0, 3.0, 2.0, 1.9],
            [7.0, 4.0, 2.5, 1.5, 1.2],
            [6.8, 3.8, 2.2, 1.4, 1.0],
        ];
        for (mode, limit) in [
            (GoalMode::Deadline, 3.0),
            (GoalMode::Budget, 0.012),
            (GoalMode::Deadline, 1.3),
        ] {
            let goal = match mode {
                GoalMode::Deadline => UserGoal::deadline(limit),
                _ => UserGoal::budget(limit),
            };
            let m = ObjectiveModel::new(goal, 1.0);
            let mut all = Vec::new();
            for i in 0..5 {
                for j in 0..5 {
                    let c = times[i][j] * (i + 1) as f64 * (j + 1) as f64 * 1e-3;
                    all.push(Observation::new(
                        DeploymentConfig::new(i as u32 + 1, 128 * (j as u32 + 1)),
                        times[i][j],
                        c,
                    ));
                }
            }
            m.evaluate(&mut all);
            let oracle = all
                .iter()
                .filter(|o| match mode {
                    GoalMode::Deadline => o.iter_time <= limit,
                    _ => o.iter_cost <= limit,
                })
                .min_by(|a, b| {
                    let key = |o: &Observation| {
                        if mode == GoalMode::Deadline {
                            o.iter_cost
                        } else {
                            o.iter_time
                        }
                    };
                    key(a).total_cmp(&key(b))
                })
                .unwrap();
            let best = all
                .iter()
                .min_by(|a, b| a.objective.total_cmp(&b.objective))
                .unwrap();
            assert_eq!(best.config, oracle.config);
            let worst_feasible = all
                .iter()
                .filter(|o| o.feasible)
                .map(|o| o.objective)
                .fold(0.0, f64::max);
            assert!(all
                .iter()
                .filter(|o| !o.feasible)
                .all(|o| o.objective > worst_feasible));
        }
    }

    #[test]
    fn invocation_count_follows_the_guard_rule() {
        let r = RestartModel {
            max_duration: 900.0,
            startup_time: 2.5,
            price_per_gb_second: 0.0,
            price_per_invocation: 0.0,
            guard_iterations: 1.5,
        };
        // k = floor((900 - 2.5 - 15)/10) + 1 = 89 iterations per invocation
        assert_eq!(r.invocations(200.0, 10.0), Some(3.0));
        assert_eq!(r.invocations(89.0, 10.0), Some(1.0));
        assert_eq!(r.invocations(1.0, 1000.0), None);
    }

    #[test]
    fn unrunnable_config_is_infeasible_in_every_mode() {
        let mut m = ObjectiveModel::new(UserGoal::fastest(), 10.0);
        m.restart = Some(RestartModel {
            max_duration: 10.0,
            startup_time: 1.0,
            price_per_gb_second: 1e-5,
            price_per_invocation: 0.0,
            guard_iterations: 1.5,
        });
        let mut o = [obs(1, 20.0, 1.0), obs(1, 1.0, 1.0)];
        m.evaluate(&mut o);
        assert!(!o[0].feasible && o[1].feasible);
        assert!(o[0].objective.is_finite() && o[0].objective > o[1].objective);
    }
}
