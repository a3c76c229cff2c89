//! Expected improvement for minimization and its argmax over a candidate set.

use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{DeploymentConfig, GpModel, OptimizerError, SearchSpace};

/// `(y_best - mu)·Φ(γ) + δ·φ(γ)` with `γ = (y_best - mu)/δ`; zero when `δ = 0`.
pub fn expected_improvement(mu: f64, delta: f64, y_best: f64) -> f64 {
    if delta <= 0.0 || !delta.is_finite() {
        return 0.0;
    }
    let n = Normal::standard();
    let improvement = y_best - mu;
    let gamma = improvement / delta;
    (improvement * n.cdf(gamma) + delta * n.pdf(gamma)).max(0.0)
}

/// Candidate with the largest EI and that EI. `candidates` must be sorted by
/// (workers, memory); the first maximum wins, so ties go to the fewest
/// workers and then the least memory.
pub fn best_candidate(
    gp: &GpModel,
    space: &SearchSpace,
    candidates: &[DeploymentConfig],
    y_best: f64,
) -> Option<(DeploymentConfig, f64)> {
    let mut best: Option<(DeploymentConfig, f64)> = None;
    for c in candidates {
        let (mu, delta) = gp.predict(&space.normalize(c));
        let ei = expected_improvement(mu, delta, y_best);
        if best.is_none_or(|(_, b)| ei > b) {
            best = Some((*c, ei));
        }
    }
    best
}

/// Most promising configuration to profile next.
pub fn propose_next<R: Rng + ?Sized>(
    gp: &GpModel,
    space: &SearchSpace,
    y_best: f64,
    rng: &mut R,
) -> Result<DeploymentConfig, OptimizerError> {
    if space.is_empty() {
        return Err(OptimizerError::EmptySpace);
    }
    best_candidate(gp, space, &space.candidates(rng), y_best)
        .map(|(c, _)| c)
        .ok_or(OptimizerError::EmptySpace)
}
