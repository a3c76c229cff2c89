//! Gaussian-process regression on the unit square with an ARD
//! squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::OptimizerError;

pub const LENGTH_SCALE_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];
const NOISE_RATIO: f64 = 1e-10;
const MAX_JITTER_STEPS: usize = 10;

#[derive(Debug, Clone)]
pub struct GpModel {
    pub inputs: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
    pub prior_mean: f64,
    pub signal_variance: f64,
    pub length_scales: [f64; 2],
    pub noise_variance: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

fn kernel(a: &[f64; 2], b: &[f64; 2], sv: f64, ls: &[f64; 2]) -> f64 {
    let d0 = (a[0] - b[0]) / ls[0];
    let d1 = (a[1] - b[1]) / ls[1];
    sv * (-0.5 * (d0 * d0 + d1 * d1)).exp()
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    noise: f64,
    log_ml: f64,
}

fn factorize(x: &[[f64; 2]], centered: &DVector<f64>, sv: f64, ls: &[f64; 2]) -> Option<Factor> {
    let n = x.len();
    let base = DMatrix::from_fn(n, n, |i, j| kernel(&x[i], &x[j], sv, ls));
    let mut noise = NOISE_RATIO * sv;
    for _ in 0..MAX_JITTER_STEPS {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += noise;
        }
        if let Some(chol) = Cholesky::new(k) {
            let alpha = chol.solve(centered);
            let log_det: f64 = chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
            let log_ml = -0.5 * centered.dot(&alpha)
                - log_det
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Some(Factor {
                chol,
                alpha,
                noise,
                log_ml,
            });
        }
        noise *= 10.0;
    }
    None
}

impl GpModel {
    /// Prior-only model: every query returns `(prior_mean, sqrt(signal_variance))`.
    pub fn prior(prior_mean: f64, signal_variance: f64) -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            prior_mean,
            signal_variance,
            length_scales: [LENGTH_SCALE_GRID[2]; 2],
            noise_variance: NOISE_RATIO * signal_variance,
            chol: None,
            alpha: DVector::zeros(0),
        }
    }

    /// Fits on normalized inputs. Signal variance and prior mean come from the
    /// targets; length scales maximize the marginal likelihood over a grid.
    pub fn fit(inputs: &[[f64; 2]], targets: &[f64]) -> Result<Self, OptimizerError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(OptimizerError::NoObservations);
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        // a constant surface carries no information; keep the prior tight so
        // that EI collapses instead of exploring forever
        let sv = if var > 0.0 {
            var
        } else {
            1e-12 * mean.abs().max(1.0).powi(2)
        };
        let centered = DVector::from_iterator(targets.len(), targets.iter().map(|y| y - mean));

        let mut best: Option<([f64; 2], Factor)> = None;
        for &l0 in &LENGTH_SCALE_GRID {
            for &l1 in &LENGTH_SCALE_GRID {
                let ls = [l0, l1];
                if let Some(f) = factorize(inputs, &centered, sv, &ls) {
                    if best.as_ref().is_none_or(|(_, b)| f.log_ml > b.log_ml) {
                        best = Some((ls, f));
                    }
                }
            }
        }
        let (length_scales, f) = best.ok_or(OptimizerError::SingularKernel)?;
        Ok(Self {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            prior_mean: mean,
            signal_variance: sv,
            length_scales,
            noise_variance: f.noise,
            chol: Some(f.chol),
            alpha: f.alpha,
        })
    }

    /// Posterior mean and standard deviation at a normalized point.
    pub fn predict(&self, x: &[f64; 2]) -> (f64, f64) {
        let Some(chol) = &self.chol else {
            return (self.prior_mean, self.signal_variance.sqrt());
        };
        let k = DVector::from_iterator(
            self.inputs.len(),
            self.inputs
                .iter()
                .map(|xi| kernel(xi, x, self.signal_variance, &self.length_scales)),
        );
        let mu = self.prior_mean + k.dot(&self.alpha);
        let v = chol
            .l()
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        let var = self.signal_variance - v.norm_squared();
        (mu, var.max(0.0).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_observation_is_interpolated() {
        let gp = GpModel::fit(&[[0.3, 0.6]], &[4.2]).unwrap();
        let (mu, sd) = gp.predict(&[0.3, 0.6]);
        assert!((mu - 4.2).abs() < 1e-9);
        assert!(sd < 1e-2 * gp.signal_variance.sqrt() + 1e-9);
    }

    #[test]
    fn prior_query() {
        let gp = GpModel::prior(1.5, 4.0);
        assert_eq!(gp.predict(&[0.2, 0.9]), (1.5, 2.0));
    }

    #[test]
    fn far_from_data_reverts_to_prior() {
        let gp = GpModel::fit(&[[0.0, 0.0], [0.02, 0.01]], &[1.0, 3.0]).unwrap();
        let far = [1.0, 1.0];
        // only meaningful if the chosen length scales are short enough
        if gp.length_scales.iter().all(|l| *l <= 0.2) {
            let (mu, sd) = gp.predict(&far);
            assert!((mu - gp.prior_mean).abs() < 1e-6);
            assert!((sd - gp.signal_variance.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_midpoint_is_the_average() {
        let gp = GpModel::fit(&[[0.2, 0.5], [0.8, 0.5]], &[1.0, 5.0]).unwrap();
        let (mu, _) = gp.predict(&[0.5, 0.5]);
        assert!((mu - 3.0).abs() < 1e-9);
    }

    /// Independent oracle: Gaussian elimination on K + noise·I.
    fn direct_mean(gp: &GpModel, x: &[f64; 2]) -> f64 {
        let n = gp.inputs.len();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n)
                    .map(|j| {
                        let d0 = (gp.inputs[i][0] - gp.inputs[j][0]) / gp.length_scales[0];
                        let d1 = (gp.inputs[i][1] - gp.inputs[j][1]) / gp.length_scales[1];
                        gp.signal_variance * (-0.5 * (d0 * d0 + d1 * d1)).exp()
                    })
                    .collect();
                row[i] += gp.noise_variance;
                row.push(gp.targets[i] - gp.prior_mean);
                row
            })
            .collect();
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, p);
            for r in 0..n {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=n {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        let alpha: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        gp.prior_mean
            + (0..n)
                .map(|i| {
                    let d0 = (gp.inputs[i][0] - x[0]) / gp.length_scales[0];
                    let d1 = (gp.inputs[i][1] - x[1]) / gp.length_scales[1];
                    alpha[i] * gp.signal_variance * (-0.5 * (d0 * d0 + d1 * d1)).exp()
                })
                .sum::<f64>()
    }

    #[test]
    fn random_points_match_direct_solve_and_interpolate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<[f64; 2]> = (0..5).map(|_| [rng.random(), rng.random()]).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let gp = GpModel::fit(&x, &y).unwrap();
            for (xi, yi) in x.iter().zip(&y) {
                assert!(
                    (gp.predict(xi).0 - yi).abs() < 1e-6,
                    "{} {:?} {}",
                    gp.predict(xi).0 - yi,
                    gp.length_scales,
                    gp.noise_variance / gp.signal_variance
                );
            }
            let q = [rng.random(), rng.random()];
            assert!((gp.predict(&q).0 - direct_mean(&gp, &q)).abs() < 1e-8);
            assert!(gp.predict(&q).1 >= 0.0);
        }
    }

    #[test]
    fn duplicate_inputs_survive_with_jitter() {
        let gp = GpModel::fit(&[[0.5, 0.5], [0.5, 0.5], [0.1, 0.2]], &[1.0, 1.0, 2.0]).unwrap();
        assert!((gp.predict(&[0.5, 0.5]).0 - 1.0).abs() < 1e-6);
    }
}
