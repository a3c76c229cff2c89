use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::TrainerError;
use crate::sync::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_features: usize,
    /// Hidden width; ignored for linear regression.
    #[serde(default)]
    pub hidden: usize,
}

impl ModelConfig {
    pub fn param_count(&self) -> usize {
        param_count(self.kind, self.n_features, self.hidden)
    }

    /// Hidden width giving exactly `params` parameters, if one exists.
    pub fn hidden_for_params(&self, params: usize) -> Option<usize> {
        match self.kind {
            ModelKind::LinearRegression => (params == self.n_features + 1).then_some(0),
            ModelKind::Mlp => {
                let per_unit = self.n_features + 2;
                let h = params.checked_sub(1)? / per_unit;
                (h >= 1 && h * per_unit + 1 == params).then_some(h)
            }
        }
    }
}

fn param_count(kind: ModelKind, d: usize, h: usize) -> usize {
    match kind {
        ModelKind::LinearRegression => d + 1,
        ModelKind::Mlp => h * d + h + h + 1,
    }
}

/// Dense-parameter regression model trained with squared loss ½(ŷ − y)².
///
/// Parameter layout: linear regression stores `[w (d), b]`; the MLP stores
/// `[W1 (h×d, row-major), b1 (h), w2 (h), b2]` for `ŷ = w2·tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub n_features: usize,
    pub hidden: usize,
    pub parameters: Vec<f64>,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, TrainerError> {
        let d = config.n_features;
        if d == 0 {
            return Err(TrainerError::InvalidModel("n_features must be >= 1".into()));
        }
        let hidden = match config.kind {
            ModelKind::LinearRegression => 0,
            ModelKind::Mlp if config.hidden == 0 => {
                return Err(TrainerError::InvalidModel("mlp needs hidden >= 1".into()))
            }
            ModelKind::Mlp => config.hidden,
        };
        let mut parameters = vec![0.0; param_count(config.kind, d, hidden)];
        if config.kind == ModelKind::Mlp {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
            let w2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("valid normal");
            for p in &mut parameters[..hidden * d] {
                *p = w1.sample(&mut rng);
            }
            let w2_start = hidden * d + hidden;
            for p in &mut parameters[w2_start..w2_start + hidden] {
                *p = w2.sample(&mut rng);
            }
        }
        Ok(Self {
            kind: config.kind,
            n_features: d,
            hidden,
            parameters,
        })
    }

    pub fn from_parameters(
        config: &ModelConfig,
        parameters: Vec<f64>,
    ) -> Result<Self, TrainerError> {
        let hidden = config.hidden_for_params(parameters.len()).ok_or_else(|| {
            TrainerError::InvalidModel(format!(
                "{} parameters do not fit {config:?}",
                parameters.len()
            ))
        })?;
        Ok(Self {
            kind: config.kind,
            n_features: config.n_features,
            hidden,
            parameters,
        })
    }

    pub fn param_count(&self) -> usize {
        self.parameters.len()
    }

    /// (rows, cols) of every parameter block in layout order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::LinearRegression => vec![(1, self.n_features), (1, 1)],
            ModelKind::Mlp => vec![
                (self.hidden, self.n_features),
                (self.hidden, 1),
                (1, self.hidden),
                (1, 1),
            ],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let d = self.n_features;
        match self.kind {
            ModelKind::LinearRegression => dot(&self.parameters[..d], x) + self.parameters[d],
            ModelKind::Mlp => {
                let h = self.hidden;
                let (w1, rest) = self.parameters.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut out = b2[0];
                for k in 0..h {
                    out += w2[k] * (dot(&w1[k * d..(k + 1) * d], x) + b1[k]).tanh();
                }
                out
            }
        }
    }

    /// Mean squared loss over `batch`.
    pub fn loss(&self, batch: &Dataset) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let total: f64 = (0..batch.len())
            .map(|i| {
                let r = self.predict(batch.row(i)) - batch.labels[i];
                0.5 * r * r
            })
            .sum();
        total / batch.len() as f64
    }

    /// Mean loss and its analytic gradient over `batch`.
    pub fn loss_and_gradient(&self, batch: &Dataset) -> Result<(f64, Vec<f64>), TrainerError> {
        if batch.is_empty() {
            return Err(TrainerError::EmptyMinibatch);
        }
        if batch.n_features != self.n_features {
            return Err(TrainerError::InvalidModel(format!(
                "batch has {} features, model expects {}",
                batch.n_features, self.n_features
            )));
        }
        let d = self.n_features;
        let mut grad = vec![0.0; self.parameters.len()];
        let mut loss = 0.0;
        match self.kind {
            ModelKind::LinearRegression => {
                for i in 0..batch.len() {
                    let x = batch.row(i);
                    let r = self.predict(x) - batch.labels[i];
                    loss += 0.5 * r * r;
                    for (g, xi) in grad[..d].iter_mut().zip(x) {
                        *g += r * xi;
                    }
                    grad[d] += r;
                }
            }
            ModelKind::Mlp => {
                let h = self.hidden;
                let (w1, rest) = self.parameters.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut act = vec![0.0; h];
                for i in 0..batch.len() {
                    let x = batch.row(i);
                    let mut out = b2[0];
                    for k in 0..h {
                        act[k] = (dot(&w1[k * d..(k + 1) * d], x) + b1[k]).tanh();
                        out += w2[k] * act[k];
                    }
                    let r = out - batch.labels[i];
                    loss += 0.5 * r * r;
                    let (g_w1, rest) = grad.split_at_mut(h * d);
                    let (g_b1, rest) = rest.split_at_mut(h);
                    let (g_w2, g_b2) = rest.split_at_mut(h);
                    g_b2[0] += r;
                    for k in 0..h {
                        g_w2[k] += r * act[k];
                        let dz = r * w2[k] * (1.0 - act[k] * act[k]);
                        g_b1[k] += dz;
                        for (g, xi) in g_w1[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *g += dz * xi;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        loss /= n;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainerError::NonFiniteLoss { loss });
        }
        Ok((loss, grad))
    }

    /// Changes the hidden width, keeping existing units. New units get random
    /// input weights and a zero output weight, so predictions are unchanged.
    pub fn resize_hidden(&mut self, hidden: usize, seed: u64) -> Result<(), TrainerError> {
        if self.kind != ModelKind::Mlp || hidden == 0 {
            return Err(TrainerError::InvalidModel(
                "only an mlp can be resized".into(),
            ));
        }
        let d = self.n_features;
        let old = self.hidden;
        let (w1, rest) = self.parameters.split_at(old * d);
        let (b1, rest) = rest.split_at(old);
        let (w2, b2) = rest.split_at(old);
        let keep = old.min(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let mut new_w1 = w1[..keep * d].to_vec();
        new_w1.extend((keep * d..hidden * d).map(|_| normal.sample(&mut rng)));
        let mut params = new_w1;
        params.extend_from_slice(&b1[..keep]);
        params.extend(std::iter::repeat_n(0.0, hidden - keep));
        params.extend_from_slice(&w2[..keep]);
        params.extend(std::iter::repeat_n(0.0, hidden - keep));
        params.push(b2[0]);
        self.parameters = params;
        self.hidden = hidden;
        Ok(())
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            n_features: self.n_features,
            hidden: self.hidden,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean gradient of the loss over a non-empty minibatch. Does not touch the
/// parameters.
pub fn train_step(
    model: &Model,
    minibatch: &Dataset,
) -> Result<(GradientVector, f64), TrainerError> {
    let (loss, grad) = model.loss_and_gradient(minibatch)?;
    let grad = GradientVector::new(grad).map_err(|_| TrainerError::NonFiniteLoss { loss })?;
    Ok((grad, loss))
}

/// parameters ← parameters − learning_rate × gradient.
pub fn apply_update(
    model: &mut Model,
    gradient: &GradientVector,
    learning_rate: f64,
) -> Result<(), TrainerError> {
    if gradient.len() != model.param_count() {
        return Err(TrainerError::LengthMismatch {
            expected: model.param_count(),
            actual: gradient.len(),
        });
    }
    for (p, g) in model.parameters.iter_mut().zip(gradient.as_slice()) {
        *p -= learning_rate * g;
    }
    Ok(())
}
