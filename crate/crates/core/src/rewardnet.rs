//! Parametric reward functions `r(y; x)` over response feature vectors.
//!
//! Parameters are stored as one flat vector in checkpoint order:
//! - linear: `w` (d), `b`
//! - mlp: `W1` (h×d, row-major), `b1` (h), `w2` (h), `b2`
//!
//! The mlp scorer is `w2 · tanh(W1 φ + b1) + b2`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveSpec;
use crate::prefdata::PreferencePair;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp { hidden: usize },
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Linear => f.write_str("linear"),
            ModelKind::Mlp { hidden } => write!(f, "mlp:{hidden}"),
        }
    }
}

/// Parses `linear` or `mlp:H`.
impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(ModelKind::Linear);
        }
        if let Some(h) = s.strip_prefix("mlp:") {
            let hidden: usize = h
                .parse()
                .map_err(|_| Error::invalid(format!("bad hidden width in {s:?}")))?;
            if hidden == 0 {
                return Err(Error::invalid("mlp hidden width must be positive"));
            }
            return Ok(ModelKind::Mlp { hidden });
        }
        Err(Error::invalid(format!("unknown model {s:?} (expected linear or mlp:H)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub init_scale: f64,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model input dimension must be positive"));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.kind {
            return Err(Error::invalid("mlp hidden width must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init scale must be finite and >= 0"));
        }
        Ok(())
    }
}

fn param_count(kind: ModelKind, d: usize) -> usize {
    match kind {
        ModelKind::Linear => d + 1,
        ModelKind::Mlp { hidden } => hidden * d + 2 * hidden + 1,
    }
}

/// Scalar scorer parameters. Also used as the gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams {
    kind: ModelKind,
    dim: usize,
    values: Vec<f64>,
}

impl RewardParams {
    pub fn linear(w: Vec<f64>, b: f64) -> Self {
        let dim = w.len();
        let mut values = w;
        values.push(b);
        RewardParams {
            kind: ModelKind::Linear,
            dim,
            values,
        }
    }

    /// `w1` is h×d row-major.
    pub fn mlp(dim: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self> {
        let hidden = b1.len();
        if w1.len() != hidden * dim || w2.len() != hidden || hidden == 0 || dim == 0 {
            return Err(Error::invalid("inconsistent mlp parameter shapes"));
        }
        let mut values = w1;
        values.extend(b1);
        values.extend(w2);
        values.push(b2);
        Ok(RewardParams {
            kind: ModelKind::Mlp { hidden },
            dim,
            values,
        })
    }

    pub fn from_flat(kind: ModelKind, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != param_count(kind, dim) {
            return Err(Error::invalid(format!(
                "{kind} with d = {dim} needs {} parameters, got {}",
                param_count(kind, dim),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("parameters must be finite"));
        }
        Ok(RewardParams { kind, dim, values })
    }

    pub fn zeros(kind: ModelKind, dim: usize) -> Self {
        RewardParams {
            kind,
            dim,
            values: vec![0.0; param_count(kind, dim)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.dim)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn same_shape(&self, other: &RewardParams) -> bool {
        self.kind == other.kind && self.dim == other.dim
    }

    pub fn bias(&self) -> f64 {
        *self.values.last().expect("params are never empty")
    }

    pub fn set_bias(&mut self, b: f64) {
        *self.values.last_mut().expect("params are never empty") = b;
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn add_scaled(&mut self, other: &RewardParams, alpha: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::invalid("parameter shapes differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature length {} does not match model dimension {}",
                features.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `r(φ)`.
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        self.check_features(features)?;
        let d = self.dim;
        Ok(match self.kind {
            ModelKind::Linear => dot(&self.values[..d], features) + self.values[d],
            ModelKind::Mlp { hidden } => {
                let (w1, rest) = self.values.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut s = b2[0];
                for j in 0..hidden {
                    let z = dot(&w1[j * d..(j + 1) * d], features) + b1[j];
                    s += w2[j] * z.tanh();
                }
                s
            }
        })
    }

    /// Adds `coef · ∇_params r(φ)` into `grad`.
    pub fn accumulate_score_grad(&self, features: &[f64], coef: f64, grad: &mut RewardParams) -> Result<()> {
        self.check_features(features)?;
        if !self.same_shape(grad) {
            return Err(Error::invalid("gradient buffer shape differs from params"));
        }
        let d = self.dim;
        let g = &mut grad.values;
        match self.kind {
            ModelKind::Linear => {
                for (gi, x) in g[..d].iter_mut().zip(features) {
                    *gi += coef * x;
                }
                g[d] += coef;
            }
            ModelKind::Mlp { hidden } => {
                let (w1, rest) = self.values.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let w2 = &rest[..hidden];
                let (g_w1, g_rest) = g.split_at_mut(hidden * d);
                let (g_b1, g_rest) = g_rest.split_at_mut(hidden);
                let (g_w2, g_b2) = g_rest.split_at_mut(hidden);
                for j in 0..hidden {
                    let a = (dot(&w1[j * d..(j + 1) * d], features) + b1[j]).tanh();
                    g_w2[j] += coef * a;
                    let back = coef * w2[j] * (1.0 - a * a);
                    g_b1[j] += back;
                    for (gk, x) in g_w1[j * d..(j + 1) * d].iter_mut().zip(features) {
                        *gk += back * x;
                    }
                }
                g_b2[0] += coef;
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anything that assigns a scalar reward to a response feature vector.
pub trait RewardModel {
    fn reward(&self, features: &[f64]) -> Result<f64>;

    fn margin(&self, pair: &PreferencePair) -> Result<f64> {
        Ok(self.reward(&pair.chosen_features)? - self.reward(&pair.rejected_features)?)
    }
}

impl RewardModel for RewardParams {
    fn reward(&self, features: &[f64]) -> Result<f64> {
        self.score(features)
    }
}

pub fn score(params: &RewardParams, features: &[f64]) -> Result<f64> {
    params.score(features)
}

/// `r(chosen) - r(rejected)`.
pub fn margin(params: &RewardParams, pair: &PreferencePair) -> Result<f64> {
    params.margin(pair)
}

/// Exact loss gradient for an explicit-reward objective.
pub fn loss_gradient(
    params: &RewardParams,
    pair: &PreferencePair,
    objective: &ObjectiveSpec,
) -> Result<(f64, RewardParams)> {
    let mut grad = params.zeros_like();
    let loss = accumulate_loss_gradient(params, pair, objective, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Adds `weight · ∇ loss` into `grad`, returns the loss.
pub(crate) fn accumulate_loss_gradient(
    params: &RewardParams,
    pair: &PreferencePair,
    objective: &ObjectiveSpec,
    weight: f64,
    grad: &mut RewardParams,
) -> Result<f64> {
    if objective.is_implicit() {
        return Err(Error::invalid(
            "implicit-reward objective needs a reference model; use objectives::implicit_loss_gradient",
        ));
    }
    let m = params.margin(pair)?;
    let loss = objective.loss(m)?;
    let coef = weight * objective.dloss(m)?;
    params.accumulate_score_grad(&pair.chosen_features, coef, grad)?;
    params.accumulate_score_grad(&pair.rejected_features, -coef, grad)?;
    Ok(loss)
}

/// Deterministic under `init_seed`: weights ~ N(0, init_scale²), biases zero.
/// Draw order follows the flat layout (`w`, or `W1` then `w2`).
pub fn init(spec: &ModelSpec) -> Result<RewardParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| spec.init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let d = spec.input_dim;
    Ok(match spec.kind {
        ModelKind::Linear => RewardParams::linear(draw(d), 0.0),
        ModelKind::Mlp { hidden } => {
            let w1 = draw(hidden * d);
            let w2 = draw(hidden);
            RewardParams::mlp(d, w1, vec![0.0; hidden], w2, 0.0)?
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub algorithm: OptimizerKind,
    pub learning_rate: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(algorithm: OptimizerKind, learning_rate: f64, params: &RewardParams) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        let n = match algorithm {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => params.len(),
        };
        Ok(OptimizerState {
            algorithm,
            learning_rate,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        })
    }

    /// One update `params ← params − lr · direction(grad)`. A non-finite
    /// gradient aborts without touching params or state.
    pub fn step(&mut self, params: &mut RewardParams, grad: &RewardParams) -> Result<()> {
        if !params.same_shape(grad) {
            return Err(Error::invalid("gradient shape differs from params"));
        }
        if let Some(bad) = grad.values.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient entry at index {bad}")));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.algorithm {
            OptimizerKind::Sgd => {
                for (p, g) in params.values.iter_mut().zip(&grad.values) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .values
                    .iter_mut()
                    .zip(&grad.values)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                }
            }
        }
        Ok(())
    }
}

/// Checkpoint file: spec plus the flat parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: &RewardParams) -> Self {
        Checkpoint {
            spec,
            params: params.values.clone(),
        }
    }

    pub fn to_params(&self) -> Result<RewardParams> {
        RewardParams::from_flat(self.spec.kind, self.spec.input_dim, self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
