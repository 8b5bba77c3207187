//! Pairwise losses as scalar functions of a reward margin `m = r(chosen) - r(rejected)`.
//!
//! | objective | loss |
//! |-----------|------|
//! | BT        | `-log σ(m)` |
//! | cDPO(ε)   | `-(1-ε) log σ(m) - ε log σ(-m)` |
//! | rDPO(ε)   | `[-(1-ε) log σ(m) + ε log σ(-m)] / (1-2ε)` |
//! | ROPO(a)   | `4a²/(1+a)² σ(-m) + 4a/(1+a)² σ(m)` |
//! | DPO(β)    | BT applied to the implicit margin `β[(f_θ-f_ref)(chosen) - (f_θ-f_ref)(rejected)]` |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefdata::PreferencePair;
use crate::rewardnet::{RewardModel, RewardParams};

pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_ROPO_A: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn finite(m: f64) -> Result<f64> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::numeric(format!("non-finite margin {m}")))
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if (0.0..0.5).contains(&eps) {
        Ok(())
    } else {
        Err(Error::invalid(format!("label-noise rate epsilon = {eps} outside [0, 0.5)")))
    }
}

fn check_ropo_a(a: f64) -> Result<()> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("ROPO parameter a = {a} must be > 0")))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("beta = {beta} must be > 0")))
    }
}

/// `-log σ(m) = log(1 + e^{-m})`.
pub fn bt_loss(m: f64) -> Result<f64> {
    Ok(softplus(-finite(m)?))
}

/// `σ(m) - 1`, written as `-σ(-m)` to keep precision for large `m`.
pub fn bt_dloss(m: f64) -> Result<f64> {
    Ok(-sigmoid(-finite(m)?))
}

pub fn cdpo_loss(m: f64, eps: f64) -> Result<f64> {
    check_epsilon(eps)?;
    Ok((1.0 - eps) * bt_loss(m)? + eps * bt_loss(-m)?)
}

pub fn cdpo_dloss(m: f64, eps: f64) -> Result<f64> {
    check_epsilon(eps)?;
    let m = finite(m)?;
    Ok(-(1.0 - eps) * sigmoid(-m) + eps * sigmoid(m))
}

/// Unbiased correction; legitimately negative for large margins.
pub fn rdpo_loss(m: f64, eps: f64) -> Result<f64> {
    check_epsilon(eps)?;
    Ok(((1.0 - eps) * bt_loss(m)? - eps * bt_loss(-m)?) / (1.0 - 2.0 * eps))
}

pub fn rdpo_dloss(m: f64, eps: f64) -> Result<f64> {
    check_epsilon(eps)?;
    let m = finite(m)?;
    Ok((-(1.0 - eps) * sigmoid(-m) - eps * sigmoid(m)) / (1.0 - 2.0 * eps))
}

fn ropo_coefficients(a: f64) -> (f64, f64) {
    let denom = (1.0 + a) * (1.0 + a);
    (4.0 * a * a / denom, 4.0 * a / denom)
}

pub fn ropo_loss(m: f64, a: f64) -> Result<f64> {
    check_ropo_a(a)?;
    let m = finite(m)?;
    let (c_neg, c_pos) = ropo_coefficients(a);
    Ok(c_neg * sigmoid(-m) + c_pos * sigmoid(m))
}

pub fn ropo_dloss(m: f64, a: f64) -> Result<f64> {
    check_ropo_a(a)?;
    let m = finite(m)?;
    let (c_neg, c_pos) = ropo_coefficients(a);
    Ok((c_pos - c_neg) * sigmoid(m) * sigmoid(-m))
}

/// Which pairwise loss to apply to a margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectiveConfig", into = "ObjectiveConfig")]
pub enum ObjectiveSpec {
    Bt,
    Cdpo { epsilon: f64 },
    Rdpo { epsilon: f64 },
    Ropo { a: f64 },
    DpoImplicit { beta: f64 },
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::Bt
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ObjectiveSpec::Bt => Ok(()),
            ObjectiveSpec::Cdpo { epsilon } | ObjectiveSpec::Rdpo { epsilon } => check_epsilon(epsilon),
            ObjectiveSpec::Ropo { a } => check_ropo_a(a),
            ObjectiveSpec::DpoImplicit { beta } => check_beta(beta),
        }
    }

    pub fn is_implicit(&self) -> bool {
        matches!(self, ObjectiveSpec::DpoImplicit { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::Bt => "bt",
            ObjectiveSpec::Cdpo { .. } => "cdpo",
            ObjectiveSpec::Rdpo { .. } => "rdpo",
            ObjectiveSpec::Ropo { .. } => "ropo",
            ObjectiveSpec::DpoImplicit { .. } => "dpo",
        }
    }

    /// Loss of a margin. For the implicit objective the margin is expected to
    /// be the implicit one already (see [`implicit_margin`]).
    pub fn loss(&self, m: f64) -> Result<f64> {
        match *self {
            ObjectiveSpec::Bt | ObjectiveSpec::DpoImplicit { .. } => bt_loss(m),
            ObjectiveSpec::Cdpo { epsilon } => cdpo_loss(m, epsilon),
            ObjectiveSpec::Rdpo { epsilon } => rdpo_loss(m, epsilon),
            ObjectiveSpec::Ropo { a } => ropo_loss(m, a),
        }
    }

    pub fn dloss(&self, m: f64) -> Result<f64> {
        match *self {
            ObjectiveSpec::Bt | ObjectiveSpec::DpoImplicit { .. } => bt_dloss(m),
            ObjectiveSpec::Cdpo { epsilon } => cdpo_dloss(m, epsilon),
            ObjectiveSpec::Rdpo { epsilon } => rdpo_dloss(m, epsilon),
            ObjectiveSpec::Ropo { a } => ropo_dloss(m, a),
        }
    }
}

/// Flat config form: `{"objective": "bt"|"cdpo"|"rdpo"|"ropo"|"dpo", "epsilon", "a", "beta"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub objective: String,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_a() -> f64 {
    DEFAULT_ROPO_A
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl ObjectiveConfig {
    pub fn new(objective: &str) -> Self {
        ObjectiveConfig {
            objective: objective.to_string(),
            epsilon: DEFAULT_EPSILON,
            a: DEFAULT_ROPO_A,
            beta: DEFAULT_BETA,
        }
    }
}

impl TryFrom<ObjectiveConfig> for ObjectiveSpec {
    type Error = Error;

    fn try_from(c: ObjectiveConfig) -> Result<Self> {
        let spec = match c.objective.as_str() {
            "bt" => ObjectiveSpec::Bt,
            "cdpo" => ObjectiveSpec::Cdpo { epsilon: c.epsilon },
            "rdpo" => ObjectiveSpec::Rdpo { epsilon: c.epsilon },
            "ropo" => ObjectiveSpec::Ropo { a: c.a },
            "dpo" => ObjectiveSpec::DpoImplicit { beta: c.beta },
            other => return Err(Error::invalid(format!("unknown objective {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<ObjectiveSpec> for ObjectiveConfig {
    fn from(spec: ObjectiveSpec) -> Self {
        let mut c = ObjectiveConfig::new(spec.name());
        match spec {
            ObjectiveSpec::Bt => {}
            ObjectiveSpec::Cdpo { epsilon } | ObjectiveSpec::Rdpo { epsilon } => c.epsilon = epsilon,
            ObjectiveSpec::Ropo { a } => c.a = a,
            ObjectiveSpec::DpoImplicit { beta } => c.beta = beta,
        }
        c
    }
}

/// Trainable policy scorer and its frozen reference. Scores stand in for
/// log-probabilities up to an additive constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitPolicyPair {
    pub policy: RewardParams,
    pub reference: RewardParams,
}

impl ImplicitPolicyPair {
    pub fn new(policy: RewardParams, reference: RewardParams) -> Result<Self> {
        if policy.kind() != reference.kind() || policy.dim() != reference.dim() {
            return Err(Error::invalid("policy and reference must share a model spec"));
        }
        Ok(ImplicitPolicyPair { policy, reference })
    }

    pub fn with_beta(&self, beta: f64) -> ImplicitReward<'_> {
        ImplicitReward {
            policy: &self.policy,
            reference: &self.reference,
            beta,
        }
    }
}

/// Implicit reward `β (f_θ(x) - f_ref(x))` viewed as a reward model.
#[derive(Debug, Clone, Copy)]
pub struct ImplicitReward<'a> {
    pub policy: &'a RewardParams,
    pub reference: &'a RewardParams,
    pub beta: f64,
}

impl RewardModel for ImplicitReward<'_> {
    fn reward(&self, features: &[f64]) -> Result<f64> {
        Ok(self.beta * (self.policy.score(features)? - self.reference.score(features)?))
    }
}

/// `β[(f_θ - f_ref)(chosen) - (f_θ - f_ref)(rejected)]`.
pub fn implicit_margin(policies: &ImplicitPolicyPair, pair: &PreferencePair, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    policies.with_beta(beta).margin(pair)
}

/// Implicit-reward DPO loss and its gradient with respect to the policy only.
pub fn implicit_loss_gradient(
    policies: &ImplicitPolicyPair,
    pair: &PreferencePair,
    beta: f64,
) -> Result<(f64, RewardParams)> {
    let mut grad = policies.policy.zeros_like();
    let loss = accumulate_implicit(&policies.policy, &policies.reference, pair, beta, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Adds `weight · ∇_θ loss` into `grad` and returns the loss.
pub(crate) fn accumulate_implicit(
    policy: &RewardParams,
    reference: &RewardParams,
    pair: &PreferencePair,
    beta: f64,
    weight: f64,
    grad: &mut RewardParams,
) -> Result<f64> {
    check_beta(beta)?;
    let m = ImplicitReward {
        policy,
        reference,
        beta,
    }
    .margin(pair)?;
    let loss = bt_loss(m)?;
    let coef = weight * bt_dloss(m)? * beta;
    policy.accumulate_score_grad(&pair.chosen_features, coef, grad)?;
    policy.accumulate_score_grad(&pair.rejected_features, -coef, grad)?;
    Ok(loss)
}
