//! DPO and reward-weighted DPO over tabular policies.
//!
//! For a pair `(x, y_w, y_l)` the implicit reward margin is
//!
//! ```text
//! m = β1·[ln π(y_w|x)/π_ref(y_w|x) − ln π(y_l|x)/π_ref(y_l|x)]
//! ```
//!
//! DPO minimizes `−ln σ(m)`; the weighted variant scales each pair by
//! `R = σ(β2·(r_w − r_l))`, the sigmoid of its explicit reward gap.
//!
//! With softmax logits the `ln Z` terms cancel inside `m`, so
//! `∂m/∂z[x, k] = β1·(1[k = y_w] − 1[k = y_l])` and only two logits per
//! pair receive gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::math;
use crate::policy::PolicyParams;
use crate::scheduler::PreferencePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Wdpo,
}

impl std::str::FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dpo" => Ok(Self::Dpo),
            "wdpo" => Ok(Self::Wdpo),
            other => Err(domain(format!(
                "unknown loss {other:?} (expected dpo or wdpo)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Implicit-reward scale.
    pub beta1: f64,
    /// Explicit-reward-gap scale of the pair weight.
    pub beta2: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 1.0,
            kind: LossKind::Wdpo,
        }
    }
}

impl LossConfig {
    pub fn new(beta1: f64, beta2: f64, kind: LossKind) -> Result<Self> {
        let config = Self { beta1, beta2, kind };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1.is_finite()) {
            return Err(domain("beta1 must be positive"));
        }
        if !(self.beta2 >= 0.0 && self.beta2.is_finite()) {
            return Err(domain("beta2 must be nonnegative"));
        }
        Ok(())
    }
}

fn log_ratio(
    policy: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
) -> Result<(f64, f64)> {
    let space = policy.space();
    if reference.space() != space {
        return Err(domain("policy and reference have different shapes"));
    }
    space.check_response(pair.chosen)?;
    space.check_response(pair.rejected)?;
    let lp = policy.log_probs(pair.prompt)?;
    let lr = reference.log_probs(pair.prompt)?;
    for y in [pair.chosen, pair.rejected] {
        if lr[y] == f64::NEG_INFINITY {
            return Err(numeric(format!(
                "reference assigns zero probability to response {y} of prompt {}",
                pair.prompt
            )));
        }
    }
    Ok((
        lp[pair.chosen] - lr[pair.chosen],
        lp[pair.rejected] - lr[pair.rejected],
    ))
}

pub fn implicit_reward_margin(
    policy: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta1: f64,
) -> Result<f64> {
    let (chosen, rejected) = log_ratio(policy, reference, pair)?;
    let margin = beta1 * (chosen - rejected);
    if !margin.is_finite() {
        return Err(numeric("implicit reward margin is not finite"));
    }
    Ok(margin)
}

/// `R = σ(β2·(r_w − r_l))`.
pub fn wdpo_weight(pair: &PreferencePair, beta2: f64) -> f64 {
    math::sigmoid(beta2 * pair.reward_gap())
}

fn pair_weight(pair: &PreferencePair, config: &LossConfig) -> Result<f64> {
    match config.kind {
        LossKind::Dpo => Ok(1.0),
        LossKind::Wdpo => {
            if !(pair.reward_chosen.is_finite() && pair.reward_rejected.is_finite()) {
                return Err(domain(format!(
                    "pair on prompt {} has no finite rewards",
                    pair.prompt
                )));
            }
            Ok(wdpo_weight(pair, config.beta2))
        }
    }
}

fn check_batch(batch: &[PreferencePair]) -> Result<()> {
    if batch.is_empty() {
        return Err(domain("preference batch is empty"));
    }
    Ok(())
}

/// Mean of `−w(pair)·ln σ(m)` over the batch, for the configured loss.
pub fn preference_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    config: &LossConfig,
) -> Result<f64> {
    check_batch(batch)?;
    config.validate()?;
    let mut total = 0.0;
    for pair in batch {
        let margin = implicit_reward_margin(policy, reference, pair, config.beta1)?;
        total += -pair_weight(pair, config)? * math::log_sigmoid(margin);
    }
    Ok(total / batch.len() as f64)
}

pub fn dpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    beta1: f64,
) -> Result<f64> {
    let config = LossConfig {
        beta1,
        beta2: 0.0,
        kind: LossKind::Dpo,
    };
    preference_loss(policy, reference, batch, &config)
}

pub fn wdpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    config: &LossConfig,
) -> Result<f64> {
    let config = LossConfig {
        kind: LossKind::Wdpo,
        ..*config
    };
    preference_loss(policy, reference, batch, &config)
}

/// Exact gradient of [`preference_loss`] with respect to the policy logits.
/// The reference is held constant.
pub fn loss_gradient(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    config: &LossConfig,
) -> Result<Array2<f64>> {
    check_batch(batch)?;
    config.validate()?;
    let n = batch.len() as f64;
    let mut grad = Array2::zeros(policy.space().shape());
    for pair in batch {
        let margin = implicit_reward_margin(policy, reference, pair, config.beta1)?;
        let weight = pair_weight(pair, config)?;
        if pair.is_degenerate() {
            continue;
        }
        // d/dm [−w·ln σ(m)] = −w·σ(−m)
        let g = -weight * math::sigmoid(-margin) * config.beta1 / n;
        grad[[pair.prompt, pair.chosen]] += g;
        grad[[pair.prompt, pair.rejected]] -= g;
    }
    Ok(grad)
}

/// `logits ← logits − lr·gradient`.
pub fn apply_step(policy: &PolicyParams, gradient: &Array2<f64>, lr: f64) -> Result<PolicyParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(domain("learning rate must be nonnegative and finite"));
    }
    policy.space().check_table(gradient, "gradient")?;
    let mut next = policy.clone();
    next.logits_mut().scaled_add(-lr, gradient);
    if next.logits().iter().any(|v| !v.is_finite()) {
        return Err(numeric("policy update produced non-finite logits"));
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Gradient divided by a running RMS of past gradients.
    Rmsprop,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(Self::Sgd),
            "rmsprop" => Ok(Self::Rmsprop),
            other => Err(domain(format!(
                "unknown optimizer {other:?} (expected sgd or rmsprop)"
            ))),
        }
    }
}

/// Stateful optimizer driving one iteration's inner steps.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    decay: f64,
    eps: f64,
    mean_square: Option<Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(domain("learning rate must be positive"));
        }
        Ok(Self {
            kind,
            lr,
            decay: 0.99,
            eps: 1e-8,
            mean_square: None,
        })
    }

    pub fn step(&mut self, policy: &PolicyParams, gradient: &Array2<f64>) -> Result<PolicyParams> {
        match self.kind {
            OptimizerKind::Sgd => apply_step(policy, gradient, self.lr),
            OptimizerKind::Rmsprop => {
                policy.space().check_table(gradient, "gradient")?;
                let (decay, eps) = (self.decay, self.eps);
                let ms = self
                    .mean_square
                    .get_or_insert_with(|| Array2::zeros(gradient.dim()));
                ms.zip_mut_with(gradient, |m, g| *m = decay * *m + (1.0 - decay) * g * g);
                let scaled = ndarray::Zip::from(gradient)
                    .and(&*ms)
                    .map_collect(|g, m| g / (m.sqrt() + eps));
                apply_step(policy, &scaled, self.lr)
            }
        }
    }
}
