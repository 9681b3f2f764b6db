//! Finite-support policies over a prompt × response grid.
//!
//! A policy is a table of logits; row `x` defines `π(·|x)` through a
//! softmax. Sampling applies temperature scaling followed by nucleus
//! (top-p) truncation. [`optimal_policy`] gives the closed-form maximizer
//! of the KL-regularized reward objective against a reference policy.

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::math;
use crate::rng;

pub type PromptId = usize;
pub type ResponseId = usize;

/// Tolerance used when checking that an input vector is a distribution.
const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpace {
    num_prompts: usize,
    responses_per_prompt: usize,
}

impl PromptSpace {
    pub fn new(num_prompts: usize, responses_per_prompt: usize) -> Result<Self> {
        if num_prompts < 1 {
            return Err(domain("num_prompts must be at least 1"));
        }
        if responses_per_prompt < 2 {
            return Err(domain("responses_per_prompt must be at least 2"));
        }
        Ok(Self {
            num_prompts,
            responses_per_prompt,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn responses_per_prompt(&self) -> usize {
        self.responses_per_prompt
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_prompts, self.responses_per_prompt)
    }

    pub fn check_prompt(&self, x: PromptId) -> Result<()> {
        if x >= self.num_prompts {
            return Err(domain(format!(
                "prompt id {x} out of range (num_prompts = {})",
                self.num_prompts
            )));
        }
        Ok(())
    }

    pub fn check_response(&self, y: ResponseId) -> Result<()> {
        if y >= self.responses_per_prompt {
            return Err(domain(format!(
                "response id {y} out of range (responses_per_prompt = {})",
                self.responses_per_prompt
            )));
        }
        Ok(())
    }

    /// Errors unless `table` has this space's shape.
    pub fn check_table(&self, table: &Array2<f64>, what: &str) -> Result<()> {
        if table.dim() != self.shape() {
            return Err(domain(format!(
                "{what} has shape {:?}, expected {:?}",
                table.dim(),
                self.shape()
            )));
        }
        Ok(())
    }
}

/// Logit table defining `π(y|x) = softmax(logits[x])[y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    logits: Array2<f64>,
}

impl PolicyParams {
    pub fn new(logits: Array2<f64>) -> Result<Self> {
        let (rows, cols) = logits.dim();
        PromptSpace::new(rows, cols)?;
        if let Some(((x, y), v)) = logits.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(numeric(format!("logit ({x}, {y}) is not finite: {v}")));
        }
        Ok(Self { logits })
    }

    /// Uniform policy (all-zero logits).
    pub fn uniform(space: PromptSpace) -> Self {
        Self {
            logits: Array2::zeros(space.shape()),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(domain("ragged logit rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let logits =
            Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| domain(e.to_string()))?;
        Self::new(logits)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.logits.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    pub fn space(&self) -> PromptSpace {
        let (rows, cols) = self.logits.dim();
        PromptSpace {
            num_prompts: rows,
            responses_per_prompt: cols,
        }
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn row(&self, x: PromptId) -> ArrayView1<'_, f64> {
        self.logits.row(x)
    }

    /// `ln π(·|x)` at temperature 1.
    pub fn log_probs(&self, x: PromptId) -> Result<Vec<f64>> {
        self.space().check_prompt(x)?;
        Ok(math::log_softmax(&self.row_vec(x), 1.0))
    }

    /// Full probability table at temperature 1.
    pub fn probabilities(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.logits.dim());
        for (x, mut row) in out.rows_mut().into_iter().enumerate() {
            for (dst, p) in row.iter_mut().zip(math::softmax(&self.row_vec(x), 1.0)) {
                *dst = p;
            }
        }
        out
    }

    /// Stable hash of the shape and exact logit bits.
    pub fn fingerprint(&self) -> u64 {
        let (rows, cols) = self.logits.dim();
        self.logits
            .iter()
            .fold(rng::derive_seed(rows as u64, &[cols as u64]), |acc, v| {
                rng::mix64(acc ^ v.to_bits())
            })
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Array2<f64> {
        &mut self.logits
    }

    fn row_vec(&self, x: PromptId) -> Vec<f64> {
        self.logits.row(x).to_vec()
    }
}

/// Sampling configuration. Defaults: temperature 1.0, top-p 0.9.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl GenerationConfig {
    pub fn new(temperature: f64, top_p: f64) -> Result<Self> {
        let config = Self { temperature, top_p };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(domain("temperature must be positive and finite"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(domain("top_p must lie in (0, 1]"));
        }
        Ok(())
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
        }
    }
}

/// `softmax(logits[x] / temperature)`.
pub fn policy_distribution(
    policy: &PolicyParams,
    x: PromptId,
    temperature: f64,
) -> Result<Vec<f64>> {
    policy.space().check_prompt(x)?;
    if !(temperature > 0.0) {
        return Err(domain("temperature must be positive"));
    }
    let row = policy.row_vec(x);
    if row.iter().any(|v| !v.is_finite()) {
        return Err(numeric(format!("non-finite logits in row {x}")));
    }
    Ok(math::softmax(&row, temperature))
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(numeric("empty distribution"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(numeric("distribution has negative or non-finite entries"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(numeric(format!("distribution sums to {total}, not 1")));
    }
    Ok(())
}

/// Keeps the smallest probability-descending prefix whose mass reaches
/// `top_p` and renormalizes. Equal probabilities are ordered by smaller
/// response id first.
pub fn nucleus_truncate(probs: &[f64], top_p: f64) -> Result<Vec<f64>> {
    check_distribution(probs)?;
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(domain("top_p must lie in (0, 1]"));
    }
    if top_p == 1.0 {
        return Ok(probs.to_vec());
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    // Absorb summation rounding, e.g. 0.6 + 0.3 < 0.9 in binary.
    let threshold = top_p - 1e-12;
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        kept[i] = probs[i];
        mass += probs[i];
        if mass >= threshold {
            break;
        }
    }
    Ok(kept.into_iter().map(|p| p / mass).collect())
}

/// Distribution actually sampled from under `config`.
pub fn sampling_distribution(
    policy: &PolicyParams,
    x: PromptId,
    config: &GenerationConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let probs = policy_distribution(policy, x, config.temperature)?;
    nucleus_truncate(&probs, config.top_p)
}

pub fn sample_response<R: Rng + ?Sized>(
    policy: &PolicyParams,
    x: PromptId,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<ResponseId> {
    let probs = sampling_distribution(policy, x, config)?;
    let dist = WeightedIndex::new(&probs).map_err(|e| numeric(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Closed-form maximizer of `E[r] − β·KL(π‖π_ref)`:
/// `π(y|x) ∝ π_ref(y|x)·exp(r(x,y)/β)`, evaluated in log space.
///
/// The returned logits are the normalized log-probabilities, so each row's
/// log-partition `ln Z(x)` has already been subtracted.
pub fn optimal_policy(
    reference: &PolicyParams,
    rewards: &Array2<f64>,
    beta: f64,
) -> Result<PolicyParams> {
    if !(beta > 0.0) {
        return Err(domain("beta must be positive"));
    }
    let space = reference.space();
    space.check_table(rewards, "reward table")?;
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(numeric("reward table contains non-finite values"));
    }
    let mut logits = Array2::zeros(space.shape());
    for x in 0..space.num_prompts() {
        let log_ref = reference.log_probs(x)?;
        let unnormalized: Vec<f64> = log_ref
            .iter()
            .zip(rewards.row(x))
            .map(|(lr, r)| lr + r / beta)
            .collect();
        let log_z = math::log_sum_exp(&unnormalized);
        for (y, u) in unnormalized.iter().enumerate() {
            logits[[x, y]] = u - log_z;
        }
    }
    PolicyParams::new(logits)
}
