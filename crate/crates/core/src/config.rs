//! Flat `key: value` experiment files.
//!
//! Only `num_prompts` and `responses_per_prompt` are required; every other
//! key falls back to the defaults of [`ExperimentConfig::new`]. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::efficiency::CostModel;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind, OptimizerKind};
use crate::online::ExperimentConfig;
use crate::policy::{GenerationConfig, PromptSpace};
use crate::scenario::{RewardSourceKind, ScenarioConfig};
use crate::scheduler::SelectionStrategy;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    num_prompts: usize,
    responses_per_prompt: usize,
    seed: Option<u64>,
    iterations: Option<usize>,
    rho: Option<f64>,
    strategy: Option<SelectionStrategy>,
    loss: Option<LossKind>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    temperature: Option<f64>,
    top_p: Option<f64>,
    inner_steps: Option<usize>,
    lr: Option<f64>,
    optimizer: Option<OptimizerKind>,
    reward_source: Option<RewardSourceKind>,
    cost_gen: Option<f64>,
    cost_reward: Option<f64>,
    cost_train: Option<f64>,
    scenario_seed: Option<u64>,
    reward_csv: Option<PathBuf>,
    reward_scale: Option<f64>,
    init_logit_scale: Option<f64>,
    rm_comparisons_per_prompt: Option<usize>,
    rm_steps: Option<usize>,
    rm_lr: Option<f64>,
    parallel: Option<bool>,
}

impl ConfigFile {
    fn into_config(self) -> Result<ExperimentConfig> {
        let space = PromptSpace::new(self.num_prompts, self.responses_per_prompt)?;
        let mut c = ExperimentConfig::new(space, self.seed.unwrap_or(0));
        let loss = LossConfig::default();
        let generation = GenerationConfig::default();
        let cost = CostModel::default();
        let scenario = ScenarioConfig::default();

        c.iterations = self.iterations.unwrap_or(c.iterations);
        c.rho = self.rho.unwrap_or(c.rho);
        c.strategy = self.strategy.unwrap_or(c.strategy);
        c.loss = LossConfig {
            beta1: self.beta1.unwrap_or(loss.beta1),
            beta2: self.beta2.unwrap_or(loss.beta2),
            kind: self.loss.unwrap_or(loss.kind),
        };
        c.generation = GenerationConfig {
            temperature: self.temperature.unwrap_or(generation.temperature),
            top_p: self.top_p.unwrap_or(generation.top_p),
        };
        c.inner_steps = self.inner_steps.unwrap_or(c.inner_steps);
        c.lr = self.lr.unwrap_or(c.lr);
        c.optimizer = self.optimizer.unwrap_or(c.optimizer);
        c.reward_source = self.reward_source.unwrap_or(c.reward_source);
        c.cost = CostModel {
            f_gen: self.cost_gen.unwrap_or(cost.f_gen),
            f_reward: self.cost_reward.unwrap_or(cost.f_reward),
            f_train: self.cost_train.unwrap_or(cost.f_train),
        };
        c.scenario = ScenarioConfig {
            seed: self.scenario_seed,
            reward_scale: self.reward_scale.unwrap_or(scenario.reward_scale),
            init_logit_scale: self.init_logit_scale.unwrap_or(scenario.init_logit_scale),
            reward_csv: self.reward_csv,
            rm_comparisons_per_prompt: self
                .rm_comparisons_per_prompt
                .unwrap_or(scenario.rm_comparisons_per_prompt),
            rm_steps: self.rm_steps.unwrap_or(scenario.rm_steps),
            rm_lr: self.rm_lr.unwrap_or(scenario.rm_lr),
        };
        c.parallel = self.parallel.unwrap_or(c.parallel);
        c.validate()?;
        Ok(c)
    }

    fn from_config(c: &ExperimentConfig) -> Self {
        Self {
            num_prompts: c.space.num_prompts(),
            responses_per_prompt: c.space.responses_per_prompt(),
            seed: Some(c.master_seed),
            iterations: Some(c.iterations),
            rho: Some(c.rho),
            strategy: Some(c.strategy),
            loss: Some(c.loss.kind),
            beta1: Some(c.loss.beta1),
            beta2: Some(c.loss.beta2),
            temperature: Some(c.generation.temperature),
            top_p: Some(c.generation.top_p),
            inner_steps: Some(c.inner_steps),
            lr: Some(c.lr),
            optimizer: Some(c.optimizer),
            reward_source: Some(c.reward_source),
            cost_gen: Some(c.cost.f_gen),
            cost_reward: Some(c.cost.f_reward),
            cost_train: Some(c.cost.f_train),
            scenario_seed: c.scenario.seed,
            reward_csv: c.scenario.reward_csv.clone(),
            reward_scale: Some(c.scenario.reward_scale),
            init_logit_scale: Some(c.scenario.init_logit_scale),
            rm_comparisons_per_prompt: Some(c.scenario.rm_comparisons_per_prompt),
            rm_steps: Some(c.scenario.rm_steps),
            rm_lr: Some(c.scenario.rm_lr),
            parallel: Some(c.parallel),
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let file: ConfigFile = serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    file.into_config().map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Writes every key explicitly, so the text pins the config even if
/// defaults change later.
pub fn to_config_string(config: &ExperimentConfig) -> Result<String> {
    serde_yaml::to_string(&ConfigFile::from_config(config))
        .map_err(|e| Error::Config(e.to_string()))
}
