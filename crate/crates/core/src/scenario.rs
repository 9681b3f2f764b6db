//! Synthetic environments: an oracle reward table, the initial policy and
//! the scorer used to label fresh responses.

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::policy::{PolicyParams, PromptSpace};
use crate::reward::{
    train_reward_model, BtRewardModel, OracleReward, PreferenceDataset, RewardScorer, RewardSource,
};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSourceKind {
    /// Label fresh pairs with the oracle table itself.
    Oracle,
    /// Label with a Bradley–Terry model fitted to oracle-labeled comparisons.
    Learned,
}

impl std::str::FromStr for RewardSourceKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "oracle" => Ok(Self::Oracle),
            "learned" => Ok(Self::Learned),
            other => Err(domain(format!(
                "unknown reward source {other:?} (expected oracle or learned)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Seed for the oracle table, initial policy and reward model data.
    /// Falls back to the experiment's master seed.
    pub seed: Option<u64>,
    /// Oracle rewards are drawn uniformly from `[0, reward_scale)`.
    pub reward_scale: f64,
    /// Initial logits are drawn from `N(0, init_logit_scale²)`.
    pub init_logit_scale: f64,
    /// Load the oracle from a CSV matrix instead of drawing it.
    pub reward_csv: Option<PathBuf>,
    pub rm_comparisons_per_prompt: usize,
    pub rm_steps: usize,
    pub rm_lr: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: None,
            reward_scale: 1.0,
            init_logit_scale: 1.0,
            reward_csv: None,
            rm_comparisons_per_prompt: 64,
            rm_steps: 500,
            rm_lr: 50.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(domain("reward_scale must be positive"));
        }
        if !(self.init_logit_scale >= 0.0 && self.init_logit_scale.is_finite()) {
            return Err(domain("init_logit_scale must be nonnegative"));
        }
        if !(self.rm_lr > 0.0 && self.rm_lr.is_finite()) {
            return Err(domain("rm_lr must be positive"));
        }
        if self.rm_comparisons_per_prompt == 0 {
            return Err(domain("rm_comparisons_per_prompt must be at least 1"));
        }
        Ok(())
    }
}

/// Everything an experiment needs besides its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub oracle: OracleReward,
    pub labeler: RewardSource,
    pub initial_policy: PolicyParams,
}

impl Environment {
    pub fn build(
        space: PromptSpace,
        scenario: &ScenarioConfig,
        source: RewardSourceKind,
        master_seed: u64,
    ) -> Result<Self> {
        scenario.validate()?;
        let seed = scenario.seed.unwrap_or(master_seed);
        let oracle = match &scenario.reward_csv {
            Some(path) => OracleReward::from_csv_path(path)?,
            None => random_oracle(space, scenario.reward_scale, seed)?,
        };
        if oracle.space() != space {
            return Err(domain(format!(
                "oracle table is {:?} but the prompt space is {:?}",
                oracle.space().shape(),
                space.shape()
            )));
        }
        let initial_policy = random_policy(space, scenario.init_logit_scale, seed)?;
        let labeler = match source {
            RewardSourceKind::Oracle => RewardSource::Oracle(oracle.clone()),
            RewardSourceKind::Learned => {
                RewardSource::Learned(fit_reward_model(&oracle, scenario, seed)?)
            }
        };
        Ok(Self {
            oracle,
            labeler,
            initial_policy,
        })
    }
}

pub fn random_oracle(space: PromptSpace, scale: f64, seed: u64) -> Result<OracleReward> {
    let mut r = rng::stream(seed, &[rng::tag::SCENARIO, 0]);
    OracleReward::new(Array2::from_shape_fn(space.shape(), |_| {
        r.random_range(0.0..scale)
    }))
}

pub fn random_policy(space: PromptSpace, scale: f64, seed: u64) -> Result<PolicyParams> {
    if scale == 0.0 {
        return Ok(PolicyParams::uniform(space));
    }
    let mut r = rng::stream(seed, &[rng::tag::SCENARIO, 1]);
    let normal = Normal::new(0.0, scale).map_err(|e| domain(e.to_string()))?;
    PolicyParams::new(Array2::from_shape_fn(space.shape(), |_| {
        normal.sample(&mut r)
    }))
}

/// Fits a reward model on uniformly drawn response pairs labeled by the
/// oracle.
pub fn fit_reward_model(
    oracle: &OracleReward,
    scenario: &ScenarioConfig,
    seed: u64,
) -> Result<BtRewardModel> {
    let space = oracle.space();
    let k = space.responses_per_prompt();
    let mut r = rng::stream(seed, &[rng::tag::REWARD_MODEL]);
    let candidates: Vec<_> = (0..space.num_prompts())
        .flat_map(|x| std::iter::repeat_n(x, scenario.rm_comparisons_per_prompt))
        .map(|x| {
            let a = r.random_range(0..k);
            let b = (a + r.random_range(1..k)) % k;
            (x, a, b)
        })
        .collect();
    let data = PreferenceDataset::label(oracle, &candidates)?;
    let fit = train_reward_model(
        &BtRewardModel::zeros(space),
        &data,
        scenario.rm_steps,
        scenario.rm_lr,
    )?;
    Ok(fit.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::pairwise_accuracy;

    #[test]
    fn environments_replay_from_seed() {
        let space = PromptSpace::new(5, 6).unwrap();
        let cfg = ScenarioConfig::default();
        let a = Environment::build(space, &cfg, RewardSourceKind::Oracle, 3).unwrap();
        let b = Environment::build(space, &cfg, RewardSourceKind::Oracle, 3).unwrap();
        let c = Environment::build(space, &cfg, RewardSourceKind::Oracle, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.oracle, c.oracle);
        assert!(a.oracle.table().iter().all(|r| (0.0..1.0).contains(r)));
    }

    #[test]
    fn explicit_scenario_seed_overrides_master_seed() {
        let space = PromptSpace::new(3, 4).unwrap();
        let cfg = ScenarioConfig {
            seed: Some(77),
            ..Default::default()
        };
        let a = Environment::build(space, &cfg, RewardSourceKind::Oracle, 1).unwrap();
        let b = Environment::build(space, &cfg, RewardSourceKind::Oracle, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learned_labeler_tracks_the_oracle() {
        let space = PromptSpace::new(6, 5).unwrap();
        let env = Environment::build(
            space,
            &ScenarioConfig::default(),
            RewardSourceKind::Learned,
            8,
        )
        .unwrap();
        let RewardSource::Learned(model) = &env.labeler else {
            panic!("expected a learned labeler");
        };
        assert!(model.is_trained());
        let all: Vec<_> = (0..6)
            .flat_map(|x| (0..5).flat_map(move |a| ((a + 1)..5).map(move |b| (x, a, b))))
            .collect();
        let data = PreferenceDataset::label(&env.oracle, &all).unwrap();
        assert!(pairwise_accuracy(model, &data).unwrap() > 0.8);
    }

    #[test]
    fn csv_oracle_must_match_space() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, "0.1,0.2\n0.3,0.4\n").unwrap();
        let cfg = ScenarioConfig {
            reward_csv: Some(path),
            ..Default::default()
        };
        assert!(Environment::build(
            PromptSpace::new(2, 2).unwrap(),
            &cfg,
            RewardSourceKind::Oracle,
            0
        )
        .is_ok());
        assert!(Environment::build(
            PromptSpace::new(2, 3).unwrap(),
            &cfg,
            RewardSourceKind::Oracle,
            0
        )
        .is_err());
    }
}
