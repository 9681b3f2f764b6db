//! Reward-ranked prompt regeneration.
//!
//! Each iteration only `⌈ρ·|P|⌉` prompts get fresh responses. Under the
//! reward-ranked strategy these are the prompts whose cached preferred
//! response currently has the lowest reward; every other prompt reuses its
//! cached pair from an earlier iteration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::policy::{PromptId, ResponseId};

/// One training example: a prompt with its preferred and rejected response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: PromptId,
    pub chosen: ResponseId,
    pub rejected: ResponseId,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    pub origin_iteration: usize,
    pub fresh: bool,
}

impl PreferencePair {
    /// Both sampled responses were identical.
    pub fn is_degenerate(&self) -> bool {
        self.chosen == self.rejected
    }

    pub fn reward_gap(&self) -> f64 {
        self.reward_chosen - self.reward_rejected
    }
}

/// A batch of preference pairs, one per prompt in the online loop.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairBatch(pub Vec<PreferencePair>);

impl std::ops::Deref for PairBatch {
    type Target = [PreferencePair];

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl From<Vec<PreferencePair>> for PairBatch {
    fn from(pairs: Vec<PreferencePair>) -> Self {
        Self(pairs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionStrategy {
    /// Regenerate the lowest-ranked prompts.
    #[serde(rename = "optune", alias = "lowest-reward")]
    LowestReward,
    /// Regenerate a uniformly random subset of the same size.
    #[serde(rename = "random")]
    Random,
    /// Regenerate everything, whatever ρ says.
    #[serde(rename = "full")]
    Full,
}

impl SelectionStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LowestReward => "optune",
            Self::Random => "random",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "optune" | "lowest-reward" => Ok(Self::LowestReward),
            "random" => Ok(Self::Random),
            "full" => Ok(Self::Full),
            other => Err(domain(format!(
                "unknown strategy {other:?} (expected optune, random or full)"
            ))),
        }
    }
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(domain(format!("rho must lie in (0, 1], got {rho}")));
    }
    Ok(())
}

/// `⌈ρ·n⌉`. A product within rounding distance of an integer counts as
/// that integer, so `0.7 × 10` is 7 and not 8.
pub fn selection_count(rho: f64, num_prompts: usize) -> Result<usize> {
    check_rho(rho)?;
    if num_prompts == 0 {
        return Err(domain("prompt set is empty"));
    }
    let raw = rho * num_prompts as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    Ok((count as usize).clamp(1, num_prompts))
}

/// Persistent scheduler state carried between iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    ranked_prompts: Vec<PromptId>,
    cache: BTreeMap<PromptId, PreferencePair>,
    rho: f64,
    iteration: usize,
}

impl ScheduleState {
    /// Fresh state: identity ranking, empty cache.
    pub fn new(num_prompts: usize, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        if num_prompts == 0 {
            return Err(domain("prompt set is empty"));
        }
        Ok(Self {
            ranked_prompts: (0..num_prompts).collect(),
            cache: BTreeMap::new(),
            rho,
            iteration: 0,
        })
    }

    /// Rebuilds a state from persisted parts, checking its invariants.
    pub fn from_parts(
        ranked_prompts: Vec<PromptId>,
        cache: Vec<PreferencePair>,
        rho: f64,
        iteration: usize,
    ) -> Result<Self> {
        check_rho(rho)?;
        let n = ranked_prompts.len();
        let mut seen = vec![false; n];
        for &x in &ranked_prompts {
            if x >= n || std::mem::replace(&mut seen[x], true) {
                return Err(Error::StateCorruption(
                    "ranked prompts are not a permutation".into(),
                ));
            }
        }
        let mut map = BTreeMap::new();
        for pair in cache {
            if pair.prompt >= n {
                return Err(Error::StateCorruption(format!(
                    "cached pair for unknown prompt {}",
                    pair.prompt
                )));
            }
            if map.insert(pair.prompt, pair).is_some() {
                return Err(Error::StateCorruption("duplicate cached prompt".into()));
            }
        }
        if iteration > 0 && map.len() != n {
            return Err(Error::StateCorruption(format!(
                "cache covers {} of {n} prompts after iteration 0",
                map.len()
            )));
        }
        Ok(Self {
            ranked_prompts,
            cache: map,
            rho,
            iteration,
        })
    }

    pub fn ranked_prompts(&self) -> &[PromptId] {
        &self.ranked_prompts
    }

    pub fn cache(&self) -> &BTreeMap<PromptId, PreferencePair> {
        &self.cache
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn num_prompts(&self) -> usize {
        self.ranked_prompts.len()
    }

    /// Installs the assembled batch as the new cache and the given ranking
    /// for the next iteration.
    pub fn advance(&mut self, batch: &PairBatch, ranking: Vec<PromptId>) -> Result<()> {
        if ranking.len() != self.num_prompts() || batch.len() != self.num_prompts() {
            return Err(Error::StateCorruption(
                "batch or ranking does not cover the prompt set".into(),
            ));
        }
        self.cache = batch.iter().map(|p| (p.prompt, p.clone())).collect();
        self.ranked_prompts = ranking;
        self.iteration += 1;
        Ok(())
    }
}

/// Prompts to regenerate this iteration, in ranked order.
pub fn select_prompts<R: Rng + ?Sized>(
    state: &ScheduleState,
    strategy: SelectionStrategy,
    rng: &mut R,
) -> Result<Vec<PromptId>> {
    let ranked = state.ranked_prompts();
    if ranked.is_empty() {
        return Err(domain("ranked prompt list is empty"));
    }
    match strategy {
        SelectionStrategy::Full => Ok(ranked.to_vec()),
        SelectionStrategy::LowestReward => {
            let n = selection_count(state.rho(), ranked.len())?;
            Ok(ranked[..n].to_vec())
        }
        SelectionStrategy::Random => {
            let n = selection_count(state.rho(), ranked.len())?;
            let mut picked = vec![false; ranked.len()];
            for i in rand::seq::index::sample(rng, ranked.len(), n) {
                picked[i] = true;
            }
            Ok(ranked
                .iter()
                .zip(&picked)
                .filter_map(|(&x, &p)| p.then_some(x))
                .collect())
        }
    }
}

/// One pair per prompt, ordered by prompt id: fresh pairs where the prompt
/// was regenerated, cached pairs (marked not fresh) everywhere else.
pub fn assemble_training_set(
    state: &ScheduleState,
    fresh_pairs: &BTreeMap<PromptId, PreferencePair>,
) -> Result<PairBatch> {
    let n = state.num_prompts();
    if let Some(&x) = fresh_pairs.keys().find(|&&x| x >= n) {
        return Err(domain(format!("fresh pair for unknown prompt {x}")));
    }
    (0..n)
        .map(|x| {
            if let Some(pair) = fresh_pairs.get(&x) {
                Ok(pair.clone())
            } else if let Some(cached) = state.cache().get(&x) {
                Ok(PreferencePair {
                    fresh: false,
                    ..cached.clone()
                })
            } else {
                Err(Error::StateCorruption(format!(
                    "prompt {x} was not regenerated and has no cached pair"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(PairBatch)
}

/// Prompt ids ordered by ascending chosen reward, ties by id.
pub fn rank_prompts(batch: &[PreferencePair]) -> Result<Vec<PromptId>> {
    let mut ids: Vec<PromptId> = batch.iter().map(|p| p.prompt).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(domain(format!(
            "prompt {} appears more than once in batch",
            w[0]
        )));
    }
    let mut keyed: Vec<(f64, PromptId)> =
        batch.iter().map(|p| (p.reward_chosen, p.prompt)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, x)| x).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn pair(prompt: PromptId, reward: f64, origin: usize) -> PreferencePair {
        PreferencePair {
            prompt,
            chosen: 1,
            rejected: 0,
            reward_chosen: reward,
            reward_rejected: reward - 1.0,
            origin_iteration: origin,
            fresh: true,
        }
    }

    fn state_with_rewards(rewards: &[f64], rho: f64) -> ScheduleState {
        let batch = PairBatch(
            rewards
                .iter()
                .enumerate()
                .map(|(x, &r)| pair(x, r, 0))
                .collect(),
        );
        let mut state = ScheduleState::new(rewards.len(), rho).unwrap();
        let ranking = rank_prompts(&batch).unwrap();
        state.advance(&batch, ranking).unwrap();
        state
    }

    #[test]
    fn selection_count_examples() {
        assert_eq!(selection_count(0.5, 48_000).unwrap(), 24_000);
        assert_eq!(selection_count(0.3, 7).unwrap(), 3);
        assert_eq!(selection_count(0.7, 10).unwrap(), 7);
        assert_eq!(selection_count(0.1, 10).unwrap(), 1);
        for n in [1, 2, 9, 64, 1000] {
            assert_eq!(selection_count(1.0, n).unwrap(), n);
        }
        assert!(selection_count(1e-9, 3).unwrap() == 1);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            let err = selection_count(bad, 4).unwrap_err();
            assert!(err.to_string().contains("rho must lie in (0, 1]"));
        }
    }

    #[test]
    fn select_examples() {
        // chosen rewards 0.5, 2.0, 1.0 → ranked [p0, p2, p1]
        let state = state_with_rewards(&[0.5, 2.0, 1.0], 2.0 / 3.0);
        assert_eq!(state.ranked_prompts(), &[0, 2, 1]);
        let mut r = rng::stream(0, &[]);
        assert_eq!(
            select_prompts(&state, SelectionStrategy::LowestReward, &mut r).unwrap(),
            vec![0, 2]
        );
        assert_eq!(
            select_prompts(&state, SelectionStrategy::Full, &mut r).unwrap(),
            vec![0, 2, 1]
        );
        let state = state_with_rewards(&[0.1, 0.9, 0.4, 0.3, 0.8, 0.2, 0.7, 0.6], 0.5);
        let draw = |seed| {
            select_prompts(
                &state,
                SelectionStrategy::Random,
                &mut rng::stream(seed, &[]),
            )
            .unwrap()
        };
        assert_eq!(draw(3), draw(3));
        assert_eq!(draw(3).len(), 4);
    }

    #[test]
    fn assembly_partitions_fresh_and_cached() {
        let state = state_with_rewards(&[0.3; 10], 0.5);
        let mut r = rng::stream(1, &[]);
        let selected = select_prompts(&state, SelectionStrategy::Random, &mut r).unwrap();
        let fresh: BTreeMap<_, _> = selected.iter().map(|&x| (x, pair(x, 5.0, 1))).collect();
        let batch = assemble_training_set(&state, &fresh).unwrap();
        assert_eq!(batch.len(), 10);
        assert_eq!(batch.iter().filter(|p| p.fresh).count(), 5);
        for p in batch.iter() {
            assert_eq!(p.fresh, selected.contains(&p.prompt));
            assert_eq!(p.origin_iteration, if p.fresh { 1 } else { 0 });
        }
        assert_eq!(
            batch.iter().map(|p| p.prompt).collect::<Vec<_>>(),
            (0..10).collect::<Vec<_>>()
        );
    }

    #[test]
    fn assembly_without_fresh_pairs_replays_the_cache() {
        let state = state_with_rewards(&[0.3, 0.1, 0.7], 0.5);
        let batch = assemble_training_set(&state, &BTreeMap::new()).unwrap();
        let cached: Vec<_> = state
            .cache()
            .values()
            .map(|p| PreferencePair {
                fresh: false,
                ..p.clone()
            })
            .collect();
        assert_eq!(batch.0, cached);
    }

    #[test]
    fn first_iteration_needs_every_prompt_fresh() {
        let state = ScheduleState::new(4, 0.5).unwrap();
        let fresh: BTreeMap<_, _> = (0..4).map(|x| (x, pair(x, 1.0, 0))).collect();
        let batch = assemble_training_set(&state, &fresh).unwrap();
        assert!(batch.iter().all(|p| p.fresh));
        let partial: BTreeMap<_, _> = (0..2).map(|x| (x, pair(x, 1.0, 0))).collect();
        assert!(matches!(
            assemble_training_set(&state, &partial),
            Err(Error::StateCorruption(_))
        ));
        let stray: BTreeMap<_, _> = [(9, pair(9, 1.0, 0))].into_iter().collect();
        assert!(assemble_training_set(&state, &stray).is_err());
    }

    #[test]
    fn ranking_examples() {
        let batch = vec![pair(0, 2.0, 0), pair(1, 0.5, 0), pair(2, 1.0, 0)];
        assert_eq!(rank_prompts(&batch).unwrap(), vec![1, 2, 0]);
        let flat: Vec<_> = (0..5).rev().map(|x| pair(x, 0.0, 0)).collect();
        assert_eq!(rank_prompts(&flat).unwrap(), vec![0, 1, 2, 3, 4]);
        let dup = vec![pair(0, 1.0, 0), pair(0, 2.0, 0)];
        assert!(rank_prompts(&dup).is_err());
    }

    #[test]
    fn from_parts_checks_invariants() {
        assert!(ScheduleState::from_parts(vec![0, 0], vec![], 0.5, 0).is_err());
        assert!(ScheduleState::from_parts(vec![1, 0], vec![pair(0, 1.0, 0)], 0.5, 1).is_err());
        assert!(ScheduleState::from_parts(vec![1, 0], vec![], 0.0, 0).is_err());
        let ok =
            ScheduleState::from_parts(vec![1, 0], vec![pair(0, 1.0, 0), pair(1, 0.0, 0)], 0.5, 1);
        assert!(ok.is_ok());
    }

    #[test]
    fn strategy_names_parse() {
        for s in [
            SelectionStrategy::LowestReward,
            SelectionStrategy::Random,
            SelectionStrategy::Full,
        ] {
            assert_eq!(s.as_str().parse::<SelectionStrategy>().unwrap(), s);
        }
        assert!("greedy".parse::<SelectionStrategy>().is_err());
    }

    proptest! {
        #[test]
        fn ranking_matches_sort_oracle_and_ignores_input_order(
            rewards in proptest::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -3.0f64..3.0], 1..40),
            seed in any::<u64>(),
        ) {
            let batch: Vec<_> = rewards.iter().enumerate().map(|(x, &r)| pair(x, r, 0)).collect();
            // oracle: repeatedly extract the minimum (reward, id)
            let mut remaining: Vec<(f64, usize)> = rewards.iter().copied().zip(0..).collect();
            let mut expected = Vec::new();
            while !remaining.is_empty() {
                let (i, _) = remaining.iter().enumerate().fold((0, remaining[0]), |best, (i, &c)| {
                    if c.0 < best.1 .0 || (c.0 == best.1 .0 && c.1 < best.1 .1) { (i, c) } else { best }
                });
                expected.push(remaining.remove(i).1);
            }
            prop_assert_eq!(rank_prompts(&batch).unwrap(), expected.clone());
            let mut shuffled = batch.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng::stream(seed, &[]));
            prop_assert_eq!(rank_prompts(&shuffled).unwrap(), expected);
        }

        #[test]
        fn random_selection_is_a_subset_of_the_right_size(
            n in 1usize..60,
            k in 1u32..=1000,
            seed in any::<u64>(),
        ) {
            let state = ScheduleState::new(n, k as f64 / 1000.0).unwrap();
            let picked = select_prompts(&state, SelectionStrategy::Random, &mut rng::stream(seed, &[])).unwrap();
            let expected = (k as usize * n).div_ceil(1000);
            prop_assert_eq!(picked.len(), expected);
            let mut sorted = picked.clone();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), picked.len());
        }
    }
}
