//! The iterative online preference-tuning loop.
//!
//! Every iteration snapshots the current policy as the reference, picks the
//! prompts to regenerate, samples and scores two responses for each of them,
//! merges the fresh pairs with cached ones, runs a fixed number of gradient
//! steps on the preference loss and re-ranks prompts for the next round.
//! Iteration 0 always regenerates every prompt.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efficiency::CostModel;
use crate::error::{domain, Error, Result};
use crate::eval::expected_reward;
use crate::losses::{loss_gradient, preference_loss, LossConfig, Optimizer, OptimizerKind};
use crate::policy::{
    sample_response, GenerationConfig, PolicyParams, PromptId, PromptSpace, ResponseId,
};
use crate::reward::RewardScorer;
use crate::rng;
use crate::scenario::{Environment, RewardSourceKind, ScenarioConfig};
use crate::scheduler::{
    assemble_training_set, check_rho, rank_prompts, select_prompts, PairBatch, PreferencePair,
    ScheduleState, SelectionStrategy,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub space: PromptSpace,
    pub iterations: usize,
    pub rho: f64,
    pub strategy: SelectionStrategy,
    pub loss: LossConfig,
    pub generation: GenerationConfig,
    /// Gradient steps per iteration.
    pub inner_steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub master_seed: u64,
    pub reward_source: RewardSourceKind,
    pub scenario: ScenarioConfig,
    pub cost: CostModel,
    /// Sample prompts on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl ExperimentConfig {
    pub fn new(space: PromptSpace, master_seed: u64) -> Self {
        Self {
            space,
            iterations: 4,
            rho: 0.5,
            strategy: SelectionStrategy::LowestReward,
            loss: LossConfig::default(),
            generation: GenerationConfig::default(),
            inner_steps: 50,
            lr: 150.0,
            optimizer: OptimizerKind::Sgd,
            master_seed,
            reward_source: RewardSourceKind::Oracle,
            scenario: ScenarioConfig::default(),
            cost: CostModel::default(),
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(domain("iterations must be at least 1"));
        }
        if self.inner_steps < 1 {
            return Err(domain("inner_steps must be at least 1"));
        }
        check_rho(self.rho)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(domain("lr must be positive"));
        }
        self.loss.validate()?;
        self.generation.validate()?;
        self.scenario.validate()?;
        self.cost.validate()
    }

    /// Strategy in force at `iteration`; the first round regenerates all.
    pub fn strategy_at(&self, iteration: usize) -> SelectionStrategy {
        if iteration == 0 {
            SelectionStrategy::Full
        } else {
            self.strategy
        }
    }
}

/// Policy and scheduler state after an iteration; enough to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub policy: Vec<Vec<f64>>,
    pub ranked_prompts: Vec<PromptId>,
    pub cache: Vec<PreferencePair>,
}

impl Checkpoint {
    pub fn capture(policy: &PolicyParams, state: &ScheduleState) -> Self {
        Self {
            policy: policy.to_rows(),
            ranked_prompts: state.ranked_prompts().to_vec(),
            cache: state.cache().values().cloned().collect(),
        }
    }

    pub fn policy(&self) -> Result<PolicyParams> {
        PolicyParams::from_rows(&self.policy)
    }

    /// Scheduler state for the iteration after `completed`.
    pub fn state(&self, rho: f64, completed: usize) -> Result<ScheduleState> {
        ScheduleState::from_parts(
            self.ranked_prompts.clone(),
            self.cache.clone(),
            rho,
            completed + 1,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub strategy: SelectionStrategy,
    /// Chosen-response reward of each prompt's training pair, by prompt id.
    pub per_prompt_chosen_reward: Vec<f64>,
    pub mean_chosen_reward: f64,
    /// Exact oracle reward of the updated policy, averaged over prompts.
    pub expected_reward: f64,
    /// Loss before each inner step.
    pub loss_trace: Vec<f64>,
    pub fresh_count: usize,
    pub reused_count: usize,
    /// Cost relative to one full-regeneration iteration.
    pub simulated_cost: f64,
    /// Host timing; kept out of logs so they stay reproducible.
    #[serde(skip)]
    pub wall_time_ms: u64,
    pub checkpoint: Checkpoint,
}

pub struct IterationOutcome {
    pub state: ScheduleState,
    pub policy: PolicyParams,
    pub record: IterationRecord,
    pub training_set: PairBatch,
    /// Fingerprint of the reference policy after the inner loop finished.
    pub reference_fingerprint: u64,
}

/// Orders two scored samples: higher reward wins, ties go to the smaller
/// response id. Identical samples give a degenerate pair.
pub fn pair_from_samples(
    x: PromptId,
    y1: ResponseId,
    y2: ResponseId,
    r1: f64,
    r2: f64,
    iteration: usize,
) -> PreferencePair {
    let first_wins = r1 > r2 || (r1 == r2 && y1 <= y2);
    let ((chosen, reward_chosen), (rejected, reward_rejected)) = if first_wins {
        ((y1, r1), (y2, r2))
    } else {
        ((y2, r2), (y1, r1))
    };
    PreferencePair {
        prompt: x,
        chosen,
        rejected,
        reward_chosen,
        reward_rejected,
        origin_iteration: iteration,
        fresh: true,
    }
}

/// Samples two responses for `x` from the per-(iteration, prompt) stream
/// and labels them.
pub fn generate_pair<S: RewardScorer + ?Sized>(
    policy: &PolicyParams,
    x: PromptId,
    generation: &GenerationConfig,
    labeler: &S,
    master_seed: u64,
    iteration: usize,
) -> Result<PreferencePair> {
    let mut stream = rng::stream(master_seed, &[rng::tag::SAMPLE, iteration as u64, x as u64]);
    let y1 = sample_response(policy, x, generation, &mut stream)?;
    let y2 = sample_response(policy, x, generation, &mut stream)?;
    let (r1, r2) = (labeler.score(x, y1)?, labeler.score(x, y2)?);
    Ok(pair_from_samples(x, y1, y2, r1, r2, iteration))
}

fn generate_fresh(
    policy: &PolicyParams,
    prompts: &[PromptId],
    env: &Environment,
    config: &ExperimentConfig,
    iteration: usize,
) -> Result<BTreeMap<PromptId, PreferencePair>> {
    let one = |&x: &PromptId| {
        generate_pair(
            policy,
            x,
            &config.generation,
            &env.labeler,
            config.master_seed,
            iteration,
        )
        .map(|p| (x, p))
    };
    let pairs: Vec<(PromptId, PreferencePair)> = if config.parallel {
        prompts.par_iter().map(one).collect::<Result<_>>()?
    } else {
        prompts.iter().map(one).collect::<Result<_>>()?
    };
    Ok(pairs.into_iter().collect())
}

/// Runs `steps` optimizer steps on a fixed batch against a fixed reference.
/// Returns the trained policy and the loss before each step.
pub fn train_on_batch(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    config: &ExperimentConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    let mut optimizer = Optimizer::new(config.optimizer, config.lr)?;
    let mut current = policy.clone();
    let mut trace = Vec::with_capacity(config.inner_steps);
    for _ in 0..config.inner_steps {
        trace.push(preference_loss(&current, reference, batch, &config.loss)?);
        let grad = loss_gradient(&current, reference, batch, &config.loss)?;
        current = optimizer.step(&current, &grad)?;
    }
    Ok((current, trace))
}

pub fn run_iteration(
    state: &ScheduleState,
    policy: &PolicyParams,
    env: &Environment,
    config: &ExperimentConfig,
) -> Result<IterationOutcome> {
    let started = Instant::now();
    let iteration = state.iteration();
    let space = policy.space();
    if space != config.space || state.num_prompts() != space.num_prompts() {
        return Err(domain(
            "policy, state and config disagree on the prompt space",
        ));
    }

    let reference = policy.clone();
    let reference_print = reference.fingerprint();

    let strategy = config.strategy_at(iteration);
    let mut select_rng = rng::stream(config.master_seed, &[rng::tag::SELECT, iteration as u64]);
    let selected = select_prompts(state, strategy, &mut select_rng)?;
    let fresh = generate_fresh(&reference, &selected, env, config, iteration)?;
    let batch = assemble_training_set(state, &fresh)?;

    let (trained, loss_trace) = train_on_batch(policy, &reference, &batch, config)?;
    if reference.fingerprint() != reference_print {
        return Err(Error::StateCorruption(
            "reference policy changed during training".into(),
        ));
    }

    let ranking = rank_prompts(&batch)?;
    let mut next_state = state.clone();
    next_state.advance(&batch, ranking)?;

    let fresh_count = batch.iter().filter(|p| p.fresh).count();
    let n = space.num_prompts();
    let per_prompt_chosen_reward: Vec<f64> = batch.iter().map(|p| p.reward_chosen).collect();
    let mean_chosen_reward = per_prompt_chosen_reward.iter().sum::<f64>() / n as f64;
    let record = IterationRecord {
        iteration,
        strategy,
        mean_chosen_reward,
        per_prompt_chosen_reward,
        expected_reward: expected_reward(&trained, &env.oracle)?,
        loss_trace,
        fresh_count,
        reused_count: n - fresh_count,
        simulated_cost: config.cost.iteration_cost(fresh_count as f64 / n as f64)?,
        wall_time_ms: started.elapsed().as_millis() as u64,
        checkpoint: Checkpoint::capture(&trained, &next_state),
    };
    Ok(IterationOutcome {
        state: next_state,
        policy: trained,
        record,
        training_set: batch,
        reference_fingerprint: reference.fingerprint(),
    })
}

/// Runs iterations `resume.len()..config.iterations`, handing each record to
/// `sink` as soon as it is produced. `resume` holds records of iterations
/// already completed; the last one's checkpoint seeds the state.
pub fn run_experiment_with<F>(
    config: &ExperimentConfig,
    env: &Environment,
    resume: Option<&IterationRecord>,
    mut sink: F,
) -> Result<Vec<IterationRecord>>
where
    F: FnMut(&IterationRecord) -> Result<()>,
{
    config.validate()?;
    let (mut state, mut policy) = match resume {
        None => (
            ScheduleState::new(config.space.num_prompts(), config.rho)?,
            env.initial_policy.clone(),
        ),
        Some(last) => (
            last.checkpoint.state(config.rho, last.iteration)?,
            last.checkpoint.policy()?,
        ),
    };
    let mut records = Vec::new();
    while state.iteration() < config.iterations {
        let outcome = run_iteration(&state, &policy, env, config)?;
        sink(&outcome.record)?;
        records.push(outcome.record);
        state = outcome.state;
        policy = outcome.policy;
    }
    Ok(records)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<IterationRecord>> {
    config.validate()?;
    let env = Environment::build(
        config.space,
        &config.scenario,
        config.reward_source,
        config.master_seed,
    )?;
    run_experiment_with(config, &env, None, |_| Ok(()))
}
