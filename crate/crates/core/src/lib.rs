//! Tabular laboratory for online preference tuning.
//!
//! Policies are logit tables over a finite prompt × response grid, so
//! expectations, KL terms and closed-form optima are computed exactly. The
//! online loop regenerates responses for a reward-ranked fraction of
//! prompts each iteration, reuses cached pairs for the rest, and trains with
//! DPO or its reward-gap-weighted variant.

pub mod config;
pub mod efficiency;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod online;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod scheduler;

pub use config::{parse_config, parse_config_str, to_config_string};
pub use efficiency::CostModel;
pub use error::{Error, Result};
pub use eval::{judge_pairwise, rl_objective, win_score, AttributionReport, JudgeOutcome, Verdict};
pub use losses::{LossConfig, LossKind, OptimizerKind};
pub use online::{run_experiment, run_iteration, ExperimentConfig, IterationRecord};
pub use policy::{GenerationConfig, PolicyParams, PromptId, PromptSpace, ResponseId};
pub use reward::{BtRewardModel, OracleReward, RewardScorer, RewardSource};
pub use runner::{OutputFormat, RunManifest};
pub use scenario::{Environment, RewardSourceKind, ScenarioConfig};
pub use scheduler::{PairBatch, PreferencePair, ScheduleState, SelectionStrategy};
