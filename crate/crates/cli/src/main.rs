use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use regen_core::runner::{self, AnalyzeOptions, LOG_FILE};
use regen_core::{parse_config, CostModel, ExperimentConfig, OutputFormat, SelectionStrategy};

/// Online preference-tuning experiments on tabular policies.
///
/// Every flag can also be set through an environment variable named
/// `REGEN_<FLAG>`, e.g. `REGEN_SEED=3`.
#[derive(Debug, Parser)]
#[command(name = "regen", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file (flat `key: value` YAML).
    #[arg(long, global = true, env = "REGEN_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true, env = "REGEN_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "REGEN_OUT")]
    out: Option<PathBuf>,
    /// Comma-separated prompt selection ratios.
    #[arg(long, global = true, env = "REGEN_RHO", value_delimiter = ',')]
    rho: Vec<f64>,
    /// Comma-separated selection strategies (optune, random, full).
    #[arg(long, global = true, env = "REGEN_STRATEGY", value_delimiter = ',')]
    strategy: Vec<SelectionStrategy>,
    /// jsonl or csv.
    #[arg(long, global = true, env = "REGEN_FORMAT")]
    format: Option<OutputFormat>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment into `--out`.
    Run,
    /// Run every (rho, strategy) combination, one directory each.
    Sweep {
        /// Run the cells one after another.
        #[arg(long, env = "REGEN_SEQUENTIAL")]
        sequential: bool,
    },
    /// Win scores, head-to-head scores, reward-gain attribution and speedup.
    Analyze {
        /// Logs or run directories; the first one is the head-to-head baseline.
        logs: Vec<PathBuf>,
        /// Only print the rho → cost/speedup table.
        #[arg(long)]
        speedup: bool,
        #[arg(long, env = "REGEN_TIE_EPSILON", default_value_t = 0.0)]
        tie_epsilon: f64,
        #[arg(long, env = "REGEN_JUDGE_SEED", default_value_t = 0)]
        judge_seed: u64,
    },
    /// Tables behind the win-score and reward-gain plots.
    PlotData {
        /// Logs or run directories.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, env = "REGEN_JUDGE_SEED", default_value_t = 0)]
        judge_seed: u64,
    },
}

const DEFAULT_RHOS: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_deref()
        .context("--config is required for this command")?;
    let mut config = parse_config(path)?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    Ok(config)
}

fn optional_config(common: &Common) -> Result<Option<ExperimentConfig>> {
    common
        .config
        .as_ref()
        .map(|_| load_config(common))
        .transpose()
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn log_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(LOG_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Run => {
            let mut config = load_config(common)?;
            match common.rho.as_slice() {
                [] => {}
                [rho] => config.rho = *rho,
                _ => bail!("run takes a single --rho; use sweep for several"),
            }
            match common.strategy.as_slice() {
                [] => {}
                [s] => config.strategy = *s,
                _ => bail!("run takes a single --strategy; use sweep for several"),
            }
            let out = out_dir(common, "run");
            let outcome = runner::run_to_dir(&config, &out, common.format.unwrap_or_default())?;
            let last = outcome.records.last().context("run produced no records")?;
            if outcome.computed == 0 {
                println!("{} already complete", out.display());
            }
            println!(
                "{}: {} iterations, final expected reward {:.6}",
                outcome.log.display(),
                outcome.records.len(),
                last.expected_reward
            );
        }
        Command::Sweep { sequential } => {
            let config = load_config(common)?;
            let rhos = if common.rho.is_empty() {
                DEFAULT_RHOS.to_vec()
            } else {
                common.rho.clone()
            };
            let strategies = if common.strategy.is_empty() {
                vec![SelectionStrategy::LowestReward, SelectionStrategy::Random]
            } else {
                common.strategy.clone()
            };
            let out = out_dir(common, "sweep");
            let runs = runner::sweep(
                &config,
                &rhos,
                &strategies,
                &out,
                common.format.unwrap_or_default(),
                !sequential,
            )?;
            for r in runs {
                let last = r.records.last().context("run produced no records")?;
                println!("{}\t{:.6}", r.log.display(), last.expected_reward);
            }
        }
        Command::Analyze {
            logs,
            speedup,
            tie_epsilon,
            judge_seed,
        } => {
            if speedup {
                let cost = optional_config(common)?.map_or_else(CostModel::default, |c| c.cost);
                let rhos = if common.rho.is_empty() {
                    DEFAULT_RHOS.to_vec()
                } else {
                    common.rho.clone()
                };
                print!("{}", runner::speedup_csv(&cost, &rhos)?);
                return Ok(());
            }
            if logs.is_empty() {
                bail!("analyze needs at least one log (or --speedup)");
            }
            let logs: Vec<_> = logs.iter().map(|p| log_path(p)).collect();
            let opts = AnalyzeOptions {
                format: common.format.unwrap_or(OutputFormat::Csv),
                tie_epsilon,
                judge_seed,
            };
            let config = optional_config(common)?;
            for f in runner::analyze(&logs, config.as_ref(), &out_dir(common, "analysis"), &opts)? {
                println!("{}", f.display());
            }
        }
        Command::PlotData { logs, judge_seed } => {
            let logs: Vec<_> = logs.iter().map(|p| log_path(p)).collect();
            let opts = AnalyzeOptions {
                judge_seed,
                ..AnalyzeOptions::default()
            };
            let config = optional_config(common)?;
            for f in runner::plot_data(&logs, config.as_ref(), &out_dir(common, "plots"), &opts)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
