//! Experiment artifacts on disk: JSONL iteration logs, run manifests,
//! sweeps over ρ × strategy, and the analysis and plot tables derived from
//! finished logs.
//!
//! A run directory holds `manifest.json`, `records.jsonl` and, when asked
//! for, `records.csv`. Re-running into a finished directory is a no-op; a
//! directory whose log stops early is resumed from its last checkpoint.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_config_str, to_config_string};
use crate::efficiency::CostModel;
use crate::error::{domain, Error, Result};
use crate::eval::{judge_pairwise, reward_gain_attribution, win_score};
use crate::online::{run_experiment_with, ExperimentConfig, IterationRecord};
use crate::policy::PromptId;
use crate::rng;
use crate::scenario::Environment;
use crate::scheduler::SelectionStrategy;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "records.jsonl";
pub const RECORDS_CSV_FILE: &str = "records.csv";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Jsonl,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(domain(format!(
                "unknown format {other:?} (expected jsonl or csv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub version: String,
    pub master_seed: u64,
    /// The full config in the same text format `--config` accepts.
    pub config: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    /// Files in the run directory, relative to it.
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        parse_config_str(&self.config)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Log {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Reads a JSONL log. Errors carry the 1-based line number. Records must
/// be numbered `0, 1, 2, …` in order.
pub fn read_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let file = File::open(path).map_err(|e| Error::Log {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let err = |message: String| Error::Log {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IterationRecord =
            serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if record.iteration != records.len() {
            return Err(err(format!(
                "expected iteration {}, found {}",
                records.len(),
                record.iteration
            )));
        }
        records.push(record);
    }
    Ok(records)
}

fn append_record(path: &Path, record: &IterationRecord) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct RecordRow {
    iteration: usize,
    strategy: SelectionStrategy,
    mean_chosen_reward: f64,
    expected_reward: f64,
    final_loss: Option<f64>,
    fresh_count: usize,
    reused_count: usize,
    simulated_cost: f64,
    cumulative_cost: f64,
}

fn write_records_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut cumulative = 0.0;
    let rows = records.iter().map(|r| {
        cumulative += r.simulated_cost;
        RecordRow {
            iteration: r.iteration,
            strategy: r.strategy,
            mean_chosen_reward: r.mean_chosen_reward,
            expected_reward: r.expected_reward,
            final_loss: r.loss_trace.last().copied(),
            fresh_count: r.fresh_count,
            reused_count: r.reused_count,
            simulated_cost: r.simulated_cost,
            cumulative_cost: cumulative,
        }
    });
    write_rows(path, rows, OutputFormat::Csv)
}

fn write_rows<T, I>(path: &Path, rows: I, format: OutputFormat) -> Result<()>
where
    T: Serialize,
    I: IntoIterator<Item = T>,
{
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        OutputFormat::Jsonl => {
            let mut w = BufWriter::new(File::create(path)?);
            for row in rows {
                serde_json::to_writer(&mut w, &row)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub log: PathBuf,
    pub records: Vec<IterationRecord>,
    /// Iterations computed by this call; 0 when the run was already done.
    pub computed: usize,
}

/// Runs `config` into `dir`, resuming or skipping as the directory allows.
pub fn run_to_dir(
    config: &ExperimentConfig,
    dir: &Path,
    format: OutputFormat,
) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let config_text = to_config_string(config)?;
    let log = dir.join(LOG_FILE);

    let (mut manifest, mut records) = if dir.join(MANIFEST_FILE).exists() {
        let manifest = RunManifest::read(dir)?;
        if manifest.config != config_text {
            return Err(Error::Config(format!(
                "{} already holds a run with a different config",
                dir.display()
            )));
        }
        let records = if log.exists() {
            read_log(&log)?
        } else {
            Vec::new()
        };
        if records.len() > config.iterations {
            return Err(Error::Log {
                path: log,
                line: config.iterations + 1,
                message: format!("log has more than {} records", config.iterations),
            });
        }
        (manifest, records)
    } else {
        if log.exists() {
            return Err(Error::Config(format!(
                "{} has a log but no manifest",
                dir.display()
            )));
        }
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.master_seed,
            config: config_text,
            started_at: Utc::now(),
            finished_at: None,
            outputs: vec![LOG_FILE.into()],
        };
        manifest.write(dir)?;
        (manifest, Vec::new())
    };

    let done = records.len();
    if done < config.iterations {
        let env = Environment::build(
            config.space,
            &config.scenario,
            config.reward_source,
            config.master_seed,
        )?;
        let fresh = run_experiment_with(config, &env, records.last(), |r| append_record(&log, r))?;
        records.extend(fresh);
    } else if !log.exists() {
        File::create(&log)?;
    }

    let mut outputs = vec![PathBuf::from(LOG_FILE)];
    if format == OutputFormat::Csv {
        write_records_csv(&dir.join(RECORDS_CSV_FILE), &records)?;
        outputs.push(RECORDS_CSV_FILE.into());
    }
    let computed = records.len() - done;
    if computed > 0 || manifest.finished_at.is_none() || manifest.outputs != outputs {
        manifest.finished_at = Some(Utc::now());
        manifest.outputs = outputs;
        manifest.write(dir)?;
    }
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        log,
        records,
        computed,
    })
}

/// Directory name of one sweep cell, e.g. `optune_rho0.5`.
pub fn sweep_dir_name(rho: f64, strategy: SelectionStrategy) -> String {
    format!("{}_rho{rho}", strategy.as_str())
}

fn strategy_label(strategy: SelectionStrategy) -> u64 {
    strategy
        .as_str()
        .bytes()
        .fold(0u64, |acc, b| (acc << 8) | u64::from(b))
}

/// Config of one sweep cell. Every cell shares the environment of the base
/// seed and gets its own sampling seed.
pub fn sweep_cell(
    base: &ExperimentConfig,
    rho: f64,
    strategy: SelectionStrategy,
) -> ExperimentConfig {
    let mut config = base.clone();
    config.rho = rho;
    config.strategy = strategy;
    config.master_seed = rng::derive_seed(
        base.master_seed,
        &[rng::tag::SWEEP, rho.to_bits(), strategy_label(strategy)],
    );
    config.scenario.seed = Some(base.scenario.seed.unwrap_or(base.master_seed));
    config
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub rho: f64,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub dir: PathBuf,
}

pub fn sweep(
    base: &ExperimentConfig,
    rhos: &[f64],
    strategies: &[SelectionStrategy],
    out: &Path,
    format: OutputFormat,
    parallel: bool,
) -> Result<Vec<RunOutcome>> {
    if rhos.is_empty() || strategies.is_empty() {
        return Err(domain("a sweep needs at least one rho and one strategy"));
    }
    let cells: Vec<_> = rhos
        .iter()
        .flat_map(|&rho| strategies.iter().map(move |&s| (rho, s)))
        .map(|(rho, s)| (sweep_cell(base, rho, s), out.join(sweep_dir_name(rho, s))))
        .collect();
    for (config, _) in &cells {
        config.validate()?;
    }
    fs::create_dir_all(out)?;
    let index: Vec<_> = cells
        .iter()
        .map(|(c, dir)| SweepEntry {
            rho: c.rho,
            strategy: c.strategy,
            seed: c.master_seed,
            dir: dir.strip_prefix(out).unwrap_or(dir).to_path_buf(),
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    fs::write(out.join("sweep.json"), text)?;

    let run = |(config, dir): &(ExperimentConfig, PathBuf)| run_to_dir(config, dir, format);
    if parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    }
}

/// A finished log with the environment it was produced in.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub label: String,
    pub config: ExperimentConfig,
    pub env: Environment,
    pub records: Vec<IterationRecord>,
}

/// Loads a log, taking its config from `config` or from the sibling
/// manifest.
pub fn load_run(log: &Path, config: Option<&ExperimentConfig>) -> Result<LoadedRun> {
    let records = read_log(log)?;
    if records.is_empty() {
        return Err(Error::Log {
            path: log.to_path_buf(),
            line: 1,
            message: "log holds no records".into(),
        });
    }
    let dir = log.parent().unwrap_or(Path::new("."));
    let config = match config {
        Some(c) => c.clone(),
        None => RunManifest::read(dir)
            .and_then(|m| m.experiment_config())
            .map_err(|e| {
                Error::Config(format!(
                    "cannot recover the config of {}: {e}",
                    log.display()
                ))
            })?,
    };
    let env = Environment::build(
        config.space,
        &config.scenario,
        config.reward_source,
        config.master_seed,
    )?;
    if records[0].checkpoint.policy.len() != config.space.num_prompts() {
        return Err(Error::Log {
            path: log.to_path_buf(),
            line: 1,
            message: "records do not match the config's prompt space".into(),
        });
    }
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| log.display().to_string());
    Ok(LoadedRun {
        label,
        config,
        env,
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyzeOptions {
    pub format: OutputFormat,
    pub tie_epsilon: f64,
    pub judge_seed: u64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            format: OutputFormat::Csv,
            tie_epsilon: 0.0,
            judge_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinScoreRow {
    pub run: String,
    pub rho: f64,
    pub strategy: SelectionStrategy,
    pub iteration: usize,
    pub cumulative_cost: f64,
    pub n_win: usize,
    pub n_lose: usize,
    pub n: usize,
    pub win_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadToHeadRow {
    pub run: String,
    pub baseline: String,
    pub n_win: usize,
    pub n_lose: usize,
    pub n: usize,
    pub win_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub run: String,
    pub iteration: usize,
    pub total_gain: f64,
    pub bottom_half_gain: f64,
    pub top_half_gain: f64,
    pub bottom_half_share: Option<f64>,
    pub top_half_share: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub rho: f64,
    pub iteration_cost: f64,
    pub speedup: f64,
    pub generation_savings: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub win_scores: Vec<WinScoreRow>,
    pub head_to_head: Vec<HeadToHeadRow>,
    pub attribution: Vec<AttributionRow>,
    pub speedup: Vec<SpeedupRow>,
}

fn all_prompts(run: &LoadedRun) -> Vec<PromptId> {
    (0..run.config.space.num_prompts()).collect()
}

/// Win score of every iteration's policy against the initial policy.
pub fn win_scores(run: &LoadedRun, opts: &AnalyzeOptions) -> Result<Vec<WinScoreRow>> {
    let prompts = all_prompts(run);
    let mut cumulative = 0.0;
    run.records
        .iter()
        .map(|r| {
            cumulative += r.simulated_cost;
            let outcome = judge_pairwise(
                &r.checkpoint.policy()?,
                &run.env.initial_policy,
                &run.env.oracle,
                &prompts,
                opts.tie_epsilon,
                &run.config.generation,
                opts.judge_seed,
            )?;
            Ok(WinScoreRow {
                run: run.label.clone(),
                rho: run.config.rho,
                strategy: run.config.strategy,
                iteration: r.iteration,
                cumulative_cost: cumulative,
                n_win: outcome.n_win,
                n_lose: outcome.n_lose,
                n: outcome.n,
                win_score: win_score(&outcome)?,
            })
        })
        .collect()
}

/// Attribution for every iteration after the first.
pub fn attribution(run: &LoadedRun) -> Result<Vec<AttributionRow>> {
    run.records
        .windows(2)
        .map(|w| {
            let report = reward_gain_attribution(&w[0], &w[1], &w[0].checkpoint.ranked_prompts)?;
            Ok(AttributionRow {
                run: run.label.clone(),
                iteration: w[1].iteration,
                total_gain: report.total_gain,
                bottom_half_gain: report.bottom_half_gain,
                top_half_gain: report.top_half_gain,
                bottom_half_share: report.bottom_half_share,
                top_half_share: report.top_half_share,
            })
        })
        .collect()
}

pub fn speedup_table(cost: &CostModel, rhos: &[f64]) -> Result<Vec<SpeedupRow>> {
    rhos.iter()
        .map(|&rho| {
            Ok(SpeedupRow {
                rho,
                iteration_cost: cost.iteration_cost(rho)?,
                speedup: cost.speedup(rho)?,
                generation_savings: cost.generation_savings(rho)?,
            })
        })
        .collect()
}

pub fn speedup_csv(cost: &CostModel, rhos: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in speedup_table(cost, rhos)? {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Scores every run; head-to-head rows compare each run's final policy to
/// the first run's, judged under the first run's oracle.
pub fn analyze_runs(runs: &[LoadedRun], opts: &AnalyzeOptions) -> Result<Analysis> {
    let Some(baseline) = runs.first() else {
        return Err(domain("analysis needs at least one log"));
    };
    let base_policy = baseline
        .records
        .last()
        .expect("loaded runs are nonempty")
        .checkpoint
        .policy()?;
    let prompts = all_prompts(baseline);
    let mut analysis = Analysis {
        win_scores: Vec::new(),
        head_to_head: Vec::new(),
        attribution: Vec::new(),
        speedup: Vec::new(),
    };
    let mut rhos: Vec<f64> = Vec::new();
    for run in runs {
        analysis.win_scores.extend(win_scores(run, opts)?);
        analysis.attribution.extend(attribution(run)?);
        let policy = run
            .records
            .last()
            .expect("loaded runs are nonempty")
            .checkpoint
            .policy()?;
        let outcome = judge_pairwise(
            &policy,
            &base_policy,
            &baseline.env.oracle,
            &prompts,
            opts.tie_epsilon,
            &baseline.config.generation,
            opts.judge_seed,
        )?;
        analysis.head_to_head.push(HeadToHeadRow {
            run: run.label.clone(),
            baseline: baseline.label.clone(),
            n_win: outcome.n_win,
            n_lose: outcome.n_lose,
            n: outcome.n,
            win_score: win_score(&outcome)?,
        });
        if !rhos.contains(&run.config.rho) {
            rhos.push(run.config.rho);
        }
    }
    rhos.sort_by(f64::total_cmp);
    analysis.speedup = speedup_table(&baseline.config.cost, &rhos)?;
    Ok(analysis)
}

fn extension(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Jsonl => "jsonl",
    }
}

/// Writes `winscore`, `head_to_head`, `attribution` and `speedup` tables
/// into `out` and returns their paths.
pub fn analyze(
    logs: &[PathBuf],
    config: Option<&ExperimentConfig>,
    out: &Path,
    opts: &AnalyzeOptions,
) -> Result<Vec<PathBuf>> {
    let runs = logs
        .iter()
        .map(|log| load_run(log, config))
        .collect::<Result<Vec<_>>>()?;
    let analysis = analyze_runs(&runs, opts)?;
    fs::create_dir_all(out)?;
    let ext = extension(opts.format);
    let path = |name: &str| out.join(format!("{name}.{ext}"));
    let written = vec![
        path("winscore"),
        path("head_to_head"),
        path("attribution"),
        path("speedup"),
    ];
    write_rows(&written[0], &analysis.win_scores, opts.format)?;
    write_rows(&written[1], &analysis.head_to_head, opts.format)?;
    write_rows(&written[2], &analysis.attribution, opts.format)?;
    write_rows(&written[3], &analysis.speedup, opts.format)?;
    Ok(written)
}

#[derive(Clone, Debug, Serialize)]
struct ByIterationRow<'a> {
    run: &'a str,
    rho: f64,
    strategy: SelectionStrategy,
    iteration: usize,
    win_score: f64,
}

#[derive(Clone, Debug, Serialize)]
struct ByCostRow<'a> {
    run: &'a str,
    rho: f64,
    strategy: SelectionStrategy,
    cumulative_cost: f64,
    win_score: f64,
}

#[derive(Clone, Debug, Serialize)]
struct SplitRow<'a> {
    run: &'a str,
    iteration: usize,
    bottom_half_share: Option<f64>,
    top_half_share: Option<f64>,
}

/// Per-figure CSVs: win score against iteration, win score against
/// cumulative simulated cost, and the bottom/top reward-gain split.
pub fn plot_data(
    logs: &[PathBuf],
    config: Option<&ExperimentConfig>,
    out: &Path,
    opts: &AnalyzeOptions,
) -> Result<Vec<PathBuf>> {
    let runs = logs
        .iter()
        .map(|log| load_run(log, config))
        .collect::<Result<Vec<_>>>()?;
    if runs.is_empty() {
        return Err(domain("plot data needs at least one log"));
    }
    let mut scores = Vec::new();
    let mut splits = Vec::new();
    for run in &runs {
        scores.extend(win_scores(run, opts)?);
        splits.extend(attribution(run)?);
    }
    fs::create_dir_all(out)?;
    let paths = vec![
        out.join("winscore_by_iteration.csv"),
        out.join("winscore_by_cost.csv"),
        out.join("reward_gain_split.csv"),
    ];
    write_rows(
        &paths[0],
        scores.iter().map(|s| ByIterationRow {
            run: &s.run,
            rho: s.rho,
            strategy: s.strategy,
            iteration: s.iteration,
            win_score: s.win_score,
        }),
        OutputFormat::Csv,
    )?;
    write_rows(
        &paths[1],
        scores.iter().map(|s| ByCostRow {
            run: &s.run,
            rho: s.rho,
            strategy: s.strategy,
            cumulative_cost: s.cumulative_cost,
            win_score: s.win_score,
        }),
        OutputFormat::Csv,
    )?;
    write_rows(
        &paths[2],
        splits.iter().map(|a| SplitRow {
            run: &a.run,
            iteration: a.iteration,
            bottom_half_share: a.bottom_half_share,
            top_half_share: a.top_half_share,
        }),
        OutputFormat::Csv,
    )?;
    Ok(paths)
}
