//! Scenario sampling, paired Monte Carlo experiments, error metrics and
//! summary statistics.
//!
//! Every realization `r` draws its scenario and initial estimate from
//! substreams keyed by `r`, and every strategy replays the same measurement
//! noise, so strategies are compared on identical inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{ParamVector, SolverConfig, PARAMS_PER_NODE};
use crate::fisher::HorizonCostConfig;
use crate::model::{NodeGroundTruth, Position, Scenario};
use crate::planner::{rh_loop, PlannerConfig, PlannerError, RunSeeds, StepRecord, Strategy};
use crate::seeds::{stream, TAG_INIT, TAG_SCENARIO};

/// Package name and version, embedded in every output file.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("estimate has {estimate} nodes but the scenario has {truth}")]
    DimensionMismatch { estimate: usize, truth: usize },
    #[error("timing normalization needs a dp row with a positive mean")]
    NoDpBaseline,
    #[error("{missing} of {expected} runs are missing or incomplete under {dir}")]
    MissingRuns { missing: usize, expected: usize, dir: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run log {path}: {message}")]
    Malformed { path: String, message: String },
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("cannot start the worker pool: {0}")]
    Pool(String),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// Ranges from which scenarios are drawn, plus run length and master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// `[min, max]` of node x coordinates, meters.
    pub region_x: [f64; 2],
    pub region_y: [f64; 2],
    /// `[min, max]` of node heights, meters.
    pub height: [f64; 2],
    pub nodes: usize,
    pub gamma: [f64; 2],
    /// `[min, max]` of node gains, dB.
    pub k_gain: [f64; 2],
    /// `[min, max]` of noise variances, dB^2.
    pub noise_var: [f64; 2],
    pub agent_start: Position,
    /// Measurement rounds per run.
    pub steps: usize,
    pub seed: u64,
    /// Multiplier on the noise standard deviation; 0 gives exact readings.
    pub noise_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            region_x: [-100.0, 100.0],
            region_y: [-100.0, 100.0],
            height: [0.0, 10.0],
            nodes: 5,
            gamma: [5.0, 10.0],
            k_gain: [-30.0, -10.0],
            noise_var: [2.0, 5.0],
            agent_start: Position::new(100.0, -100.0, 50.0),
            steps: 30,
            seed: 1,
            noise_scale: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::InvalidConfig(msg));
        for (name, [lo, hi]) in [
            ("region_x", self.region_x),
            ("region_y", self.region_y),
            ("height", self.height),
            ("gamma", self.gamma),
            ("k_gain", self.k_gain),
            ("noise_var", self.noise_var),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("scenario.{name} must be a finite range with min <= max, got [{lo}, {hi}]"));
            }
        }
        if !(self.noise_var[0] > 0.0) {
            return bad(format!("scenario.noise_var must be positive, got [{}, {}]", self.noise_var[0], self.noise_var[1]));
        }
        if self.nodes < 1 {
            return bad("scenario.nodes must be at least 1".into());
        }
        if self.steps < 1 {
            return bad("scenario.steps must be at least 1".into());
        }
        if !self.agent_start.is_finite() {
            return bad("scenario.agent_start must be finite".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("scenario.noise_scale must be non-negative, got {}", self.noise_scale));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws node positions, path-loss parameters and noise variances
/// independently and uniformly from the configured ranges.
pub fn sample_scenario<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Scenario, HarnessError> {
    cfg.validate()?;
    let nodes = (0..cfg.nodes)
        .map(|_| {
            let position = Position::new(
                uniform(rng, cfg.region_x),
                uniform(rng, cfg.region_y),
                uniform(rng, cfg.height),
            );
            NodeGroundTruth {
                gamma: uniform(rng, cfg.gamma),
                k_gain: uniform(rng, cfg.k_gain),
                position,
                noise_var: uniform(rng, cfg.noise_var),
            }
        })
        .collect();
    Ok(Scenario { nodes, agent_start: cfg.agent_start, noise_scale: cfg.noise_scale })
}

/// Initial estimate: configured path-loss guesses and node positions drawn
/// uniformly over the region at the configured height.
pub fn initial_estimate<R: Rng + ?Sized>(cfg: &ScenarioConfig, solver: &SolverConfig, rng: &mut R) -> ParamVector {
    let mut values = Vec::with_capacity(cfg.nodes * PARAMS_PER_NODE);
    for _ in 0..cfg.nodes {
        let x = uniform(rng, cfg.region_x);
        let y = uniform(rng, cfg.region_y);
        values.extend([solver.init_gamma, solver.init_k, x, y, solver.init_height]);
    }
    ParamVector::from_vec(values).expect("whole nodes")
}

/// Scenario and initial estimate of realization `r`.
pub fn realization(
    cfg: &ScenarioConfig,
    solver: &SolverConfig,
    r: u64,
) -> Result<(Scenario, ParamVector), HarnessError> {
    let scenario = sample_scenario(cfg, &mut stream(cfg.seed, &[TAG_SCENARIO, r]))?;
    let theta = initial_estimate(cfg, solver, &mut stream(cfg.seed, &[TAG_INIT, r]));
    Ok((scenario, theta))
}

/// Per-node estimation error; the path-loss errors are estimate minus truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeError {
    pub location_err_m: f64,
    pub gamma_err: f64,
    pub k_err_db: f64,
}

pub fn localization_error(theta_hat: &ParamVector, truth: &[NodeGroundTruth]) -> Result<Vec<NodeError>, HarnessError> {
    if theta_hat.node_count() != truth.len() {
        return Err(HarnessError::DimensionMismatch { estimate: theta_hat.node_count(), truth: truth.len() });
    }
    Ok(truth
        .iter()
        .enumerate()
        .map(|(j, node)| NodeError {
            location_err_m: theta_hat.position(j).distance_to(&node.position),
            gamma_err: theta_hat.gamma(j) - node.gamma,
            k_err_db: theta_hat.k_gain(j) - node.k_gain,
        })
        .collect())
}

/// The compared controllers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyLabel {
    Random,
    Greedy,
    DpPruned,
    Dp,
    DpPenalty,
}

impl StrategyLabel {
    pub const ALL: [StrategyLabel; 5] = [
        StrategyLabel::Random,
        StrategyLabel::Greedy,
        StrategyLabel::DpPruned,
        StrategyLabel::Dp,
        StrategyLabel::DpPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyLabel::Random => "random",
            StrategyLabel::Greedy => "greedy",
            StrategyLabel::DpPruned => "dp_pruned",
            StrategyLabel::Dp => "dp",
            StrategyLabel::DpPenalty => "dp_penalty",
        }
    }

    /// `base` with the strategy and penalty switch set for this label.
    pub fn configure(self, base: &PlannerConfig) -> PlannerConfig {
        let (strategy, use_penalty) = match self {
            StrategyLabel::Random => (Strategy::Random, false),
            StrategyLabel::Greedy => (Strategy::Greedy, false),
            StrategyLabel::DpPruned => (Strategy::DpPruned, false),
            StrategyLabel::Dp => (Strategy::Dp, false),
            StrategyLabel::DpPenalty => (Strategy::Dp, true),
        };
        PlannerConfig { strategy, use_penalty, ..*base }
    }
}

impl FromStr for StrategyLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|l| l.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|l| l.name()).collect();
            format!("unknown strategy `{s}`, expected one of {}", names.join(", "))
        })
    }
}

/// Label of a planner configuration as used in logs.
pub fn strategy_label(planner: &PlannerConfig) -> String {
    if planner.use_penalty {
        format!("{}_penalty", planner.strategy.name())
    } else {
        planner.strategy.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub realizations: usize,
    pub strategies: Vec<StrategyLabel>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { realizations: 50, strategies: StrategyLabel::ALL.to_vec() }
    }
}

/// Everything that determines the results of a run or an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    pub scenario: ScenarioConfig,
    pub planner: PlannerConfig,
    pub cost: HorizonCostConfig,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
}

impl Setup {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario.validate()?;
        self.planner().validate()?;
        self.solver.validate().map_err(PlannerError::from)?;
        if self.experiment.realizations < 1 {
            return Err(HarnessError::InvalidConfig("experiment.realizations must be at least 1".into()));
        }
        if self.experiment.strategies.is_empty() {
            return Err(HarnessError::InvalidConfig("experiment.strategies must not be empty".into()));
        }
        let mut seen = self.experiment.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.experiment.strategies.len() {
            return Err(HarnessError::InvalidConfig("experiment.strategies lists a strategy twice".into()));
        }
        Ok(())
    }

    /// Planner configuration with the cost settings attached.
    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig { cost: self.cost, ..self.planner }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: String,
    pub strategy: String,
    pub realization: u64,
    pub config: Setup,
    pub truth: Vec<NodeGroundTruth>,
    pub agent_start: Position,
    pub theta_init: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFinal {
    pub final_position: Position,
    pub final_theta: ParamVector,
    /// `tr(F_N^-1)` after the last round; `None` when singular.
    pub final_fitness: Option<f64>,
    pub final_fitness_regularized: f64,
    pub errors: Vec<NodeError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub error: String,
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header(RunHeader),
    Step(StepRecord),
    Final(RunFinal),
    Failed(RunFailure),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunEnd {
    Final(RunFinal),
    Failed(RunFailure),
}

/// Complete record of one run: header, one line per step, then the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub steps: Vec<StepRecord>,
    pub end: RunEnd,
}

impl RunLog {
    pub fn completed(&self) -> Option<&RunFinal> {
        match &self.end {
            RunEnd::Final(f) => Some(f),
            RunEnd::Failed(_) => None,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |r: &LogRecord| {
            out.push_str(&serde_json::to_string(r).expect("run records serialize"));
            out.push('\n');
        };
        line(&LogRecord::Header(self.header.clone()));
        for s in &self.steps {
            line(&LogRecord::Step(s.clone()));
        }
        line(&match &self.end {
            RunEnd::Final(f) => LogRecord::Final(f.clone()),
            RunEnd::Failed(f) => LogRecord::Failed(f.clone()),
        });
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut end = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: LogRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            match (record, header.is_some(), end.is_some()) {
                (_, _, true) => return Err(format!("line {}: record after the run outcome", i + 1)),
                (LogRecord::Header(h), false, _) => header = Some(h),
                (_, false, _) => return Err("the first record is not a header".into()),
                (LogRecord::Header(_), true, _) => return Err(format!("line {}: second header", i + 1)),
                (LogRecord::Step(s), true, _) => steps.push(s),
                (LogRecord::Final(f), true, _) => end = Some(RunEnd::Final(f)),
                (LogRecord::Failed(f), true, _) => end = Some(RunEnd::Failed(f)),
            }
        }
        let header = header.ok_or("empty log")?;
        let end = end.ok_or("the run has no outcome record")?;
        Ok(Self { header, steps, end })
    }
}

/// A run log together with the wall-clock time of each planning call.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: RunLog,
    pub planning_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingSidecar {
    version: String,
    config: Setup,
    strategy: String,
    realization: u64,
    planning_seconds: Vec<f64>,
}

/// Runs realization `r` of `setup` with the given planner.
pub fn run_one(setup: &Setup, planner: &PlannerConfig, r: u64) -> Result<RunOutput, HarnessError> {
    let (scenario, theta_init) = realization(&setup.scenario, &setup.solver, r)?;
    let header = RunHeader {
        version: VERSION.to_string(),
        strategy: strategy_label(planner),
        realization: r,
        config: setup.clone(),
        truth: scenario.nodes.clone(),
        agent_start: scenario.agent_start,
        theta_init: theta_init.clone(),
    };
    let seeds = RunSeeds { master: setup.scenario.seed, realization: r };
    match rh_loop(&scenario, &theta_init, planner, &setup.solver, setup.scenario.steps, seeds) {
        Ok(t) => {
            let last = t.steps.last().expect("at least one step");
            let end = RunFinal {
                final_position: t.final_position,
                final_theta: t.final_theta.clone(),
                final_fitness: last.fitness,
                final_fitness_regularized: last.fitness_regularized,
                errors: localization_error(&t.final_theta, &scenario.nodes)?,
            };
            Ok(RunOutput {
                log: RunLog { header, steps: t.steps, end: RunEnd::Final(end) },
                planning_seconds: t.planning_seconds,
            })
        }
        Err(e) => Ok(RunOutput {
            log: RunLog { header, steps: Vec::new(), end: RunEnd::Failed(RunFailure { error: e.to_string() }) },
            planning_seconds: Vec::new(),
        }),
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_error(&tmp))?;
    fs::rename(&tmp, path).map_err(io_error(path))
}

fn timing_path(log: &Path) -> PathBuf {
    log.with_extension("timing.json")
}

/// Writes the run log to `path` and the planning times next to it.
pub fn write_run(path: &Path, run: &RunOutput) -> Result<(), HarnessError> {
    let sidecar = TimingSidecar {
        version: VERSION.to_string(),
        config: run.log.header.config.clone(),
        strategy: run.log.header.strategy.clone(),
        realization: run.log.header.realization,
        planning_seconds: run.planning_seconds.clone(),
    };
    write_atomic(&timing_path(path), &serde_json::to_string(&sidecar).expect("timing serializes"))?;
    write_atomic(path, &run.log.to_jsonl())
}

pub fn read_run(path: &Path) -> Result<RunOutput, HarnessError> {
    let malformed = |message: String| HarnessError::Malformed { path: path.display().to_string(), message };
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let log = RunLog::from_jsonl(&text).map_err(malformed)?;
    let tpath = timing_path(path);
    let timing = fs::read_to_string(&tpath).map_err(io_error(&tpath))?;
    let sidecar: TimingSidecar = serde_json::from_str(&timing).map_err(|e| malformed(e.to_string()))?;
    Ok(RunOutput { log, planning_seconds: sidecar.planning_seconds })
}

/// Location of the log of realization `r` under strategy `label`.
pub fn run_path(dir: &Path, label: StrategyLabel, r: u64) -> PathBuf {
    dir.join("runs").join(label.name()).join(format!("r{r:04}.jsonl"))
}

/// Quartile summary of a sample; quantiles interpolate linearly between
/// order statistics and `std` is the sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            mean,
            std,
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub metric: String,
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub mean_s: f64,
    pub std_s: f64,
    pub n_steps: usize,
    /// Mean and std divided by the dp mean, when a dp row exists.
    pub relative: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCount {
    pub strategy: String,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub counts: Vec<RunCount>,
    pub metrics: Vec<MetricRow>,
    pub timing: Vec<TimingRow>,
}

/// Divides each `(strategy, mean, std)` by the mean of the `dp` row.
pub fn timing_normalize(rows: &[(String, f64, f64)]) -> Result<Vec<(String, f64, f64)>, HarnessError> {
    let base = rows
        .iter()
        .find(|(s, _, _)| s == StrategyLabel::Dp.name())
        .map(|r| r.1)
        .filter(|m| *m > 0.0 && m.is_finite())
        .ok_or(HarnessError::NoDpBaseline)?;
    Ok(rows.iter().map(|(s, m, sd)| (s.clone(), m / base, sd / base)).collect())
}

/// Error metrics pooled over nodes of completed runs: 3D location error and
/// absolute path-loss errors; final fitness is per run.
pub const METRICS: [&str; 4] = ["location_error_m", "gamma_abs_error", "k_abs_error_db", "final_fitness"];

/// Aggregates runs, grouped by strategy in `order`.
pub fn summarize(order: &[String], runs: &[RunOutput]) -> ExperimentSummary {
    let mut counts = Vec::new();
    let mut metrics = Vec::new();
    let mut raw_timing = Vec::new();
    for label in order {
        let mine: Vec<&RunOutput> = runs.iter().filter(|r| &r.log.header.strategy == label).collect();
        let done: Vec<(&RunOutput, &RunFinal)> =
            mine.iter().filter_map(|r| r.log.completed().map(|f| (*r, f))).collect();
        counts.push(RunCount { strategy: label.clone(), completed: done.len(), failed: mine.len() - done.len() });
        let errors = || done.iter().flat_map(|(_, f)| f.errors.iter());
        let samples: [Vec<f64>; 4] = [
            errors().map(|e| e.location_err_m).collect(),
            errors().map(|e| e.gamma_err.abs()).collect(),
            errors().map(|e| e.k_err_db.abs()).collect(),
            done.iter().filter_map(|(_, f)| f.final_fitness).collect(),
        ];
        for (name, values) in METRICS.iter().zip(&samples) {
            if let Some(stats) = Stats::of(values) {
                metrics.push(MetricRow { strategy: label.clone(), metric: name.to_string(), stats });
            }
        }
        let times: Vec<f64> = done.iter().flat_map(|(r, _)| r.planning_seconds.iter().copied()).collect();
        if let Some(s) = Stats::of(&times) {
            raw_timing.push((label.clone(), s.mean, s.std, s.n));
        }
    }
    let triples: Vec<_> = raw_timing.iter().map(|(l, m, s, _)| (l.clone(), *m, *s)).collect();
    let relative = timing_normalize(&triples).ok();
    let timing = raw_timing
        .iter()
        .enumerate()
        .map(|(i, (l, m, s, n))| TimingRow {
            strategy: l.clone(),
            mean_s: *m,
            std_s: *s,
            n_steps: *n,
            relative: relative.as_ref().map(|r| (r[i].1, r[i].2)),
        })
        .collect();
    ExperimentSummary { counts, metrics, timing }
}

fn comment_lines(setup: &Setup, summary: &ExperimentSummary) -> String {
    let mut out = format!("# {VERSION}\n# config {}\n", serde_json::to_string(setup).expect("config serializes"));
    for c in &summary.counts {
        let _ = writeln!(out, "# runs {} completed={} failed={}", c.strategy, c.completed, c.failed);
    }
    out
}

/// Error statistics as CSV; deterministic for a given setup.
pub fn summary_csv(setup: &Setup, summary: &ExperimentSummary) -> String {
    let mut out = comment_lines(setup, summary);
    out.push_str("strategy,metric,median,q1,q3,mean,std,n\n");
    for row in &summary.metrics {
        let s = row.stats;
        let _ = writeln!(out, "{},{},{},{},{},{},{},{}", row.strategy, row.metric, s.median, s.q1, s.q3, s.mean, s.std, s.n);
    }
    out
}

/// Planning-time statistics as CSV.
pub fn timing_csv(setup: &Setup, summary: &ExperimentSummary) -> String {
    let mut out = comment_lines(setup, summary);
    out.push_str("strategy,mean_s,std_s,relative_mean,relative_std,n_steps\n");
    for t in &summary.timing {
        let (rm, rs) = t.relative.map_or((String::new(), String::new()), |(m, s)| (m.to_string(), s.to_string()));
        let _ = writeln!(out, "{},{},{},{},{},{}", t.strategy, t.mean_s, t.std_s, rm, rs, t.n_steps);
    }
    out
}

/// Human-readable quartile table of the error metrics.
pub fn error_table(summary: &ExperimentSummary) -> String {
    let mut out = format!("{:<12} {:<18} {:>12} {:>12} {:>12} {:>6}\n", "strategy", "metric", "median", "q1", "q3", "n");
    for row in &summary.metrics {
        let s = row.stats;
        let _ = writeln!(
            out,
            "{:<12} {:<18} {:>12.4} {:>12.4} {:>12.4} {:>6}",
            row.strategy, row.metric, s.median, s.q1, s.q3, s.n
        );
    }
    out
}

/// Human-readable planning-time table normalized to dp.
pub fn timing_table(summary: &ExperimentSummary) -> String {
    let mut out = format!("{:<12} {:>14} {:>20}\n", "strategy", "mean_s", "relative");
    for t in &summary.timing {
        let rel = t.relative.map_or("n/a".to_string(), |(m, s)| format!("{m:.3} ± {s:.3}"));
        let _ = writeln!(out, "{:<12} {:>14.6} {:>20}", t.strategy, t.mean_s, rel);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<RunOutput>,
    pub summary: ExperimentSummary,
}

fn labels(setup: &Setup) -> Vec<String> {
    setup.experiment.strategies.iter().map(|l| l.name().to_string()).collect()
}

/// Runs every strategy on every realization, `workers` at a time (0 uses
/// every core). With `out`, each run log is written as soon as it finishes
/// and the summary files are written at the end.
pub fn run_experiment(setup: &Setup, workers: usize, out: Option<&Path>) -> Result<ExperimentResult, HarnessError> {
    setup.validate()?;
    let base = setup.planner();
    let jobs: Vec<(u64, StrategyLabel)> = (0..setup.experiment.realizations as u64)
        .flat_map(|r| setup.experiment.strategies.iter().map(move |&l| (r, l)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, label)| {
                let run = run_one(setup, &label.configure(&base), r)?;
                if let Some(dir) = out {
                    write_run(&run_path(dir, label, r), &run)?;
                }
                Ok(run)
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    let summary = summarize(&labels(setup), &runs);
    if let Some(dir) = out {
        write_summaries(dir, setup, &summary)?;
    }
    Ok(ExperimentResult { runs, summary })
}

pub fn write_summaries(dir: &Path, setup: &Setup, summary: &ExperimentSummary) -> Result<(), HarnessError> {
    write_atomic(&dir.join("summary.csv"), &summary_csv(setup, summary))?;
    write_atomic(&dir.join("timing.csv"), &timing_csv(setup, summary))
}

/// Rebuilds the summary from the run logs under `dir`; refuses when any
/// expected run is missing, incomplete or was produced by another setup.
pub fn summarize_dir(setup: &Setup, dir: &Path) -> Result<ExperimentSummary, HarnessError> {
    setup.validate()?;
    let mut runs = Vec::new();
    let mut missing = 0;
    let mut expected = 0;
    for r in 0..setup.experiment.realizations as u64 {
        for &label in &setup.experiment.strategies {
            expected += 1;
            let path = run_path(dir, label, r);
            match read_run(&path) {
                Ok(run) => {
                    let h = &run.log.header;
                    if h.config != *setup || h.strategy != label.name() || h.realization != r {
                        return Err(HarnessError::Malformed {
                            path: path.display().to_string(),
                            message: "the log was produced by a different configuration".into(),
                        });
                    }
                    runs.push(run);
                }
                Err(HarnessError::Io { .. } | HarnessError::Malformed { .. }) => missing += 1,
                Err(e) => return Err(e),
            }
        }
    }
    if missing > 0 {
        return Err(HarnessError::MissingRuns { missing, expected, dir: dir.display().to_string() });
    }
    Ok(summarize(&labels(setup), &runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_between_order_statistics() {
        let s = Stats::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stats::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn strategy_labels_round_trip() {
        for l in StrategyLabel::ALL {
            assert_eq!(l.name().parse::<StrategyLabel>().unwrap(), l);
            assert_eq!(strategy_label(&l.configure(&PlannerConfig::default())), l.name());
        }
        assert!("dp+penalty".parse::<StrategyLabel>().is_err());
    }
}
