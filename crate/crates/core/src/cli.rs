//! Command-line front end: single runs, experiments and parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{self, Config, ConfigError};
use crate::harness::{
    self, error_table, run_experiment, run_one, strategy_label, summarize_dir, timing_table, write_run,
    write_summaries, HarnessError, RunEnd, VERSION,
};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "FIMRH_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "fimrh", version, about = "Fisher-information receding-horizon planning for RSS node localization")]
pub struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set planner.horizon_T=3`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Parallel realizations; 0 uses every core.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Master seed, same as `--set scenario.seed=...`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One receding-horizon run with the configured planner.
    Run,
    /// Every configured strategy on every realization.
    Experiment {
        /// Rebuild the summary from existing run logs without running anything.
        #[arg(long)]
        summarize_only: bool,
    },
    /// One experiment per value of a configuration key.
    Sweep {
        #[arg(long, value_name = "KEY")]
        key: String,
        #[arg(long, value_name = "VALUE", num_args = 1.., required = true)]
        values: Vec<String>,
    },
    /// Check the configuration and print it fully resolved.
    ValidateConfig,
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl Cli {
    fn resolve(&self, extra: &[String]) -> Result<Config, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("scenario.seed={seed}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("runtime.workers={w}"));
        }
        overrides.extend_from_slice(extra);
        let cfg = Config::load(self.config.as_deref(), &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &Config) -> PathBuf {
        self.out.clone().or_else(|| cfg.runtime.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| "out".into())
    }
}

/// Parses `args`, runs the command and returns the process exit code,
/// writing the report to `stdout` and diagnostics to `stderr`.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 2;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    match execute(&cli) {
        Ok(report) => {
            let _ = write!(stdout, "{report}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Run => cmd_run(cli),
        Command::Experiment { summarize_only } => cmd_experiment(cli, *summarize_only),
        Command::Sweep { key, values } => cmd_sweep(cli, key, values),
        Command::ValidateConfig => Ok(cli.resolve(&[])?.to_toml()),
    }
}

fn cmd_run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.resolve(&[])?;
    let setup = cfg.setup();
    let planner = setup.planner();
    let run = run_one(&setup, &planner, 0)?;
    let dir = cli.out_dir(&cfg);
    let path = dir.join("run.jsonl");
    write_run(&path, &run)?;
    let mut report = format!("{VERSION}\nstrategy {}\nrun log {}\n", strategy_label(&planner), path.display());
    match &run.log.end {
        RunEnd::Final(f) => {
            let _ = writeln!(report, "{:<6} {:>14} {:>12} {:>12}", "node", "location_m", "gamma_err", "k_err_db");
            for (j, e) in f.errors.iter().enumerate() {
                let _ = writeln!(
                    report,
                    "{:<6} {:>14.4} {:>12.4} {:>12.4}",
                    j + 1,
                    e.location_err_m,
                    e.gamma_err,
                    e.k_err_db
                );
            }
            let fitness = f.final_fitness.map_or("singular".to_string(), |v| format!("{v:.6e}"));
            let _ = writeln!(report, "final fitness {fitness}");
            let _ = writeln!(report, "final fitness (regularized) {:.6e}", f.final_fitness_regularized);
            Ok(report)
        }
        RunEnd::Failed(f) => Err(CliError::Runtime(format!("run failed: {}; log written to {}", f.error, path.display()))),
    }
}

fn experiment_report(dir: &Path, summary: &harness::ExperimentSummary) -> String {
    let mut report = format!("{VERSION}\noutput {}\n", dir.display());
    for c in &summary.counts {
        let _ = writeln!(report, "{:<12} completed {:>4} failed {:>4}", c.strategy, c.completed, c.failed);
    }
    report.push_str("\nestimation error\n");
    report.push_str(&error_table(summary));
    report.push_str("\nplanning time per step, relative to dp\n");
    report.push_str(&timing_table(summary));
    report
}

fn cmd_experiment(cli: &Cli, summarize_only: bool) -> Result<String, CliError> {
    let cfg = cli.resolve(&[])?;
    let setup = cfg.setup();
    let dir = cli.out_dir(&cfg);
    let summary = if summarize_only {
        let s = summarize_dir(&setup, &dir)?;
        write_summaries(&dir, &setup, &s)?;
        s
    } else {
        run_experiment(&setup, cfg.runtime.workers, Some(&dir))?.summary
    };
    Ok(experiment_report(&dir, &summary))
}

/// Directory-safe rendering of a swept value.
fn value_dir(key: &str, value: &str) -> String {
    let clean: String =
        value.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    format!("{key}={clean}")
}

fn cmd_sweep(cli: &Cli, key: &str, values: &[String]) -> Result<String, CliError> {
    config::check_key(key)?;
    let base = cli.resolve(&[])?;
    let root = cli.out_dir(&base);
    let mut combined = format!(
        "# {VERSION}\n# config {}\n# sweep {key}\nvalue,strategy,metric,median,q1,q3,mean,std,n\n",
        serde_json::to_string(&base.setup()).expect("config serializes")
    );
    let mut report = String::new();
    for value in values {
        let cfg = cli.resolve(&[format!("{key}={value}")])?;
        let setup = cfg.setup();
        let dir = root.join("sweep").join(value_dir(key, value));
        let summary = run_experiment(&setup, cfg.runtime.workers, Some(&dir))?.summary;
        for row in &summary.metrics {
            let s = row.stats;
            let _ = writeln!(
                combined,
                "{value},{},{},{},{},{},{},{},{}",
                row.strategy, row.metric, s.median, s.q1, s.q3, s.mean, s.std, s.n
            );
        }
        let _ = writeln!(report, "== {key} = {value}");
        report.push_str(&experiment_report(&dir, &summary));
        report.push('\n');
    }
    let path = root.join("sweep.csv");
    fs::create_dir_all(&root).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", root.display())))?;
    fs::write(&path, combined).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let _ = writeln!(report, "combined summary {}", path.display());
    Ok(report)
}
