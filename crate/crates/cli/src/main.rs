//! `hope`: benchmark harness for off-policy evaluation with aggregated
//! rewards on the synthetic sepsis environment.
//!
//! Exit codes: 0 success, 1 usage or config error (and stage failures),
//! 2 a `--check` assertion failed. `HOPE_THREADS` caps parallelism.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hope_core::estimators::{parse_estimators, ThresholdMode};
use hope_core::experiment::{
    self, acceptance_checks, render_text, BehaviorMode, ExperimentConfig, ExperimentError, Report,
};
use hope_core::reward_reconstruction::Solver;

#[derive(Debug, Parser)]
#[command(name = "hope", version, about = "Off-policy evaluation benchmark with aggregated rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw behavior trajectories; write the dataset and ground-truth sidecar.
    Simulate(Common),
    /// Fit preliminary rewards and calibrate them on critical observations.
    Reconstruct(Common),
    /// Run the estimators, bootstrap them and write the reports.
    Evaluate(Common),
    /// simulate + reconstruct + evaluate.
    Benchmark(Common),
    /// Print the report stored in the output directory.
    Report(Common),
    /// Print the built-in default config as JSON.
    DefaultConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HMode {
    Elbow,
    AllCritical,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    ClosedForm,
    Iterative,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BehaviorArg {
    Stored,
    Cloned,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON); the built-in default when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated estimator names, e.g. wis,hope.
    #[arg(long, value_name = "LIST")]
    estimators: Option<String>,
    /// Apply the benchmark assertions; exit 2 if any fails.
    #[arg(long)]
    check: bool,
    /// Dataset to read instead of the one in the output directory.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    n_trajectories: Option<usize>,
    /// Neighbor count K.
    #[arg(long)]
    k: Option<usize>,
    /// Fixed critical-observation threshold; overrides --h-mode.
    #[arg(long, value_name = "H", allow_negative_numbers = true)]
    h: Option<f64>,
    #[arg(long, value_enum)]
    h_mode: Option<HMode>,
    /// Maximum Q-fit sweeps.
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long)]
    ridge: Option<f64>,
    /// Importance-weight denominators: logged probabilities or behavior cloning.
    #[arg(long, value_enum)]
    behavior: Option<BehaviorArg>,
    /// Bootstrap replicas B.
    #[arg(long)]
    bootstrap: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        if let Some(list) = &self.estimators {
            c.estimators = parse_estimators(list).map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if let Some(n) = self.n_trajectories {
            c.n_trajectories = n;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        match (self.h, self.h_mode) {
            (Some(h), _) => c.h_mode = ThresholdMode::Fixed { h },
            (None, Some(HMode::Elbow)) => c.h_mode = ThresholdMode::Elbow,
            (None, Some(HMode::AllCritical)) => c.h_mode = ThresholdMode::AllCritical,
            (None, None) => {}
        }
        if let Some(s) = self.sweeps {
            c.reconstruction.q_fit.max_sweeps = s;
        }
        if let Some(s) = self.solver {
            c.reconstruction.fit.solver = match s {
                SolverArg::ClosedForm => Solver::ClosedForm,
                SolverArg::Iterative => Solver::Iterative,
            };
        }
        if let Some(r) = self.ridge {
            c.reconstruction.fit.ridge = r;
        }
        if let Some(b) = self.behavior {
            c.behavior.mode = match b {
                BehaviorArg::Stored => BehaviorMode::Stored,
                BehaviorArg::Cloned => BehaviorMode::Cloned,
            };
        }
        if let Some(b) = self.bootstrap {
            c.bootstrap_b = b;
        }
        c.validate()?;
        Ok(c)
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("HOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("HOPE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn finish(report: &Report, check: bool) -> ExitCode {
    print!("{}", render_text(report));
    if !check {
        return ExitCode::SUCCESS;
    }
    let outcomes = acceptance_checks(report);
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run(command: Command) -> Result<ExitCode, ExperimentError> {
    let start = Instant::now();
    let code = match command {
        Command::DefaultConfig => {
            println!("{}", ExperimentConfig::default().to_json_pretty());
            return Ok(ExitCode::SUCCESS);
        }
        Command::Simulate(args) => {
            let c = args.config()?;
            let s = experiment::simulate(&c)?;
            println!(
                "{} trajectories: {} discharged, {} died, {} unresolved; mean return {:.6}, mean length {:.3}",
                s.n_trajectories, s.outcomes.discharge, s.outcomes.death, s.outcomes.none, s.mean_return, s.mean_length
            );
            ExitCode::SUCCESS
        }
        Command::Reconstruct(args) => {
            let c = args.config()?;
            let s = experiment::reconstruct(&c, args.dataset.as_deref())?;
            println!(
                "preliminary loss {:.6e} over {} parameters; threshold {}, {} critical observations, {} neighbor entries",
                s.preliminary_loss, s.parameters, s.threshold, s.critical_observations, s.neighbor_entries
            );
            ExitCode::SUCCESS
        }
        Command::Evaluate(args) => {
            let c = args.config()?;
            finish(&experiment::evaluate(&c, args.dataset.as_deref())?, args.check)
        }
        Command::Benchmark(args) => {
            let c = args.config()?;
            finish(&experiment::benchmark(&c)?, args.check)
        }
        Command::Report(args) => {
            let c = args.config()?;
            finish(&experiment::load_report(&c.output_dir)?, args.check)
        }
    };
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
