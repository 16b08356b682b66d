//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::protocol::tau_max_steps;
use crate::scenario::{self, ScenarioConfig};
use crate::stopping::mc_grid_stopping_time;
use crate::trigger::{kappa_approx, kappa_exact, TriggerMode, WindowMode};

#[derive(Debug, Parser)]
#[command(
    name = "etlearn",
    version,
    about = "Event-triggered state estimation with event-triggered model learning"
)]
pub struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output CSV path for `run`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its trace CSV.
    Run {
        /// Scenario file, or the name of a built-in scenario.
        scenario: String,
    },
    /// Print the simulated expected stopping time of the initial model and
    /// the threshold of the configured trigger.
    EstimateTau { scenario: String },
    /// Print a learning-trigger threshold.
    Kappa {
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        n: usize,
        #[arg(long = "tau-max")]
        tau_max: f64,
        #[arg(long, value_enum, default_value_t = KappaMode::Approx)]
        mode: KappaMode,
    },
    /// Check a scenario file without running it.
    Validate { scenario: String },
    /// List the built-in scenarios.
    Builtins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KappaMode {
    Exact,
    Approx,
}

fn load(arg: &str, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = scenario::load(arg)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

/// Executes a parsed command, writing human-readable output to `out`.
pub fn execute<W: Write>(cli: &Cli, out: &mut W) -> Result<()> {
    let stdout_err = |e: std::io::Error| Error::io("<stdout>", e);
    match &cli.command {
        Command::Kappa {
            eta,
            n,
            tau_max,
            mode,
        } => {
            if !(*eta > 0.0 && *eta < 1.0) || *n == 0 || !(*tau_max > 0.0) {
                return Err(Error::config(
                    "kappa",
                    "need 0 < eta < 1, n >= 1 and tau-max > 0",
                ));
            }
            let k = match mode {
                KappaMode::Exact => kappa_exact(*eta, *n, *tau_max),
                KappaMode::Approx => kappa_approx(*eta, *n, *tau_max),
            };
            writeln!(out, "{k:.4}").map_err(stdout_err)?;
        }
        Command::Validate { scenario } => {
            let cfg = load(scenario, cli.seed)?;
            let sc = cfg.build()?;
            writeln!(
                out,
                "ok: {} (n = {}, q = {}, {} steps, {} events)",
                sc.name,
                sc.system.n(),
                sc.system.q(),
                sc.steps,
                sc.events.len()
            )
            .map_err(stdout_err)?;
        }
        Command::EstimateTau { scenario } => {
            let cfg = load(scenario, cli.seed)?;
            let sc = cfg.build()?;
            let ts = sc.system.ts();
            let tau_max = tau_max_steps(sc.trigger.tau_max, ts)? as f64 * ts;
            let est = mc_grid_stopping_time(
                sc.model.a_cl(),
                sc.model.sigma(),
                ts,
                sc.delta,
                sc.trigger.mc_samples,
                tau_max,
                scenario::mc_seed(sc.seed, sc.model.version()),
            )?;
            writeln!(
                out,
                "E[tau] = {:.6} s ({} paths)",
                est.mean, est.sample_count
            )
            .map_err(stdout_err)?;
            let mode = match sc.trigger.mode {
                TriggerMode::Exact => "exact",
                TriggerMode::Approx => "approx",
            };
            let (n, note) = match sc.trigger.window {
                WindowMode::Count(n) => (n, ""),
                WindowMode::Duration { min_samples, .. } => {
                    (min_samples, " at the minimum window size")
                }
            };
            let certified = if sc.trigger.kappa_override.is_some() {
                " (fixed, not certified)"
            } else {
                ""
            };
            writeln!(
                out,
                "kappa = {:.4} s ({mode}, N = {n}{note}){certified}",
                sc.trigger.kappa(n)
            )
            .map_err(stdout_err)?;
        }
        Command::Run { scenario } => {
            let cfg = load(scenario, cli.seed)?;
            let path = cli
                .out
                .clone()
                .unwrap_or_else(|| scenario::default_output_path(&cfg));
            let trace = scenario::run_scenario(&cfg)?;
            scenario::emit_csv(&trace, &path)?;
            writeln!(
                out,
                "{}: {} steps, {} state updates, {} learning episodes -> {}",
                trace.name,
                trace.records.len(),
                trace.state_updates(),
                trace.episodes.len(),
                path.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Builtins => {
            for name in scenario::builtin_names() {
                writeln!(out, "{name}").map_err(stdout_err)?;
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
