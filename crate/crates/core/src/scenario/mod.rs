//! Full event-triggered learning runs from scenario files.
//!
//! One run interleaves, per sample period: a step of the true system, a
//! protocol step, inter-communication bookkeeping and a learning-trigger
//! evaluation. When the gated trigger fires, estimation is suspended and the
//! true system is driven by the configured chirp for the configured number
//! of samples; the fitted model is then broadcast, the simulated stopping
//! time is recomputed for it and the trigger window starts over.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{
    DynamicsEvent, EventBlock, LearningBlock, ModelBlock, RunBlock, Scenario, ScenarioConfig,
    SystemBlock, TriggerBlock, WindowBlock, SCHEMA_VERSION,
};

use crate::error::{Error, Result};
use crate::linalg::to_rows;
use crate::lti::eval_reference;
use crate::protocol::{EtseLink, ModelEstimate, PayloadKind, Transport};
use crate::rng::{derive_seed, stream, streams};
use crate::stopping::{mc_grid_stopping_time, StoppingTimeEstimate};
use crate::sysid::LearningSession;
use crate::trigger::{
    evaluate_approx, evaluate_exact, Decision, SustainedGate, TauWindow, TriggerConfig,
    TriggerMode, WindowMode,
};

/// Environment variable naming the directory for runs without an explicit
/// output path.
pub const OUT_DIR_ENV: &str = "ETLEARN_OUT_DIR";

/// Column order of the trace CSV.
pub const CSV_COLUMNS: [&str; 12] = [
    "t",
    "z_norm",
    "gamma_state",
    "tau",
    "window_mean",
    "sim_mean",
    "kappa",
    "gamma_learn_raw",
    "gamma_learn",
    "model_version",
    "messages",
    "bytes",
];

const BUILTINS: [(&str, &str); 2] = [
    ("paper-sim", include_str!("../../scenarios/paper-sim.toml")),
    (
        "cartpole-emulation",
        include_str!("../../scenarios/cartpole-emulation.toml"),
    ),
];

/// Source text of a scenario shipped with the crate.
pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

/// Reads `arg` as a file, falling back to a built-in scenario of that name.
pub fn load(arg: &str) -> Result<ScenarioConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(text) = builtin(arg) {
            return ScenarioConfig::from_toml_str(text);
        }
    }
    ScenarioConfig::from_file(path)
}

/// One row per simulation step. Fields that do not apply in a step (for
/// instance everything protocol-related during a learning experiment) are
/// `None` and appear as empty CSV cells.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// End of the step, in seconds.
    pub t: f64,
    pub z_norm: Option<f64>,
    pub gamma_state: Option<bool>,
    pub tau: Option<f64>,
    pub window_mean: Option<f64>,
    pub sim_mean: f64,
    pub kappa: Option<f64>,
    /// `None` while the window is not ready.
    pub gamma_learn_raw: Option<bool>,
    pub gamma_learn: Option<bool>,
    pub model_version: u64,
    pub messages: u64,
    pub bytes: u64,
}

impl StepRecord {
    pub fn is_learning(&self) -> bool {
        self.gamma_state.is_none()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LearningEpisode {
    /// Start of the uninterrupted run of raw-true decisions that fired.
    pub onset_t: f64,
    /// Step at which the gated trigger fired.
    pub trigger_t: f64,
    pub start_t: f64,
    pub end_t: f64,
    pub samples: usize,
    pub version: u64,
    pub a_cl: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    /// Simulated mean stopping time under the new model.
    pub sim_mean: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioTrace {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub ts: f64,
    pub records: Vec<StepRecord>,
    pub episodes: Vec<LearningEpisode>,
    /// Simulated stopping times per model version, in adoption order.
    pub estimates: Vec<(u64, StoppingTimeEstimate)>,
    /// Set when the run ended during a learning experiment.
    pub unfinished_episode_start: Option<f64>,
}

impl ScenarioTrace {
    /// Observed inter-communication times in order.
    pub fn tau_samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.records.iter().filter_map(|r| r.tau.map(|tau| (r.t, tau)))
    }

    pub fn state_updates(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.gamma_state == Some(true))
            .count()
    }
}

/// Seed of the Monte Carlo run for model `version`.
pub fn mc_seed(seed: u64, version: u64) -> u64 {
    derive_seed(derive_seed(seed, streams::MONTE_CARLO), version)
}

fn simulate_stopping_time(sc: &Scenario, model: &ModelEstimate, tau_max: f64) -> Result<StoppingTimeEstimate> {
    mc_grid_stopping_time(
        model.a_cl(),
        model.sigma(),
        sc.system.ts(),
        sc.delta,
        sc.trigger.mc_samples,
        tau_max,
        mc_seed(sc.seed, model.version()),
    )
}

fn kappa_for(cfg: &TriggerConfig, window: &TauWindow) -> Option<f64> {
    match cfg.window {
        WindowMode::Count(n) => Some(cfg.kappa(n)),
        WindowMode::Duration { .. } if window.is_empty() => None,
        WindowMode::Duration { .. } => Some(cfg.kappa(window.len())),
    }
}

/// Learning in progress plus what is needed to report it.
struct Episode {
    session: LearningSession,
    onset_t: f64,
    trigger_t: f64,
    start_t: f64,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioTrace> {
    let sc = cfg.build()?;
    run_built(&sc)
}

/// [`run_scenario`] for an already validated scenario.
pub fn run_built(sc: &Scenario) -> Result<ScenarioTrace> {
    let ts = sc.system.ts();
    let (n, q) = (sc.system.n(), sc.system.q());
    let mut truth = sc.system.clone();
    let mut x = sc.x0.clone();
    let mut link = EtseLink::lossless(sc.model.clone(), x.clone(), sc.delta, sc.trigger.tau_max, ts)
        .map_err(|e| e.at(0, "setup"))?;
    // capped samples equal tau_max as realised on the grid
    let tau_max = link.tau_max();
    let mut rng = stream(sc.seed, streams::PLANT);

    let mut sim = simulate_stopping_time(sc, link.model(), tau_max).map_err(|e| e.at(0, "monte-carlo"))?;
    let mut estimates = vec![(link.model().version(), sim.clone())];
    let mut window = TauWindow::new(sc.trigger.window, 0.0);
    let mut gate = SustainedGate::new(sc.trigger.sustain);
    let mut events = sc.events.iter().peekable();
    let mut episode: Option<Episode> = None;
    let mut episodes = Vec::new();
    let mut records = Vec::with_capacity(sc.steps as usize);

    for k in 0..sc.steps {
        let t_start = k as f64 * ts;
        let t = (k + 1) as f64 * ts;
        while let Some(ev) = events.next_if(|ev| ev.time <= t_start + 1e-9) {
            if let Some(a) = &ev.a {
                truth = truth.with_a(a.clone()).map_err(|e| e.at(k, "event"))?;
            }
            if let Some(sigma) = &ev.sigma {
                truth = truth.with_sigma(sigma.clone()).map_err(|e| e.at(k, "event"))?;
            }
        }

        if let Some(ep) = episode.as_mut() {
            x = ep.session.step(&truth, &mut rng).clone();
            link.skip_steps(1);
            let mut record = StepRecord {
                t,
                z_norm: None,
                gamma_state: None,
                tau: None,
                window_mean: None,
                sim_mean: sim.mean,
                kappa: None,
                gamma_learn_raw: None,
                gamma_learn: None,
                model_version: link.model().version(),
                messages: 0,
                bytes: 0,
            };
            if ep.session.is_complete() {
                let ep = episode.take().expect("episode is active");
                let outcome = ep.session.finish().map_err(|e| e.at(k, "learning"))?;
                let model = outcome.model;
                link.broadcast_model(model.clone(), &x)
                    .map_err(|e| e.at(k, "broadcast"))?;
                sim = simulate_stopping_time(sc, &model, tau_max).map_err(|e| e.at(k, "monte-carlo"))?;
                estimates.push((model.version(), sim.clone()));
                window.reset(t);
                gate.reset();
                episodes.push(LearningEpisode {
                    onset_t: ep.onset_t,
                    trigger_t: ep.trigger_t,
                    start_t: ep.start_t,
                    end_t: t,
                    samples: sc.learning_samples,
                    version: model.version(),
                    a_cl: to_rows(model.a_cl()),
                    b: to_rows(model.b()),
                    sigma: to_rows(model.sigma()),
                    sim_mean: sim.mean,
                });
                record.sim_mean = sim.mean;
                record.model_version = model.version();
            }
            record.messages = link.transport().messages();
            record.bytes = link.transport().bytes();
            records.push(record);
            continue;
        }

        let r = eval_reference(&sc.reference, k, ts, q);
        let noise = truth.noise_sampler().sample(&mut rng);
        x = truth.step(&x, &r, &noise);
        let out = link.step(&x, &r).map_err(|e| e.at(k, "protocol"))?;
        if let Some(tau) = out.tau {
            window.push(t, tau);
        } else {
            window.advance_to(t);
        }

        let kappa = kappa_for(&sc.trigger, &window);
        let decision = match kappa {
            None => Decision::NotReady,
            Some(kappa) => match sc.trigger.mode {
                TriggerMode::Exact => evaluate_exact(&window, t, sim.mean, kappa),
                TriggerMode::Approx => evaluate_approx(&window, t, &sim, kappa),
            },
        };
        let fired = gate.update(t, decision.fired());
        if fired {
            let onset_t = gate.onset().unwrap_or(t);
            let session = LearningSession::new(
                n,
                q,
                ts,
                &sc.chirp,
                sc.learning_samples,
                &x,
                link.model().version(),
            )
            .map_err(|e| e.at(k, "learning"))?;
            episode = Some(Episode {
                session,
                onset_t,
                trigger_t: t,
                start_t: t,
            });
        }

        records.push(StepRecord {
            t,
            z_norm: Some(out.z_norm),
            gamma_state: Some(
                out.event
                    .as_ref()
                    .is_some_and(|e| e.kind == PayloadKind::StateUpdate),
            ),
            tau: out.tau,
            window_mean: window.mean(),
            sim_mean: sim.mean,
            kappa,
            gamma_learn_raw: decision.as_flag(),
            gamma_learn: Some(fired),
            model_version: link.model().version(),
            messages: link.transport().messages(),
            bytes: link.transport().bytes(),
        });
    }

    Ok(ScenarioTrace {
        name: sc.name.clone(),
        seed: sc.seed,
        config_hash: sc.config_hash.clone(),
        ts,
        records,
        episodes,
        estimates,
        unfinished_episode_start: episode.map(|e| e.start_t),
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn flag(v: Option<bool>) -> String {
    opt(v.map(u8::from))
}

/// Writes the CSV to `writer`.
pub fn write_csv<W: Write>(trace: &ScenarioTrace, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in &trace.records {
        w.write_record([
            r.t.to_string(),
            opt(r.z_norm),
            flag(r.gamma_state),
            opt(r.tau),
            opt(r.window_mean),
            r.sim_mean.to_string(),
            opt(r.kappa),
            flag(r.gamma_learn_raw),
            flag(r.gamma_learn),
            r.model_version.to_string(),
            r.messages.to_string(),
            r.bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Metadata<'a> {
    name: &'a str,
    seed: u64,
    config_sha256: &'a str,
    ts: f64,
    steps: usize,
    columns: [&'static str; 12],
    episodes: &'a [LearningEpisode],
    unfinished_episode_start: Option<f64>,
}

/// Sidecar metadata path for a trace written to `csv_path`.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    csv_path.with_file_name(name)
}

/// Writes the trace CSV to `path` and the metadata sidecar next to it.
pub fn emit_csv(trace: &ScenarioTrace, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(trace, BufWriter::new(file)).map_err(|e| {
        let io = match e.into_kind() {
            csv::ErrorKind::Io(io) => io,
            other => std::io::Error::other(format!("{other:?}")),
        };
        Error::io(path, io)
    })?;

    let meta = Metadata {
        name: &trace.name,
        seed: trace.seed,
        config_sha256: &trace.config_hash,
        ts: trace.ts,
        steps: trace.records.len(),
        columns: CSV_COLUMNS,
        episodes: &trace.episodes,
        unfinished_episode_start: trace.unfinished_episode_start,
    };
    let meta_path = metadata_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// `run.output` if set, otherwise `<name>.csv` in `$ETLEARN_OUT_DIR` or in
/// `out/`.
pub fn default_output_path(cfg: &ScenarioConfig) -> PathBuf {
    if let Some(out) = &cfg.run.output {
        return PathBuf::from(out);
    }
    let dir = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"));
    dir.join(format!("{}.csv", cfg.name))
}
