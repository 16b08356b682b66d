//! Scenario files.
//!
//! TOML with one table per block and matrices written as lists of rows:
//!
//! ```toml
//! schema = 1
//! name = "example"
//!
//! [system]
//! ts = 0.01
//! a = [[0.9]]
//! b = [[0.01]]
//! sigma = [[2.5e-5]]
//! f = [[0.0]]
//!
//! [model]            # optional; absent means the model equals the truth
//! a_cl = [[0.85]]
//! b = [[0.005]]
//! sigma = [[2.5e-5]]
//!
//! [trigger]
//! mode = "approx"    # or "exact"
//! eta = 0.05
//! delta = 0.02
//! tau_max = 3.5
//! mc_samples = 10000
//! window = { count = 2000 }   # or { seconds = 60.0, min_samples = 10 }
//! sustain = 0.0      # optional
//! kappa = 2.5        # optional fixed threshold
//!
//! [reference]
//! kind = "cosine"    # "zero", "cosine" or "chirp"
//! amplitude = 1.0
//! omega = 0.2
//!
//! [learning]
//! samples = 3000
//! chirp = { amplitude = 1.0, f0 = 0.05, f1 = 5.0, duration = 30.0 }
//!
//! [[events]]         # zero or more, applied to the true system only
//! time = 240.0
//! a = [[0.95]]
//!
//! [run]
//! duration = 1200.0
//! seed = 2024
//! output = "paper-sim.csv"   # optional
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::from_rows;
use crate::lti::{Chirp, LinearSystem, ReferenceSignal};
use crate::protocol::{tau_max_steps, ModelEstimate};
use crate::trigger::{TriggerConfig, TriggerMode, WindowMode};

pub const SCHEMA_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    pub name: String,
    pub system: SystemBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelBlock>,
    pub trigger: TriggerBlock,
    #[serde(default = "zero_reference")]
    pub reference: ReferenceSignal,
    pub learning: LearningBlock,
    #[serde(default)]
    pub events: Vec<EventBlock>,
    pub run: RunBlock,
}

fn zero_reference() -> ReferenceSignal {
    ReferenceSignal::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub ts: f64,
    pub a: Rows,
    pub b: Rows,
    pub sigma: Rows,
    pub f: Rows,
    /// Initial true state; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub a_cl: Rows,
    pub b: Rows,
    pub sigma: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerBlock {
    pub mode: TriggerMode,
    pub eta: f64,
    pub delta: f64,
    pub tau_max: f64,
    pub mc_samples: usize,
    pub window: WindowBlock,
    #[serde(default)]
    pub sustain: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningBlock {
    pub samples: usize,
    pub chirp: Chirp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventBlock {
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub duration: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

/// A change to the true system at `time`.
#[derive(Debug, Clone)]
pub struct DynamicsEvent {
    pub time: f64,
    pub a: Option<DMatrix<f64>>,
    pub sigma: Option<DMatrix<f64>>,
}

/// A validated scenario with every matrix built and checked.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub system: LinearSystem,
    pub x0: DVector<f64>,
    pub model: ModelEstimate,
    pub trigger: TriggerConfig,
    pub delta: f64,
    pub reference: ReferenceSignal,
    pub chirp: Chirp,
    pub learning_samples: usize,
    pub events: Vec<DynamicsEvent>,
    pub steps: u64,
    pub seed: u64,
    /// sha256 of the canonical JSON form of the config.
    pub config_hash: String,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::config(toml_error_path(&e), e.to_string().trim()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { path: field, msg } => Error::config(field, format!("{msg} (in {})", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always representable as TOML")
    }

    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("scenario config serialises");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Checks every block and builds the runtime objects. Errors are
    /// [`Error::Config`] carrying the offending field path.
    pub fn build(&self) -> Result<Scenario> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::config(
                "schema",
                format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema),
            ));
        }
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }

        let s = &self.system;
        let a = matrix("system.a", &s.a)?;
        if a.nrows() == 0 || !a.is_square() {
            return Err(Error::config(
                "system.a",
                format!("must be square and non-empty, got {}x{}", a.nrows(), a.ncols()),
            ));
        }
        let n = a.nrows();
        let b = matrix("system.b", &s.b)?;
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::config(
                "system.b",
                format!("must be {n}xq with q >= 1, got {}x{}", b.nrows(), b.ncols()),
            ));
        }
        let q = b.ncols();
        let sigma = square("system.sigma", &s.sigma, n)?;
        let f = matrix("system.f", &s.f)?;
        if f.shape() != (q, n) {
            return Err(Error::config(
                "system.f",
                format!("must be {q}x{n}, got {}x{}", f.nrows(), f.ncols()),
            ));
        }
        if !(s.ts > 0.0 && s.ts.is_finite()) {
            return Err(Error::config("system.ts", format!("must be positive, got {}", s.ts)));
        }
        let system = LinearSystem::new(a, b, sigma, f, s.ts).map_err(|e| Error::config("system", e.to_string()))?;
        let x0 = match &s.x0 {
            None => DVector::zeros(n),
            Some(v) if v.len() == n => DVector::from_column_slice(v),
            Some(v) => {
                return Err(Error::config(
                    "system.x0",
                    format!("must have {n} entries, got {}", v.len()),
                ))
            }
        };

        let model = match &self.model {
            None => ModelEstimate::from_system(&system, 0),
            Some(m) => {
                let a_cl = square("model.a_cl", &m.a_cl, n)?;
                let b = matrix("model.b", &m.b)?;
                if b.shape() != (n, q) {
                    return Err(Error::config(
                        "model.b",
                        format!("must be {n}x{q}, got {}x{}", b.nrows(), b.ncols()),
                    ));
                }
                let sigma = square("model.sigma", &m.sigma, n)?;
                ModelEstimate::new(a_cl, b, sigma, 0).map_err(|e| Error::config("model", e.to_string()))?
            }
        };

        let t = &self.trigger;
        if !(t.delta > 0.0 && t.delta.is_finite()) {
            return Err(Error::config("trigger.delta", format!("must be positive, got {}", t.delta)));
        }
        let window = match (t.window.count, t.window.seconds) {
            (Some(count), None) => {
                if t.window.min_samples.is_some() {
                    return Err(Error::config(
                        "trigger.window.min_samples",
                        "only applies to duration windows",
                    ));
                }
                WindowMode::Count(count)
            }
            (None, Some(seconds)) => WindowMode::Duration {
                seconds,
                min_samples: t.window.min_samples.unwrap_or(10),
            },
            _ => {
                return Err(Error::config(
                    "trigger.window",
                    "set exactly one of `count` or `seconds`",
                ))
            }
        };
        let trigger = TriggerConfig {
            eta: t.eta,
            window,
            mc_samples: t.mc_samples,
            tau_max: t.tau_max,
            kappa_override: t.kappa,
            sustain: t.sustain,
            mode: t.mode,
        };
        trigger
            .validate()
            .map_err(|e| Error::config("trigger", e.to_string()))?;
        tau_max_steps(t.tau_max, s.ts).map_err(|e| Error::config("trigger.tau_max", e.to_string()))?;

        self.reference
            .validate()
            .map_err(|e| Error::config("reference", e.to_string()))?;

        let l = &self.learning;
        l.chirp
            .validate()
            .map_err(|e| Error::config("learning.chirp", e.to_string()))?;
        if l.samples < n + q {
            return Err(Error::config(
                "learning.samples",
                format!("must be at least n + q = {}, got {}", n + q, l.samples),
            ));
        }
        if l.chirp.duration < l.samples as f64 * s.ts * (1.0 - 1e-12) {
            return Err(Error::config(
                "learning.chirp.duration",
                format!(
                    "{} s does not cover {} samples at Ts = {}",
                    l.chirp.duration, l.samples, s.ts
                ),
            ));
        }

        let r = &self.run;
        if !(r.duration >= 0.0 && r.duration.is_finite()) {
            return Err(Error::config(
                "run.duration",
                format!("must be non-negative, got {}", r.duration),
            ));
        }
        let steps = whole_steps(r.duration, s.ts);

        let mut events = Vec::with_capacity(self.events.len());
        let mut truth = system.clone();
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            let path = format!("events[{i}]");
            if !(e.time >= 0.0 && e.time <= r.duration) {
                return Err(Error::config(
                    format!("{path}.time"),
                    format!("must lie in [0, {}], got {}", r.duration, e.time),
                ));
            }
            if e.time <= last {
                return Err(Error::config(
                    format!("{path}.time"),
                    "event times must be strictly increasing",
                ));
            }
            last = e.time;
            if e.a.is_none() && e.sigma.is_none() {
                return Err(Error::config(path, "event must set `a` or `sigma`"));
            }
            let a = e.a.as_ref().map(|a| square(&format!("{path}.a"), a, n)).transpose()?;
            let sigma = e
                .sigma
                .as_ref()
                .map(|m| square(&format!("{path}.sigma"), m, n))
                .transpose()?;
            if let Some(a) = &a {
                truth = truth
                    .with_a(a.clone())
                    .map_err(|err| Error::config(format!("{path}.a"), err.to_string()))?;
            }
            if let Some(sigma) = &sigma {
                truth = truth
                    .with_sigma(sigma.clone())
                    .map_err(|err| Error::config(format!("{path}.sigma"), err.to_string()))?;
            }
            events.push(DynamicsEvent {
                time: e.time,
                a,
                sigma,
            });
        }

        Ok(Scenario {
            name: self.name.clone(),
            system,
            x0,
            model,
            trigger,
            delta: t.delta,
            reference: self.reference,
            chirp: l.chirp,
            learning_samples: l.samples,
            events,
            steps,
            seed: r.seed,
            config_hash: self.config_hash(),
        })
    }
}

/// Number of whole sample periods in `duration`, tolerating float noise.
fn whole_steps(duration: f64, ts: f64) -> u64 {
    let ratio = duration / ts;
    let nearest = ratio.round();
    if (ratio - nearest).abs() < 1e-9 * ratio.max(1.0) {
        nearest as u64
    } else {
        ratio.floor() as u64
    }
}

fn matrix(path: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let m = from_rows(rows).map_err(|msg| Error::config(path, msg))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(path, "entries must be finite"));
    }
    Ok(m)
}

fn square(path: &str, rows: &Rows, n: usize) -> Result<DMatrix<f64>> {
    let m = matrix(path, rows)?;
    if m.shape() != (n, n) {
        return Err(Error::config(
            path,
            format!("must be {n}x{n}, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m)
}

/// The key named by an unknown- or missing-field error; the message itself
/// carries the line and column.
fn toml_error_path(e: &toml::de::Error) -> String {
    e.message()
        .split('`')
        .nth(1)
        .filter(|_| e.message().contains("field"))
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
schema = 1
name = "t"

[system]
ts = 0.01
a = [[0.9]]
b = [[0.01]]
sigma = [[2.5e-5]]
f = [[0.0]]

[trigger]
mode = "approx"
eta = 0.05
delta = 0.02
tau_max = 3.5
mc_samples = 500
window = { count = 200 }

[learning]
samples = 300
chirp = { amplitude = 1.0, f0 = 0.05, f1 = 5.0, duration = 3.0 }

[run]
duration = 10.0
seed = 1
"#;

    fn field_of(err: Error) -> String {
        match err {
            Error::Config { path, .. } => path,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_builds_with_defaults() {
        let sc = ScenarioConfig::from_toml_str(MINIMAL).unwrap().build().unwrap();
        assert_eq!(sc.steps, 1000);
        assert_eq!(sc.reference, ReferenceSignal::Zero);
        assert_eq!(sc.model.version(), 0);
        assert_eq!(sc.model.a_cl()[(0, 0)], 0.9);
        assert_eq!(sc.trigger.window, WindowMode::Count(200));
        assert_eq!(sc.config_hash.len(), 64);
    }

    #[test]
    fn non_square_a_names_the_field() {
        let text = MINIMAL.replace("a = [[0.9]]", "a = [[0.9, 0.1]]");
        let err = ScenarioConfig::from_toml_str(&text).unwrap().build().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(field_of(err), "system.a");
    }

    #[test]
    fn ragged_rows_name_the_field() {
        let text = MINIMAL.replace("sigma = [[2.5e-5]]", "sigma = [[2.5e-5], [1.0, 2.0]]");
        let err = ScenarioConfig::from_toml_str(&text).unwrap().build().unwrap_err();
        assert_eq!(field_of(err), "system.sigma");
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let text = MINIMAL.replace("seed = 1", "seed = 1\nsede = 2");
        let err = ScenarioConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn approx_window_must_be_smaller_than_mc_samples() {
        let text = MINIMAL.replace("mc_samples = 500", "mc_samples = 200");
        let err = ScenarioConfig::from_toml_str(&text).unwrap().build().unwrap_err();
        assert_eq!(field_of(err), "trigger");
    }

    #[test]
    fn events_must_increase_and_stay_in_range() {
        let ev = "\n[[events]]\ntime = 5.0\na = [[0.8]]\n[[events]]\ntime = 5.0\na = [[0.7]]\n";
        let err = ScenarioConfig::from_toml_str(&format!("{MINIMAL}{ev}"))
            .unwrap()
            .build()
            .unwrap_err();
        assert_eq!(field_of(err), "events[1].time");
        let ev = "\n[[events]]\ntime = 11.0\na = [[0.8]]\n";
        let err = ScenarioConfig::from_toml_str(&format!("{MINIMAL}{ev}"))
            .unwrap()
            .build()
            .unwrap_err();
        assert_eq!(field_of(err), "events[0].time");
        let ev = "\n[[events]]\ntime = 1.0\na = [[1.2]]\n";
        let err = ScenarioConfig::from_toml_str(&format!("{MINIMAL}{ev}"))
            .unwrap()
            .build()
            .unwrap_err();
        assert_eq!(field_of(err), "events[0].a");
    }

    #[test]
    fn short_chirp_is_rejected() {
        let text = MINIMAL.replace("samples = 300", "samples = 400");
        let err = ScenarioConfig::from_toml_str(&text).unwrap().build().unwrap_err();
        assert_eq!(field_of(err), "learning.chirp.duration");
    }

    #[test]
    fn window_needs_exactly_one_mode() {
        let text = MINIMAL.replace("{ count = 200 }", "{ count = 200, seconds = 5.0 }");
        let err = ScenarioConfig::from_toml_str(&text).unwrap().build().unwrap_err();
        assert_eq!(field_of(err), "trigger.window");
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.config_hash(), again.config_hash());
    }

    #[test]
    fn whole_steps_tolerates_float_noise() {
        assert_eq!(whole_steps(0.0, 0.01), 0);
        assert_eq!(whole_steps(1200.0, 0.01), 120_000);
        assert_eq!(whole_steps(0.015, 0.01), 1);
    }
}
