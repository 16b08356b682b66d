//! Learning trigger: compares the windowed mean of observed
//! inter-communication times with the model's expected stopping time.
//!
//! Thresholds come from Hoeffding's inequality for variables bounded in
//! `[0, tau_max]`:
//!
//! * against the exact expectation, `kappa = tau_max sqrt(ln(2/eta) / (2N))`;
//! * against an `M`-sample simulated mean with `M > N`,
//!   `kappa = tau_max sqrt(2 ln(4/eta) / N)`.
//!
//! Either keeps the false-positive probability under a perfect model below
//! `eta`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stopping::StoppingTimeEstimate;

pub fn kappa_exact(eta: f64, n: usize, tau_max: f64) -> f64 {
    tau_max * (-(eta / 2.0).ln() / (2.0 * n as f64)).sqrt()
}

pub fn kappa_approx(eta: f64, n: usize, tau_max: f64) -> f64 {
    tau_max * (-(2.0 / n as f64) * (eta / 4.0).ln()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerMode {
    Exact,
    Approx,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum WindowMode {
    /// Mean of the last `count` samples.
    Count(usize),
    /// Mean of the samples observed in the trailing `seconds`.
    Duration {
        seconds: f64,
        #[serde(default = "default_min_samples")]
        min_samples: usize,
    },
}

fn default_min_samples() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerConfig {
    pub eta: f64,
    pub window: WindowMode,
    /// Simulated samples behind the model-side mean.
    pub mc_samples: usize,
    pub tau_max: f64,
    /// Fixed threshold; `None` derives it from `eta`, the window size and
    /// `tau_max`. A fixed value carries no false-positive guarantee.
    pub kappa_override: Option<f64>,
    /// Seconds the raw condition must hold before learning starts.
    pub sustain: f64,
    pub mode: TriggerMode,
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eta must lie in (0, 1), got {}",
                self.eta
            )));
        }
        if !(self.tau_max > 0.0 && self.tau_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tau_max must be positive, got {}",
                self.tau_max
            )));
        }
        if !(self.sustain >= 0.0 && self.sustain.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sustain must be non-negative, got {}",
                self.sustain
            )));
        }
        if let Some(k) = self.kappa_override {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "kappa must be positive, got {k}"
                )));
            }
        }
        match self.window {
            WindowMode::Count(n) => {
                if n == 0 {
                    return Err(Error::InvalidParameter("window count must be >= 1".into()));
                }
                if self.mode == TriggerMode::Approx && self.mc_samples <= n {
                    return Err(Error::InvalidParameter(format!(
                        "approximated trigger needs more simulated samples than window samples (M = {} <= N = {n})",
                        self.mc_samples
                    )));
                }
            }
            WindowMode::Duration {
                seconds,
                min_samples,
            } => {
                if !(seconds > 0.0 && seconds.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "window duration must be positive, got {seconds}"
                    )));
                }
                if min_samples == 0 {
                    return Err(Error::InvalidParameter("min_samples must be >= 1".into()));
                }
                if self.mode == TriggerMode::Approx && self.mc_samples <= min_samples {
                    return Err(Error::InvalidParameter(format!(
                        "approximated trigger needs M = {} > min_samples = {min_samples}",
                        self.mc_samples
                    )));
                }
            }
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidParameter("mc_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Threshold for a window holding `n` samples.
    pub fn kappa(&self, n: usize) -> f64 {
        if let Some(k) = self.kappa_override {
            return k;
        }
        match self.mode {
            TriggerMode::Exact => kappa_exact(self.eta, n, self.tau_max),
            TriggerMode::Approx => kappa_approx(self.eta, n, self.tau_max),
        }
    }
}

/// Recent inter-communication times.
#[derive(Debug, Clone)]
pub struct TauWindow {
    mode: WindowMode,
    /// `(time observed, tau)`
    samples: VecDeque<(f64, f64)>,
    epoch: f64,
    mean: Option<f64>,
}

impl TauWindow {
    pub fn new(mode: WindowMode, epoch: f64) -> Self {
        Self {
            mode,
            samples: VecDeque::new(),
            epoch,
            mean: None,
        }
    }

    pub fn mode(&self) -> WindowMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn epoch(&self) -> f64 {
        self.epoch
    }

    /// Mean of the current contents, even before the window is ready.
    pub fn mean(&self) -> Option<f64> {
        self.mean
    }

    pub fn push(&mut self, t: f64, tau: f64) {
        self.samples.push_back((t, tau));
        if let WindowMode::Count(n) = self.mode {
            while self.samples.len() > n {
                self.samples.pop_front();
            }
        }
        self.expire(t);
        self.recompute();
    }

    /// Drops samples older than the trailing duration, as seen at time `now`.
    pub fn advance_to(&mut self, now: f64) {
        if self.expire(now) {
            self.recompute();
        }
    }

    /// Empties the window and starts a new epoch at `t`.
    pub fn reset(&mut self, t: f64) {
        self.samples.clear();
        self.epoch = t;
        self.mean = None;
    }

    pub fn is_ready(&self, now: f64) -> bool {
        match self.mode {
            WindowMode::Count(n) => self.samples.len() >= n,
            WindowMode::Duration {
                seconds,
                min_samples,
            } => now - self.epoch >= seconds - 1e-9 && self.samples.len() >= min_samples,
        }
    }

    fn expire(&mut self, now: f64) -> bool {
        let WindowMode::Duration { seconds, .. } = self.mode else {
            return false;
        };
        let mut dropped = false;
        while let Some(&(t, _)) = self.samples.front() {
            if t <= now - seconds + 1e-9 {
                self.samples.pop_front();
                dropped = true;
            } else {
                break;
            }
        }
        dropped
    }

    fn recompute(&mut self) {
        self.mean = if self.samples.is_empty() {
            None
        } else {
            Some(self.samples.iter().map(|s| s.1).sum::<f64>() / self.samples.len() as f64)
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Not enough data to decide.
    NotReady,
    Consistent,
    Deviating,
}

impl Decision {
    pub fn fired(self) -> bool {
        self == Decision::Deviating
    }

    pub fn as_flag(self) -> Option<bool> {
        match self {
            Decision::NotReady => None,
            Decision::Consistent => Some(false),
            Decision::Deviating => Some(true),
        }
    }
}

fn decide(window: &TauWindow, now: f64, reference: f64, kappa: f64) -> Decision {
    match window.mean() {
        Some(mean) if window.is_ready(now) => {
            if (mean - reference).abs() >= kappa {
                Decision::Deviating
            } else {
                Decision::Consistent
            }
        }
        _ => Decision::NotReady,
    }
}

/// `|mean(window) - expected_tau| >= kappa`, once the window is ready.
pub fn evaluate_exact(window: &TauWindow, now: f64, expected_tau: f64, kappa: f64) -> Decision {
    decide(window, now, expected_tau, kappa)
}

/// `|mean(window) - simulated mean| >= kappa`, once the window is ready.
pub fn evaluate_approx(
    window: &TauWindow,
    now: f64,
    sim_estimate: &StoppingTimeEstimate,
    kappa: f64,
) -> Decision {
    decide(window, now, sim_estimate.mean, kappa)
}

/// Passes a raw decision through only after it has been true continuously
/// for `sustain` seconds.
#[derive(Debug, Clone)]
pub struct SustainedGate {
    sustain: f64,
    since: Option<f64>,
}

impl SustainedGate {
    pub fn new(sustain: f64) -> Self {
        Self {
            sustain,
            since: None,
        }
    }

    pub fn sustain(&self) -> f64 {
        self.sustain
    }

    /// Time at which the current run of raw-true decisions started.
    pub fn onset(&self) -> Option<f64> {
        self.since
    }

    pub fn update(&mut self, t: f64, raw: bool) -> bool {
        if !raw {
            self.since = None;
            return false;
        }
        let since = *self.since.get_or_insert(t);
        t - since >= self.sustain - 1e-9 * self.sustain.max(1.0)
    }

    pub fn reset(&mut self) {
        self.since = None;
    }
}

/// Applies a [`SustainedGate`] to a time-ordered series of raw decisions.
pub fn sustained_gate(raw: &[(f64, bool)], sustain: f64) -> Vec<bool> {
    let mut gate = SustainedGate::new(sustain);
    raw.iter().map(|&(t, r)| gate.update(t, r)).collect()
}
