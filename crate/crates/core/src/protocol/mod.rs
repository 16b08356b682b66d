//! Sender/receiver prediction, reset and state-trigger protocol.
//!
//! Both agents run the same predictor `x_hat(k+1) = A_cl_hat x_hat(k) + B_hat r(k)`.
//! The sender sees the true state; when `||x - x_hat|| >= delta`, or when
//! `tau_max` has elapsed since the last transmission, it sends the state and
//! both sides reset their prediction to it.

pub mod wire;

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::check_covariance;
use crate::lti::LinearSystem;
use wire::{decode_message, encode_message, Message};

/// Largest prediction mismatch between the two agents before a run aborts.
pub const LOCKSTEP_TOLERANCE: f64 = 1e-12;

/// Prediction model shared by both agents.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    a_cl: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    version: u64,
}

impl ModelEstimate {
    pub fn new(
        a_cl: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
        version: u64,
    ) -> Result<Self> {
        let n = a_cl.nrows();
        if n == 0 || !a_cl.is_square() {
            return Err(Error::Dimension(format!(
                "model A_cl must be square and non-empty, got {}x{}",
                a_cl.nrows(),
                a_cl.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "model B must be {n}xq, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if sigma.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "model Sigma must be {n}x{n}, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let sigma = check_covariance(&sigma, "model Sigma")?;
        Ok(Self {
            a_cl,
            b,
            sigma,
            version,
        })
    }

    /// The model that matches `sys` exactly.
    pub fn from_system(sys: &LinearSystem, version: u64) -> Self {
        Self {
            a_cl: sys.closed_loop().clone(),
            b: sys.b().clone(),
            sigma: sys.sigma().clone(),
            version,
        }
    }

    pub fn n(&self) -> usize {
        self.a_cl.nrows()
    }

    pub fn q(&self) -> usize {
        self.b.ncols()
    }

    pub fn a_cl(&self) -> &DMatrix<f64> {
        &self.a_cl
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn predict(&self, x_hat: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
        &self.a_cl * x_hat + &self.b * r
    }

    pub fn to_message(&self) -> Message {
        Message::ModelUpdate {
            version: self.version,
            a_cl: self.a_cl.clone(),
            b: self.b.clone(),
            sigma: self.sigma.clone(),
        }
    }

    pub fn from_message(msg: Message) -> Result<Self> {
        match msg {
            Message::ModelUpdate {
                version,
                a_cl,
                b,
                sigma,
            } => Self::new(a_cl, b, sigma, version),
            Message::StateUpdate { .. } => Err(Error::Transport(
                "expected a model update, got a state update".into(),
            )),
        }
    }
}

/// One agent's copy of the prediction.
#[derive(Debug, Clone)]
pub struct PredictorState {
    x_hat: DVector<f64>,
    k: u64,
    model: Arc<ModelEstimate>,
}

impl PredictorState {
    pub fn new(model: Arc<ModelEstimate>, x0: DVector<f64>) -> Self {
        Self {
            x_hat: x0,
            k: 0,
            model,
        }
    }

    pub fn x_hat(&self) -> &DVector<f64> {
        &self.x_hat
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn model(&self) -> &Arc<ModelEstimate> {
        &self.model
    }

    pub fn advance(&mut self, r: &DVector<f64>) {
        self.x_hat = predict(self, r);
        self.k += 1;
    }

    pub fn reset(&mut self, x: &DVector<f64>) {
        self.x_hat.copy_from(x);
    }

    pub fn adopt(&mut self, model: Arc<ModelEstimate>, x: &DVector<f64>) {
        self.model = model;
        self.reset(x);
    }
}

/// One-step prediction with the predictor's current model.
pub fn predict(p: &PredictorState, r: &DVector<f64>) -> DVector<f64> {
    p.model.predict(&p.x_hat, r)
}

/// `||x - x_hat||_2 >= delta`.
pub fn state_trigger(x: &DVector<f64>, x_hat: &DVector<f64>, delta: f64) -> bool {
    (x - x_hat).norm() >= delta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    StateUpdate,
    ModelUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerCause {
    Threshold,
    TauMaxForced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommEvent {
    pub step: u64,
    pub kind: PayloadKind,
    pub bytes: usize,
    /// Set for state updates only.
    pub cause: Option<TriggerCause>,
}

pub trait Transport {
    fn send(&mut self, frame: Vec<u8>) -> Result<()>;
    fn receive(&mut self) -> Result<Option<Vec<u8>>>;
    fn messages(&self) -> u64;
    fn bytes(&self) -> u64;
}

/// In-memory FIFO that never drops, delays or reorders frames.
#[derive(Debug, Default, Clone)]
pub struct LosslessTransport {
    queue: VecDeque<Vec<u8>>,
    messages: u64,
    bytes: u64,
}

impl LosslessTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for LosslessTransport {
    fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        self.messages += 1;
        self.bytes += frame.len() as u64;
        self.queue.push_back(frame);
        Ok(())
    }

    fn receive(&mut self) -> Result<Option<Vec<u8>>> {
        Ok(self.queue.pop_front())
    }

    fn messages(&self) -> u64 {
        self.messages
    }

    fn bytes(&self) -> u64 {
        self.bytes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Prediction error norm before any reset.
    pub z_norm: f64,
    pub event: Option<CommEvent>,
    /// Inter-communication time ending at this step, in seconds.
    pub tau: Option<f64>,
}

/// Converts a time bound to whole steps, tolerating float noise in
/// `tau_max / ts`.
pub fn tau_max_steps(tau_max: f64, ts: f64) -> Result<u64> {
    if !(tau_max > 0.0 && ts > 0.0 && tau_max.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "tau_max and Ts must be positive, got {tau_max} and {ts}"
        )));
    }
    let ratio = tau_max / ts;
    let nearest = ratio.round();
    let steps = if (ratio - nearest).abs() < 1e-9 * ratio.max(1.0) {
        nearest
    } else {
        ratio.floor()
    };
    if steps < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "tau_max = {tau_max} is shorter than one sample period {ts}"
        )));
    }
    Ok(steps as u64)
}

/// A sender and a receiver joined by a transport.
#[derive(Debug, Clone)]
pub struct EtseLink<T: Transport = LosslessTransport> {
    sender: PredictorState,
    receiver: PredictorState,
    transport: T,
    delta: f64,
    tau_max_steps: u64,
    ts: f64,
    steps_since_comm: u64,
}

impl EtseLink<LosslessTransport> {
    pub fn lossless(
        model: ModelEstimate,
        x0: DVector<f64>,
        delta: f64,
        tau_max: f64,
        ts: f64,
    ) -> Result<Self> {
        Self::new(model, x0, delta, tau_max, ts, LosslessTransport::new())
    }
}

impl<T: Transport> EtseLink<T> {
    pub fn new(
        model: ModelEstimate,
        x0: DVector<f64>,
        delta: f64,
        tau_max: f64,
        ts: f64,
        transport: T,
    ) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must be positive, got {delta}"
            )));
        }
        if x0.len() != model.n() {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, model has n = {}",
                x0.len(),
                model.n()
            )));
        }
        let tau_max_steps = tau_max_steps(tau_max, ts)?;
        let model = Arc::new(model);
        Ok(Self {
            sender: PredictorState::new(model.clone(), x0.clone()),
            receiver: PredictorState::new(model, x0),
            transport,
            delta,
            tau_max_steps,
            ts,
            steps_since_comm: 0,
        })
    }

    pub fn sender(&self) -> &PredictorState {
        &self.sender
    }

    pub fn receiver(&self) -> &PredictorState {
        &self.receiver
    }

    pub fn model(&self) -> &ModelEstimate {
        &self.sender.model
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn tau_max_steps(&self) -> u64 {
        self.tau_max_steps
    }

    /// `tau_max` as realised on the sample grid.
    pub fn tau_max(&self) -> f64 {
        self.tau_max_steps as f64 * self.ts
    }

    pub fn steps_since_comm(&self) -> u64 {
        self.steps_since_comm
    }

    /// Advances both predictors with `r`, then runs the state trigger against
    /// the new true state `x_true`.
    pub fn step(&mut self, x_true: &DVector<f64>, r: &DVector<f64>) -> Result<StepOutcome> {
        if x_true.len() != self.sender.x_hat.len() {
            return Err(Error::Dimension(format!(
                "true state has {} entries, predictor has {}",
                x_true.len(),
                self.sender.x_hat.len()
            )));
        }
        self.sender.advance(r);
        self.receiver.advance(r);
        self.steps_since_comm += 1;
        let step = self.sender.k;

        let z_norm = (x_true - &self.sender.x_hat).norm();
        let threshold = z_norm >= self.delta;
        let forced = self.steps_since_comm >= self.tau_max_steps;

        let mut outcome = StepOutcome {
            z_norm,
            event: None,
            tau: None,
        };
        if threshold || forced {
            // a sample that reaches the cap is attributed to the cap, so that
            // tau == tau_max always means a forced transmission
            let cause = if forced {
                TriggerCause::TauMaxForced
            } else {
                TriggerCause::Threshold
            };
            let frame = encode_message(&Message::StateUpdate {
                step,
                state: x_true.iter().copied().collect(),
            });
            let bytes = frame.len();
            self.transport.send(frame)?;
            self.sender.reset(x_true);
            self.deliver_state(step)?;

            outcome.tau = Some(self.steps_since_comm as f64 * self.ts);
            outcome.event = Some(CommEvent {
                step,
                kind: PayloadKind::StateUpdate,
                bytes,
                cause: Some(cause),
            });
            self.steps_since_comm = 0;
        }
        self.check_lockstep()?;
        Ok(outcome)
    }

    /// Sends `model` followed by a state frame; both agents adopt the model
    /// and restart their prediction from `x_true`.
    pub fn broadcast_model(
        &mut self,
        model: ModelEstimate,
        x_true: &DVector<f64>,
    ) -> Result<CommEvent> {
        if model.n() != self.sender.x_hat.len() {
            return Err(Error::Dimension(format!(
                "model has n = {}, link has {}",
                model.n(),
                self.sender.x_hat.len()
            )));
        }
        let step = self.sender.k;
        let model_frame = encode_message(&model.to_message());
        let state_frame = encode_message(&Message::StateUpdate {
            step,
            state: x_true.iter().copied().collect(),
        });
        let bytes = model_frame.len() + state_frame.len();
        self.transport.send(model_frame)?;
        self.transport.send(state_frame)?;

        let model = Arc::new(model);
        self.sender.adopt(model, x_true);

        let frame = self
            .transport
            .receive()?
            .ok_or_else(|| Error::Transport("model frame was not delivered".into()))?;
        let received = Arc::new(ModelEstimate::from_message(decode_message(&frame)?)?);
        self.receiver.model = received;
        self.deliver_state(step)?;
        self.steps_since_comm = 0;
        self.check_lockstep()?;
        Ok(CommEvent {
            step,
            kind: PayloadKind::ModelUpdate,
            bytes,
            cause: None,
        })
    }

    /// Advances both predictors' clocks without predicting, for periods in
    /// which estimation is suspended.
    pub fn skip_steps(&mut self, steps: u64) {
        self.sender.k += steps;
        self.receiver.k += steps;
    }

    fn deliver_state(&mut self, step: u64) -> Result<()> {
        let frame = self
            .transport
            .receive()?
            .ok_or_else(|| Error::Transport("state frame was not delivered".into()))?;
        match decode_message(&frame)? {
            Message::StateUpdate { step: s, state } if s == step => {
                self.receiver.reset(&DVector::from_vec(state));
                Ok(())
            }
            Message::StateUpdate { step: s, .. } => Err(Error::Transport(format!(
                "state frame for step {s} arrived at step {step}"
            ))),
            Message::ModelUpdate { .. } => Err(Error::Transport(
                "expected a state update, got a model update".into(),
            )),
        }
    }

    fn check_lockstep(&self) -> Result<()> {
        let deviation = (&self.sender.x_hat - &self.receiver.x_hat).amax();
        if deviation > LOCKSTEP_TOLERANCE || self.sender.model != self.receiver.model {
            return Err(Error::Lockstep {
                step: self.sender.k,
                deviation,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn scalar_model(a: f64, b: f64, s: f64) -> ModelEstimate {
        let m = |v| DMatrix::from_element(1, 1, v);
        ModelEstimate::new(m(a), m(b), m(s), 0).unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn predict_examples() {
        let p = PredictorState::new(Arc::new(scalar_model(0.85, 0.005, 2.5e-5)), v(0.0));
        assert_eq!(predict(&p, &v(0.0))[0], 0.0);
        let p = PredictorState::new(Arc::new(scalar_model(0.85, 0.005, 2.5e-5)), v(1.0));
        assert_relative_eq!(predict(&p, &v(1.0))[0], 0.855, epsilon = 1e-15);

        let id = ModelEstimate::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 2),
            0,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -2.0]);
        let p = PredictorState::new(Arc::new(id), x.clone());
        assert_eq!(predict(&p, &v(4.0)), x);
    }

    #[test]
    fn state_trigger_examples() {
        assert!(!state_trigger(&v(0.1), &v(0.1), 0.02));
        let x = DVector::from_vec(vec![0.03, 0.04]);
        assert!(state_trigger(&x, &DVector::zeros(2), 0.05));
        assert!(!state_trigger(&x, &DVector::zeros(2), 0.0500001));
        assert!(state_trigger(&v(0.03), &v(0.0), 0.02));
    }

    #[test]
    fn tau_max_steps_tolerates_float_noise() {
        assert_eq!(tau_max_steps(3.5, 0.01).unwrap(), 350);
        assert_eq!(tau_max_steps(0.035, 0.01).unwrap(), 3);
        assert!(tau_max_steps(0.001, 0.01).is_err());
    }

    #[test]
    fn perfect_model_without_noise_never_communicates() {
        let sys = LinearSystem::scalar(0.9, 0.01, 0.0, 0.0, 0.01).unwrap();
        let mut link =
            EtseLink::lossless(ModelEstimate::from_system(&sys, 0), v(0.2), 0.02, 1e6, 0.01)
                .unwrap();
        let mut x = v(0.2);
        for k in 0..5000u64 {
            let r = v((0.2 * k as f64 * 0.01).cos());
            x = sys.step(&x, &r, &v(0.0));
            let out = link.step(&x, &r).unwrap();
            assert!(out.event.is_none());
            assert!(out.z_norm < 1e-12);
        }
        assert_eq!(link.transport().messages(), 0);
    }

    #[test]
    fn tiny_delta_communicates_every_step() {
        let sys = LinearSystem::scalar(0.9, 0.01, 2.5e-5, 0.0, 0.01).unwrap();
        let mut link =
            EtseLink::lossless(ModelEstimate::from_system(&sys, 0), v(0.0), 1e-300, 3.5, 0.01)
                .unwrap();
        let mut rng = stream(5, 1);
        let mut x = v(0.0);
        for _ in 0..1000 {
            let noise = sys.noise_sampler().sample(&mut rng);
            x = sys.step(&x, &v(0.0), &noise);
            let out = link.step(&x, &v(0.0)).unwrap();
            assert_eq!(out.tau, Some(0.01));
            assert_eq!(out.event.unwrap().cause, Some(TriggerCause::Threshold));
        }
        assert_eq!(link.transport().messages(), 1000);
        assert_eq!(link.transport().bytes(), 25_000);
    }

    #[test]
    fn cap_forces_transmission() {
        let sys = LinearSystem::scalar(0.9, 0.01, 0.0, 0.0, 0.01).unwrap();
        let mut link =
            EtseLink::lossless(ModelEstimate::from_system(&sys, 0), v(0.0), 0.02, 0.05, 0.01)
                .unwrap();
        let mut causes = vec![];
        for _ in 0..12 {
            let out = link.step(&v(0.0), &v(0.0)).unwrap();
            if let Some(e) = out.event {
                causes.push((e.step, e.cause.unwrap(), out.tau.unwrap()));
            }
        }
        assert_eq!(
            causes,
            vec![
                (5, TriggerCause::TauMaxForced, 0.05),
                (10, TriggerCause::TauMaxForced, 0.05)
            ]
        );
    }

    #[test]
    fn broadcast_restores_lockstep_and_swaps_model() {
        let sys = LinearSystem::scalar(0.9, 0.01, 2.5e-5, 0.0, 0.01).unwrap();
        let mut link =
            EtseLink::lossless(scalar_model(0.85, 0.005, 2.5e-5), v(0.0), 0.02, 3.5, 0.01)
                .unwrap();
        let learned = ModelEstimate::from_system(&sys, 1);
        let ev = link.broadcast_model(learned.clone(), &v(0.07)).unwrap();
        assert_eq!(ev.kind, PayloadKind::ModelUpdate);
        assert_eq!(ev.bytes, 17 + 24 + 25);
        assert_eq!(link.receiver().model().as_ref(), &learned);
        assert_eq!(link.receiver().x_hat()[0], 0.07);
        // re-broadcasting the same model leaves predictions unchanged
        let before = predict(link.receiver(), &v(1.0));
        link.broadcast_model(learned, &v(0.07)).unwrap();
        assert_eq!(predict(link.receiver(), &v(1.0)), before);
        assert_eq!(link.steps_since_comm(), 0);
    }

    struct DroppingTransport;

    impl Transport for DroppingTransport {
        fn send(&mut self, _frame: Vec<u8>) -> Result<()> {
            Ok(())
        }
        fn receive(&mut self) -> Result<Option<Vec<u8>>> {
            Ok(None)
        }
        fn messages(&self) -> u64 {
            0
        }
        fn bytes(&self) -> u64 {
            0
        }
    }

    #[test]
    fn transport_failure_aborts() {
        let mut link = EtseLink::new(
            scalar_model(0.9, 0.01, 0.0),
            v(0.0),
            0.02,
            3.5,
            0.01,
            DroppingTransport,
        )
        .unwrap();
        assert!(matches!(link.step(&v(1.0), &v(0.0)), Err(Error::Transport(_))));
    }
}
