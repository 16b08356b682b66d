//! Least-squares identification of the closed-loop pair `(A_cl, B)` and the
//! process-noise covariance from chirp-excited experiments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::lti::{eval_reference, Chirp, LinearSystem, ReferenceSignal};
use crate::protocol::ModelEstimate;

/// Gram matrices with a larger condition number count as not excited.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// `X` stacks `[x(k); r(k)]` columns, `Y` the matching `x(k+1)` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    n: usize,
}

impl RegressionData {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.x.nrows() - self.n
    }

    /// Number of regression columns.
    pub fn m(&self) -> usize {
        self.x.ncols()
    }
}

/// One recorded transition `(x(k), r(k), x(k+1))`.
pub type Sample = (DVector<f64>, DVector<f64>, DVector<f64>);

pub fn assemble(trajectory: &[Sample]) -> Result<RegressionData> {
    let Some((x0, r0, _)) = trajectory.first() else {
        return Err(Error::InvalidParameter("trajectory is empty".into()));
    };
    let n = x0.len();
    let q = r0.len();
    let m = trajectory.len();
    let mut x = DMatrix::zeros(n + q, m);
    let mut y = DMatrix::zeros(n, m);
    for (i, (xk, rk, xn)) in trajectory.iter().enumerate() {
        if xk.len() != n || rk.len() != q || xn.len() != n {
            return Err(Error::Dimension(format!(
                "sample {i} has dimensions ({}, {}, {}), expected ({n}, {q}, {n})",
                xk.len(),
                rk.len(),
                xn.len()
            )));
        }
        x.view_mut((0, i), (n, 1)).copy_from(xk);
        x.view_mut((n, i), (q, 1)).copy_from(rk);
        y.column_mut(i).copy_from(xn);
    }
    Ok(RegressionData { x, y, n })
}

/// Least-squares `[A_cl B] = Y X^T (X X^T)^-1`, computed through a QR
/// factorisation of `X^T`, and the residual covariance normalised by
/// `M - n - q`. The returned model carries `prev_version + 1`.
pub fn ols_fit(d: &RegressionData, prev_version: u64) -> Result<ModelEstimate> {
    let (n, q, m) = (d.n(), d.q(), d.m());
    let p = n + q;
    if m < p {
        return Err(Error::InvalidParameter(format!(
            "need at least n + q = {p} samples, got {m}"
        )));
    }

    let xt = d.x.transpose();
    let sv = xt.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 && smax > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    if !(condition < MAX_GRAM_CONDITION) {
        return Err(Error::InsufficientExcitation { condition });
    }

    let qr = xt.qr();
    let qty = qr.q().transpose() * d.y.transpose();
    let theta_t = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or(Error::InsufficientExcitation { condition })?;
    let theta = theta_t.transpose();

    let a_cl = theta.columns(0, n).into_owned();
    let b = theta.columns(n, q).into_owned();
    let residual = &d.y - &theta * &d.x;
    let dof = m - p;
    let sigma = if dof == 0 {
        DMatrix::zeros(n, n)
    } else {
        let s = &residual * residual.transpose() / dof as f64;
        (&s + s.transpose()) * 0.5
    };
    ModelEstimate::new(a_cl, b, sigma, prev_version + 1)
}

#[derive(Debug, Clone)]
pub struct LearningOutcome {
    pub model: ModelEstimate,
    /// True state after the experiment.
    pub final_state: DVector<f64>,
    /// Simulated steps consumed by the experiment.
    pub steps: u64,
}

/// A chirp-excited identification experiment, advanced one transition at a
/// time so that a caller can change the true system mid-experiment.
#[derive(Debug, Clone)]
pub struct LearningSession {
    reference: ReferenceSignal,
    samples: usize,
    prev_version: u64,
    trajectory: Vec<Sample>,
    x: DVector<f64>,
}

impl LearningSession {
    /// Checks that `samples` transitions can identify an `n`-state,
    /// `q`-input model and that the chirp lasts long enough to cover them.
    pub fn new(
        n: usize,
        q: usize,
        ts: f64,
        chirp: &Chirp,
        samples: usize,
        x0: &DVector<f64>,
        prev_version: u64,
    ) -> Result<Self> {
        chirp.validate()?;
        if samples < n + q {
            return Err(Error::InvalidParameter(format!(
                "learning experiment needs at least n + q = {} samples, got {samples}",
                n + q
            )));
        }
        if chirp.duration < samples as f64 * ts * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "chirp lasts {} s but the experiment needs {} s",
                chirp.duration,
                samples as f64 * ts
            )));
        }
        if x0.len() != n {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, system has n = {n}",
                x0.len()
            )));
        }
        Ok(Self {
            reference: ReferenceSignal::chirp(*chirp),
            samples,
            prev_version,
            trajectory: Vec::with_capacity(samples),
            x: x0.clone(),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.trajectory.len() >= self.samples
    }

    pub fn steps_taken(&self) -> usize {
        self.trajectory.len()
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    /// One transition of `sys` under the chirp; returns the new true state.
    pub fn step<R: Rng + ?Sized>(&mut self, sys: &LinearSystem, rng: &mut R) -> &DVector<f64> {
        let j = self.trajectory.len() as u64;
        let r = eval_reference(&self.reference, j, sys.ts(), sys.q());
        let noise = sys.noise_sampler().sample(rng);
        let next = sys.step(&self.x, &r, &noise);
        let prev = std::mem::replace(&mut self.x, next.clone());
        self.trajectory.push((prev, r, next));
        &self.x
    }

    pub fn finish(self) -> Result<LearningOutcome> {
        if !self.is_complete() {
            return Err(Error::InvalidParameter(format!(
                "experiment stopped after {} of {} samples",
                self.trajectory.len(),
                self.samples
            )));
        }
        let model = ols_fit(&assemble(&self.trajectory)?, self.prev_version)?;
        Ok(LearningOutcome {
            model,
            final_state: self.x,
            steps: self.samples as u64,
        })
    }
}

/// Drives the true closed loop with `chirp` for `samples` transitions from
/// `x0` (so `samples + 1` recorded states), then fits a model.
pub fn run_learning_experiment<R: Rng + ?Sized>(
    sys: &LinearSystem,
    chirp: &Chirp,
    samples: usize,
    x0: &DVector<f64>,
    prev_version: u64,
    rng: &mut R,
) -> Result<LearningOutcome> {
    let mut session =
        LearningSession::new(sys.n(), sys.q(), sys.ts(), chirp, samples, x0, prev_version)?;
    while !session.is_complete() {
        session.step(sys, rng);
    }
    session.finish()
}
