//! Discrete-time linear Gaussian plants under state feedback, and the
//! reference signals that drive them.
//!
//! The plant is `x(k+1) = A x(k) + B u(k) + e(k)` with `u(k) = F x(k) + r(k)`,
//! i.e. `x(k+1) = A_cl x(k) + B r(k) + e(k)` with `A_cl = A + B F` and
//! `e(k) ~ N(0, Sigma)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_covariance, psd_factor, spectral_radius};

#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    f: DMatrix<f64>,
    ts: f64,
    a_cl: DMatrix<f64>,
    noise: NoiseSampler,
}

impl LinearSystem {
    /// Validates dimensions, the covariance and closed-loop stability.
    /// The open-loop `a` may be unstable as long as `a + b f` is not.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
        f: DMatrix<f64>,
        ts: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let q = b.ncols();
        if b.nrows() != n || q == 0 {
            return Err(Error::Dimension(format!(
                "B must be {n}xq with q >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if sigma.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "Sigma must be {n}x{n}, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if f.shape() != (q, n) {
            return Err(Error::Dimension(format!(
                "F must be {q}x{n}, got {}x{}",
                f.nrows(),
                f.ncols()
            )));
        }
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sample time must be positive, got {ts}"
            )));
        }
        let sigma = check_covariance(&sigma, "Sigma")?;
        let a_cl = &a + &b * &f;
        let rho = spectral_radius(&a_cl);
        if !(rho < 1.0) {
            return Err(Error::Unstable(rho));
        }
        let noise = NoiseSampler::new(&sigma)?;
        Ok(Self {
            a,
            b,
            sigma,
            f,
            ts,
            a_cl,
            noise,
        })
    }

    /// Convenience constructor for scalar plants.
    pub fn scalar(a: f64, b: f64, sigma: f64, f: f64, ts: f64) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(b), m(sigma), m(f), ts)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn q(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn closed_loop(&self) -> &DMatrix<f64> {
        &self.a_cl
    }

    pub fn noise_sampler(&self) -> &NoiseSampler {
        &self.noise
    }

    /// Same feedback, input gain and sample time with new open-loop dynamics.
    pub fn with_a(&self, a: DMatrix<f64>) -> Result<Self> {
        Self::new(a, self.b.clone(), self.sigma.clone(), self.f.clone(), self.ts)
    }

    pub fn with_sigma(&self, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), sigma, self.f.clone(), self.ts)
    }

    pub fn step(&self, x: &DVector<f64>, r: &DVector<f64>, noise: &DVector<f64>) -> DVector<f64> {
        step(self, x, r, noise)
    }
}

/// `A + B F`.
pub fn make_closed_loop(sys: &LinearSystem) -> DMatrix<f64> {
    sys.a() + sys.b() * sys.f()
}

/// One closed-loop transition `A_cl x + B r + noise`.
pub fn step(
    sys: &LinearSystem,
    x: &DVector<f64>,
    r: &DVector<f64>,
    noise: &DVector<f64>,
) -> DVector<f64> {
    sys.closed_loop() * x + sys.b() * r + noise
}

/// Draws `N(0, Sigma)` vectors through a fixed factor `L` with `L L^T = Sigma`.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    factor: DMatrix<f64>,
}

impl NoiseSampler {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            factor: psd_factor(sigma, "Sigma")?,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let mut w = DVector::zeros(self.dim());
        self.sample_into(rng, &mut w, &mut out);
        out
    }

    /// Allocation-free variant; `scratch` and `out` must have length `dim()`.
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        scratch: &mut DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        for w in scratch.iter_mut() {
            *w = rng.sample(StandardNormal);
        }
        out.gemv(1.0, &self.factor, scratch, 0.0);
    }
}

pub fn sample_noise<R: Rng + ?Sized>(sigma: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Ok(NoiseSampler::new(sigma)?.sample(rng))
}

/// Linear-sweep chirp `amplitude * cos(2 pi phi(t))` whose instantaneous
/// frequency rises from `f0` to `f1` over `duration` seconds and stays at
/// `f1` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chirp {
    pub amplitude: f64,
    pub f0: f64,
    pub f1: f64,
    pub duration: f64,
}

impl Chirp {
    pub fn new(amplitude: f64, f0: f64, f1: f64, duration: f64) -> Result<Self> {
        let c = Self {
            amplitude,
            f0,
            f1,
            duration,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f0 > 0.0 && self.f0 < self.f1 && self.f1.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "chirp needs 0 < f0 < f1, got f0 = {}, f1 = {}",
                self.f0, self.f1
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "chirp duration must be positive, got {}",
                self.duration
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidParameter("chirp amplitude must be finite".into()));
        }
        Ok(())
    }

    pub fn frequency(&self, t: f64) -> f64 {
        if t >= self.duration {
            self.f1
        } else {
            self.f0 + (self.f1 - self.f0) * t.max(0.0) / self.duration
        }
    }

    /// Phase in cycles.
    pub fn phase(&self, t: f64) -> f64 {
        let sweep = |t: f64| self.f0 * t + 0.5 * (self.f1 - self.f0) * t * t / self.duration;
        if t <= self.duration {
            sweep(t)
        } else {
            sweep(self.duration) + self.f1 * (t - self.duration)
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.phase(t)).cos()
    }
}

/// Scalar reference waveform; it is applied identically to every input
/// channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceSignal {
    Zero,
    Cosine {
        amplitude: f64,
        /// rad/s
        omega: f64,
    },
    Chirp {
        amplitude: f64,
        f0: f64,
        f1: f64,
        duration: f64,
    },
}

impl ReferenceSignal {
    pub fn chirp(c: Chirp) -> Self {
        ReferenceSignal::Chirp {
            amplitude: c.amplitude,
            f0: c.f0,
            f1: c.f1,
            duration: c.duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ReferenceSignal::Zero => Ok(()),
            ReferenceSignal::Cosine { amplitude, omega } => {
                if amplitude.is_finite() && omega.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(
                        "cosine amplitude and omega must be finite".into(),
                    ))
                }
            }
            ReferenceSignal::Chirp {
                amplitude,
                f0,
                f1,
                duration,
            } => Chirp::new(amplitude, f0, f1, duration).map(|_| ()),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ReferenceSignal::Zero => 0.0,
            ReferenceSignal::Cosine { amplitude, omega } => amplitude * (omega * t).cos(),
            ReferenceSignal::Chirp {
                amplitude,
                f0,
                f1,
                duration,
            } => Chirp {
                amplitude,
                f0,
                f1,
                duration,
            }
            .value(t),
        }
    }
}

/// Reference at step `k`, i.e. at `t = k * ts`, as a `q`-vector.
pub fn eval_reference(sig: &ReferenceSignal, k: u64, ts: f64, q: usize) -> DVector<f64> {
    DVector::from_element(q, sig.value(k as f64 * ts))
}
