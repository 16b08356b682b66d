//! Expected inter-communication times.
//!
//! Under a perfect model the prediction error restarts at zero after every
//! transmission and evolves as `z(k+1) = A_cl z(k) + e(k)`, the sampled
//! version of the Ornstein-Uhlenbeck process `dZ = A Z dt + Q dW`. The
//! inter-communication time is the first time `||Z|| >= delta`.
//!
//! The estimator used by the learning trigger simulates the exact
//! transition at the protocol's own sample time, so simulated and observed
//! stopping times live on the same grid. The one-dimensional boundary value
//! solution is kept alongside as an independent continuous-time reference.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, check_covariance, expm, logm, psd_factor, psd_sqrt, spectral_radius};
use crate::protocol::tau_max_steps;
use crate::quad::integrate_rel;
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct OuProcess {
    acal: DMatrix<f64>,
    q: DMatrix<f64>,
    delta: f64,
    ts: f64,
    a_cl: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

impl OuProcess {
    /// Builds the process from continuous-time drift and diffusion.
    pub fn from_continuous(acal: DMatrix<f64>, q: DMatrix<f64>, delta: f64, ts: f64) -> Result<Self> {
        check_ou_args(&acal, delta, ts)?;
        if q.shape() != acal.shape() {
            return Err(Error::Dimension(format!(
                "Q must be {0}x{0}, got {1}x{2}",
                acal.nrows(),
                q.nrows(),
                q.ncols()
            )));
        }
        let a_cl = expm(&(&acal * ts));
        let sigma = linalg::symmetrize(&van_loan(&acal, &(&q * q.transpose()), ts).1);
        Ok(Self {
            acal,
            q,
            delta,
            ts,
            a_cl,
            sigma,
        })
    }

    pub fn acal(&self) -> &DMatrix<f64> {
        &self.acal
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn n(&self) -> usize {
        self.acal.nrows()
    }

    /// Discrete transition matrix at the native sample time.
    pub fn a_cl(&self) -> &DMatrix<f64> {
        &self.a_cl
    }

    /// One-step noise covariance at the native sample time.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Exact transition `(exp(A h), int_0^h exp(A s) Q Q^T exp(A^T s) ds)`
    /// for step `h`.
    pub fn transition(&self, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        if h == self.ts {
            return (self.a_cl.clone(), self.sigma.clone());
        }
        let (phi, cov) = van_loan(&self.acal, &(&self.q * self.q.transpose()), h);
        (phi, linalg::symmetrize(&cov))
    }

    /// Same process sampled at `ts / 2^levels`.
    pub fn refined(&self, levels: u32) -> OuProcess {
        let h = self.ts / f64::from(1u32 << levels);
        let (a_cl, sigma) = self.transition(h);
        OuProcess {
            acal: self.acal.clone(),
            q: self.q.clone(),
            delta: self.delta,
            ts: h,
            a_cl,
            sigma,
        }
    }
}

fn check_ou_args(acal: &DMatrix<f64>, delta: f64, ts: f64) -> Result<()> {
    if acal.nrows() == 0 || !acal.is_square() {
        return Err(Error::Dimension(format!(
            "drift must be square and non-empty, got {}x{}",
            acal.nrows(),
            acal.ncols()
        )));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sample time must be positive, got {ts}"
        )));
    }
    Ok(())
}

/// Van Loan's block exponential: returns `exp(A h)` and
/// `int_0^h exp(A s) W exp(A^T s) ds`.
fn van_loan(acal: &DMatrix<f64>, w: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = acal.nrows();
    let mut c = DMatrix::zeros(2 * n, 2 * n);
    c.view_mut((0, 0), (n, n)).copy_from(&(-acal));
    c.view_mut((0, n), (n, n)).copy_from(w);
    c.view_mut((n, n), (n, n)).copy_from(&acal.transpose());
    let e = expm(&(c * h));
    let phi = e.view((n, n), (n, n)).transpose();
    let cov = &phi * e.view((0, n), (n, n));
    (phi, cov)
}

/// Continuous-time embedding of a discrete closed loop.
///
/// The drift is `log(A_cl) / ts`. The diffusion solves the covariance
/// matching condition `int_0^ts exp(A s) W exp(A^T s) ds = Sigma` for
/// `W = Q Q^T`, which in vectorised form is the linear system
/// `(int_0^ts exp((A (+) A) s) ds) vec(W) = vec(Sigma)` with the Kronecker
/// sum `A (+) A`. `Q` is the symmetric square root of `W`.
pub fn discretize_to_ou(a_cl: &DMatrix<f64>, sigma: &DMatrix<f64>, ts: f64, delta: f64) -> Result<OuProcess> {
    check_ou_args(a_cl, delta, ts)?;
    let n = a_cl.nrows();
    if sigma.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "Sigma must be {n}x{n}, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let sigma = check_covariance(sigma, "Sigma")?;
    let rho = spectral_radius(a_cl);
    if rho > 1.0 + 1e-12 {
        return Err(Error::Unstable(rho));
    }
    let acal = logm(a_cl)? / ts;

    let eye = DMatrix::<f64>::identity(n, n);
    let ksum = linalg::kron(&acal, &eye) + linalg::kron(&eye, &acal);
    let m = n * n;
    let mut aug = DMatrix::zeros(2 * m, 2 * m);
    aug.view_mut((0, 0), (m, m)).copy_from(&ksum);
    aug.view_mut((0, m), (m, m)).fill_with_identity();
    let gram = expm(&(aug * ts)).view((0, m), (m, m)).into_owned();
    let w_vec = gram
        .lu()
        .solve(&linalg::vec(&sigma))
        .ok_or_else(|| Error::Numerical("covariance matching system is singular".into()))?;
    let w = linalg::symmetrize(&linalg::unvec(&w_vec, n, n));

    let scale = w.amax().max(f64::MIN_POSITIVE);
    let min_eig = w.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-9 * scale {
        return Err(Error::NotPsd {
            what: "diffusion Q Q^T".into(),
            min_eigenvalue: min_eig,
        });
    }
    let w_clipped = {
        let eig = w.symmetric_eigen();
        let v = &eig.eigenvectors;
        v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0))) * v.transpose()
    };
    let q = psd_sqrt(&linalg::symmetrize(&w_clipped), "diffusion Q Q^T")?;
    Ok(OuProcess {
        acal,
        q,
        delta,
        ts,
        a_cl: a_cl.clone(),
        sigma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingTimeEstimate {
    pub mean: f64,
    pub sample_count: usize,
    /// Per-path stopping times in path order.
    pub samples: Vec<f64>,
}

/// Grid-matched Monte Carlo estimate of the expected stopping time.
///
/// Path `i` draws from ChaCha stream `i` of `seed`, so the result does not
/// depend on thread scheduling, and equal seeds give common random numbers
/// across different processes. A path that has not left the sphere after
/// `tau_max` contributes `tau_max`.
pub fn mc_expected_stopping_time(
    ou: &OuProcess,
    paths: usize,
    tau_max: f64,
    seed: u64,
) -> Result<StoppingTimeEstimate> {
    mc_grid_stopping_time(ou.a_cl(), ou.sigma(), ou.ts, ou.delta, paths, tau_max, seed)
}

/// [`mc_expected_stopping_time`] straight from the discrete error dynamics
/// `z(k+1) = a_cl z(k) + e(k)`, `e ~ N(0, sigma)`.
///
/// Needs no continuous embedding, so it also works for estimated models
/// whose covariance has no PSD diffusion or whose `a_cl` has no real
/// logarithm.
pub fn mc_grid_stopping_time(
    a_cl: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    ts: f64,
    delta: f64,
    paths: usize,
    tau_max: f64,
    seed: u64,
) -> Result<StoppingTimeEstimate> {
    if paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    check_ou_args(a_cl, delta, ts)?;
    let cap = tau_max_steps(tau_max, ts)?;
    let kernel = PathKernel::new(a_cl, sigma, delta)?;
    let samples: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let steps = kernel.first_exit(&mut rng, cap, &[1]);
            steps[0] as f64 * ts
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / paths as f64;
    Ok(StoppingTimeEstimate {
        mean,
        sample_count: paths,
        samples,
    })
}

/// Means of grid-monitored stopping times at step sizes `ts / 2^j`,
/// `j = 0..=levels`, from one set of paths simulated on the finest grid.
///
/// Coarser grids observe the same path at every `2^(levels - j)`-th fine
/// step, which is an exact sample of the coarse-grid process. Returns
/// `(h, mean)` pairs from coarsest to finest.
pub fn mc_refined_stopping_times(
    ou: &OuProcess,
    paths: usize,
    tau_max: f64,
    levels: u32,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    if levels > 12 {
        return Err(Error::InvalidParameter(format!(
            "at most 12 refinement levels, got {levels}"
        )));
    }
    let fine = ou.refined(levels);
    let factor = 1u64 << levels;
    let cap = tau_max_steps(tau_max, ou.ts)? * factor;
    let strides: Vec<u64> = (0..=levels).map(|j| 1u64 << (levels - j)).collect();
    let kernel = PathKernel::new(fine.a_cl(), fine.sigma(), ou.delta)?;
    let per_path: Vec<Vec<u64>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            kernel.first_exit(&mut rng, cap, &strides)
        })
        .collect();
    Ok((0..=levels as usize)
        .map(|j| {
            let total: u64 = per_path.iter().map(|p| p[j]).sum();
            (
                ou.ts / strides[0] as f64 * strides[j] as f64,
                total as f64 * fine.ts / paths as f64,
            )
        })
        .collect())
}

/// Fits `E(h) = E0 + c1 sqrt(h) + c2 h` by least squares and returns `E0`,
/// the zero-step limit of grid-monitored exit times.
pub fn extrapolate_zero_step(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InvalidParameter(
            "need at least three grid levels to extrapolate".into(),
        ));
    }
    let design = DMatrix::from_fn(points.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => points[i].0.sqrt(),
        _ => points[i].0,
    });
    let rhs = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(coef[0])
}

/// Simulates `z(k+1) = A z(k) + L w(k)` from zero and reports, for each
/// monitoring stride, the first multiple of the stride at which
/// `||z|| >= delta` (or the cap).
struct PathKernel {
    a: DMatrix<f64>,
    factor: DMatrix<f64>,
    delta_sq: f64,
}

impl PathKernel {
    fn new(a: &DMatrix<f64>, sigma: &DMatrix<f64>, delta: f64) -> Result<Self> {
        Ok(Self {
            a: a.clone(),
            factor: psd_factor(sigma, "Sigma")?,
            delta_sq: delta * delta,
        })
    }

    fn first_exit<R: Rng>(&self, rng: &mut R, cap: u64, strides: &[u64]) -> Vec<u64> {
        let mut exits = vec![cap; strides.len()];
        let mut pending = strides.len();
        let n = self.a.nrows();
        if n == 1 {
            let a = self.a[(0, 0)];
            let l = self.factor[(0, 0)];
            let mut z = 0.0f64;
            for k in 1..=cap {
                let w: f64 = rng.sample(StandardNormal);
                z = a * z + l * w;
                if z * z >= self.delta_sq && mark(&mut exits, &mut pending, strides, k, cap) {
                    break;
                }
            }
            return exits;
        }
        let mut z = DVector::zeros(n);
        let mut next = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        for k in 1..=cap {
            for wi in w.iter_mut() {
                *wi = rng.sample(StandardNormal);
            }
            next.gemv(1.0, &self.a, &z, 0.0);
            next.gemv(1.0, &self.factor, &w, 1.0);
            std::mem::swap(&mut z, &mut next);
            if z.norm_squared() >= self.delta_sq && mark(&mut exits, &mut pending, strides, k, cap) {
                break;
            }
        }
        exits
    }
}

/// Records an exit at fine step `k` for every level whose grid contains `k`
/// and that has not exited yet. Returns true once all levels are done.
fn mark(exits: &mut [u64], pending: &mut usize, strides: &[u64], k: u64, cap: u64) -> bool {
    for (e, s) in exits.iter_mut().zip(strides) {
        if *e == cap && k < cap && k % s == 0 {
            *e = k;
            *pending -= 1;
        }
    }
    *pending == 0
}

/// Expected exit time from `(-delta, delta)` of the scalar OU process
/// `dZ = acal Z dt + q dW` started at zero.
///
/// Solves `acal x v' + q^2 v'' / 2 = -1`, `v(+-delta) = 0`, through its
/// integrating-factor representation
/// `v(0) = 2/q^2 int_0^delta int_0^y exp(c (y^2 - z^2)) dz dy`
/// with `c = -acal / q^2`.
pub fn bvp_expected_exit_time_1d(acal: f64, q: f64, delta: f64) -> Result<f64> {
    if !(acal <= 0.0 && acal.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "drift must be non-positive, got {acal}"
        )));
    }
    if !(q > 0.0 && q.is_finite() && delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "q and delta must be positive, got q = {q}, delta = {delta}"
        )));
    }
    let c = -acal / (q * q);
    let inner = |y: f64| -> f64 {
        if y == 0.0 {
            return 0.0;
        }
        integrate_rel(&|z: f64| (c * (y * y - z * z)).exp(), 0.0, y, 1e-13).unwrap_or(f64::NAN)
    };
    let outer = integrate_rel(&inner, 0.0, delta, 1e-12)?;
    let v0 = 2.0 / (q * q) * outer;
    if !v0.is_finite() {
        return Err(Error::Quadrature(format!(
            "expected exit time overflowed (c delta^2 = {})",
            c * delta * delta
        )));
    }
    Ok(v0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_reference_system_embedding() {
        let ou = discretize_to_ou(&m1(0.9), &m1(2.5e-5), 0.01, 0.02).unwrap();
        let a = ou.acal()[(0, 0)];
        assert_relative_eq!(a, 0.9f64.ln() / 0.01, epsilon = 1e-12);
        assert_relative_eq!(a, -10.5361, epsilon = 1e-4);
        // scalar closed form of the covariance integral
        let q2 = 2.5e-5 * 2.0 * a / ((2.0 * a * 0.01).exp() - 1.0);
        assert_relative_eq!(ou.q()[(0, 0)].powi(2), q2, max_relative = 1e-12);
        assert_relative_eq!(q2, 2.7726e-3, max_relative = 1e-4);
    }

    #[test]
    fn identity_closed_loop_is_brownian_motion() {
        let ts = 0.01;
        let q0 = 0.7;
        let ou = discretize_to_ou(&m1(1.0), &m1(ts * q0 * q0), ts, 1.0).unwrap();
        assert_eq!(ou.acal()[(0, 0)], 0.0);
        assert_relative_eq!(ou.q()[(0, 0)].powi(2), q0 * q0, max_relative = 1e-12);
    }

    #[test]
    fn one_step_of_embedded_process_has_sigma_variance() {
        // simulate one Ts step on a fine Euler grid of the continuous process
        let ou = discretize_to_ou(&m1(0.9), &m1(2.5e-5), 0.01, 0.02).unwrap();
        let (a, q) = (ou.acal()[(0, 0)], ou.q()[(0, 0)]);
        let mut rng = crate::rng::SimRng::seed_from_u64(9);
        let substeps = 200;
        let h = 0.01 / substeps as f64;
        let trials = 40_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let mut z = 0.0;
            for _ in 0..substeps {
                let w: f64 = rng.sample(StandardNormal);
                z += a * z * h + q * h.sqrt() * w;
            }
            acc += z * z;
        }
        let var = acc / trials as f64;
        assert!((var / 2.5e-5 - 1.0).abs() < 0.03, "{var}");
    }

    /// Stable `A` without negative real eigenvalues, and a `Sigma` that an
    /// OU process can actually produce at sample time `ts`. An arbitrary PSD
    /// `Sigma` need not have a PSD diffusion.
    fn random_stable(seed: u64, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = crate::rng::SimRng::seed_from_u64(seed);
        loop {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.6..0.6) as f64)
                + DMatrix::identity(3, 3) * 0.4;
            let rho = spectral_radius(&a);
            let has_neg_real = a
                .complex_eigenvalues()
                .iter()
                .any(|c| c.im.abs() < 1e-9 && c.re <= 0.0);
            if rho < 0.95 && !has_neg_real {
                let l = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.1..0.1) as f64);
                let acal = logm(&a).unwrap() / ts;
                let sigma = linalg::symmetrize(&van_loan(&acal, &(&l * l.transpose()), ts).1);
                return (a, sigma);
            }
        }
    }

    #[test]
    fn embedding_round_trips_for_random_stable_systems() {
        for seed in 0..10 {
            let (a, sigma) = random_stable(seed, 0.05);
            let ou = discretize_to_ou(&a, &sigma, 0.05, 0.1).unwrap();
            let back = expm(&(ou.acal() * 0.05));
            assert!((back - &a).amax() < 1e-9, "seed {seed}");
            // Van Loan integral reproduces Sigma
            let (phi, cov) = van_loan(ou.acal(), &(ou.q() * ou.q().transpose()), 0.05);
            assert!((phi - &a).amax() < 1e-9);
            assert!((cov - &sigma).amax() < 1e-9 * sigma.amax().max(1.0), "seed {seed}");
            // continuous drift is Hurwitz
            assert!(ou.acal().complex_eigenvalues().iter().all(|c| c.re < 0.0));
        }
    }

    #[test]
    fn diffusion_satisfies_stein_identity() {
        // W - A W A^T = -(acal Sigma + Sigma acal^T) follows from
        // differentiating the covariance integral
        for seed in 20..25 {
            let (a, sigma) = random_stable(seed, 0.02);
            let ou = discretize_to_ou(&a, &sigma, 0.02, 0.1).unwrap();
            let w = ou.q() * ou.q().transpose();
            let lhs = &w - &a * &w * a.transpose();
            let rhs = -(ou.acal() * &sigma + &sigma * ou.acal().transpose());
            assert!((lhs - &rhs).amax() < 1e-9 * rhs.amax().max(1e-12), "seed {seed}");
        }
    }

    #[test]
    fn embedding_errors() {
        let bad = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, 0.5]);
        assert!(matches!(
            discretize_to_ou(&bad, &DMatrix::identity(2, 2), 0.01, 0.1),
            Err(Error::NoRealLogarithm(_))
        ));
        assert!(matches!(
            discretize_to_ou(&m1(1.5), &m1(1.0), 0.01, 0.1),
            Err(Error::Unstable(_))
        ));
        assert!(discretize_to_ou(&m1(0.5), &m1(1.0), 0.01, 0.0).is_err());
    }

    #[test]
    fn from_continuous_inverts_embedding() {
        let acal = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, -1.0, -3.0]);
        let q = DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]);
        let ou = OuProcess::from_continuous(acal.clone(), q.clone(), 0.1, 0.01).unwrap();
        let back = discretize_to_ou(ou.a_cl(), ou.sigma(), 0.01, 0.1).unwrap();
        assert_relative_eq!(back.acal(), &acal, epsilon = 1e-9);
        assert_relative_eq!(back.q() * back.q().transpose(), &q * q.transpose(), epsilon = 1e-9);
    }

    #[test]
    fn refined_transitions_compose() {
        let ou = discretize_to_ou(&m1(0.9), &m1(2.5e-5), 0.01, 0.02).unwrap();
        let half = ou.refined(1);
        let (a, s) = (half.a_cl()[(0, 0)], half.sigma()[(0, 0)]);
        assert_relative_eq!(a * a, 0.9, epsilon = 1e-12);
        assert_relative_eq!(a * a * s + s, 2.5e-5, max_relative = 1e-10);
    }

    #[test]
    fn tiny_delta_exits_immediately() {
        let ou = discretize_to_ou(&m1(0.9), &m1(2.5e-5), 0.01, 1e-300).unwrap();
        let est = mc_expected_stopping_time(&ou, 500, 3.5, 1).unwrap();
        assert!(est.samples.iter().all(|&s| s == 0.01));
        assert_relative_eq!(est.mean, 0.01, max_relative = 1e-12);
    }

    #[test]
    fn zero_noise_paths_hit_the_cap() {
        let ou = discretize_to_ou(&m1(0.9), &m1(0.0), 0.01, 0.02).unwrap();
        let est = mc_expected_stopping_time(&ou, 100, 3.5, 1).unwrap();
        assert!(est.samples.iter().all(|&s| (s - 3.5).abs() < 1e-12));
        assert_eq!(est.sample_count, 100);
    }

    #[test]
    fn estimate_is_independent_of_thread_count() {
        let ou = discretize_to_ou(&m1(0.9), &m1(2.5e-5), 0.01, 0.02).unwrap();
        let a = mc_expected_stopping_time(&ou, 2000, 3.5, 77).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| mc_expected_stopping_time(&ou, 2000, 3.5, 77).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn nested_levels_are_ordered() {
        let ou = discretize_to_ou(&m1(0.9), &m1(2.5e-5), 0.01, 0.02).unwrap();
        let levels = mc_refined_stopping_times(&ou, 2000, 3.5, 3, 5).unwrap();
        assert_eq!(levels.len(), 4);
        assert_relative_eq!(levels[0].0, 0.01, epsilon = 1e-15);
        assert_relative_eq!(levels[3].0, 0.00125, epsilon = 1e-15);
        // finer monitoring can only see the exit earlier
        assert!(levels.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn extrapolation_recovers_exact_model() {
        let pts: Vec<(f64, f64)> = [0.04, 0.02, 0.01, 0.005]
            .iter()
            .map(|&h: &f64| (h, 0.26 + 1.7 * h.sqrt() - 3.0 * h))
            .collect();
        assert_relative_eq!(extrapolate_zero_step(&pts).unwrap(), 0.26, epsilon = 1e-12);
        assert!(extrapolate_zero_step(&pts[..2]).is_err());
    }

    #[test]
    fn brownian_bvp_is_delta_squared_over_q_squared() {
        let v = bvp_expected_exit_time_1d(0.0, 0.5, 0.3).unwrap();
        assert_relative_eq!(v, 0.09 / 0.25, max_relative = 1e-12);
    }

    #[test]
    fn bvp_matches_closed_form_with_erf_free_series() {
        // independent route: F(y) = int_0^y exp(c(y^2 - z^2)) dz solves
        // F' = 2cyF + 1, so F = sum_k (2c)^k y^(2k+1) / (2k+1)!!
        let (acal, q, delta): (f64, f64, f64) = (-10.536051565782628, 0.052655913, 0.02);
        let c = -acal / (q * q);
        let mut sum = 0.0;
        let mut coef = 1.0;
        for k in 0..80 {
            let kf = k as f64;
            if k > 0 {
                coef *= 2.0 * c / (2.0 * kf + 1.0);
            }
            sum += coef * delta.powf(2.0 * kf + 2.0) / (2.0 * kf + 2.0);
        }
        let series = 2.0 / (q * q) * sum;
        let v = bvp_expected_exit_time_1d(acal, q, delta).unwrap();
        assert_relative_eq!(v, series, max_relative = 1e-10);
    }

    #[test]
    fn bvp_monotone_in_drift_and_diffusion() {
        let d = 0.02;
        let q = 0.05;
        let v1 = bvp_expected_exit_time_1d(-5.0, q, d).unwrap();
        let v2 = bvp_expected_exit_time_1d(-10.0, q, d).unwrap();
        let v3 = bvp_expected_exit_time_1d(-20.0, q, d).unwrap();
        assert!(v1 < v2 && v2 < v3);
        let w1 = bvp_expected_exit_time_1d(-10.0, 0.04, d).unwrap();
        let w2 = bvp_expected_exit_time_1d(-10.0, 0.06, d).unwrap();
        assert!(w1 > v2 && v2 > w2);
    }

    #[test]
    fn bvp_rejects_bad_arguments() {
        assert!(bvp_expected_exit_time_1d(1.0, 1.0, 1.0).is_err());
        assert!(bvp_expected_exit_time_1d(-1.0, 0.0, 1.0).is_err());
        assert!(matches!(
            bvp_expected_exit_time_1d(-1e6, 1e-3, 10.0),
            Err(Error::Quadrature(_))
        ));
    }
}
