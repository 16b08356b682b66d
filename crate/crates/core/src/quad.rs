//! Gauss-Legendre rules and an adaptive integrator built on them.

use crate::error::{Error, Result};

/// Nodes and weights of the `m`-point Gauss-Legendre rule on `[0, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let mf = m as f64;
    for i in 0..m.div_ceil(2) {
        // Newton iteration on P_m starting from the Chebyshev-like guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..m {
                let p2 = p1;
                p1 = p0;
                let jf = j as f64;
                p0 = ((2.0 * jf + 1.0) * x * p1 - jf * p2) / (jf + 1.0);
            }
            dp = mf * (x * p0 - p1) / (x * x - 1.0);
            let dx = p0 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] -> [0, 1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[m - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[m - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Adaptive bisection with a 10-point Gauss-Legendre panel rule.
///
/// A panel is accepted once the whole-panel and split-panel estimates agree
/// to `tol` scaled by the panel's share of the interval.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let rule = gauss_legendre(10);
    let panel = |lo: f64, hi: f64| -> f64 {
        let h = hi - lo;
        rule.0
            .iter()
            .zip(rule.1.iter())
            .map(|(t, w)| w * f(lo + h * t))
            .sum::<f64>()
            * h
    };
    if a == b {
        return Ok(0.0);
    }
    let width = (b - a).abs();
    let mut total = 0.0;
    let mut stack = vec![(a, b, panel(a, b), 0u32)];
    while let Some((lo, hi, whole, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = panel(lo, mid);
        let right = panel(mid, hi);
        let err = (left + right - whole).abs();
        let budget = tol * ((hi - lo).abs() / width).max(1e-3);
        if err <= budget || (depth > 6 && err <= 1e-15 * (left + right).abs()) {
            total += left + right;
        } else if depth >= 40 {
            return Err(Error::Quadrature(format!(
                "panel [{lo:e}, {hi:e}] still has error {err:e} after {depth} bisections"
            )));
        } else {
            stack.push((mid, hi, right, depth + 1));
            stack.push((lo, mid, left, depth + 1));
        }
    }
    if !total.is_finite() {
        return Err(Error::Quadrature("integral is not finite".into()));
    }
    Ok(total)
}

/// [`integrate`] with a tolerance relative to a 20-point first guess.
pub fn integrate_rel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel: f64) -> Result<f64> {
    let (x, w) = gauss_legendre(20);
    let h = b - a;
    let guess: f64 = x.iter().zip(&w).map(|(t, w)| w * f(a + h * t)).sum::<f64>() * h;
    if !guess.is_finite() {
        return Err(Error::Quadrature("integrand is not finite".into()));
    }
    let tol = (rel * guess.abs()).max(f64::MIN_POSITIVE);
    integrate(f, a, b, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // degree 9 is exact for 5 points
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(9)).sum();
        assert_relative_eq!(s, 0.1, epsilon = 1e-15);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn odd_rule_has_midpoint() {
        let (x, _) = gauss_legendre(7);
        assert_relative_eq!(x[3], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn adaptive_handles_peaked_integrand() {
        let f = |x: f64| 1.0 / (1e-4 + x * x);
        let exact = 2.0 * (1.0 / 1e-2) * (1.0f64 / 1e-2).atan();
        let got = integrate(&f, -1.0, 1.0, 1e-10).unwrap();
        assert_relative_eq!(got, exact, max_relative = 1e-10);
    }
}
