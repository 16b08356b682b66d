//! Dense matrix helpers shared by the simulation and identification code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quad::gauss_legendre;

/// Absolute tolerance on negative eigenvalues of a covariance.
pub const PSD_TOLERANCE: f64 = 1e-12;

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Checks squareness, near-symmetry and positive semi-definiteness.
/// Returns the symmetrized matrix.
pub fn check_covariance(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(Error::InvalidParameter(format!(
            "{what} is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let sym = symmetrize(m);
    if sym.nrows() > 0 {
        let min = sym.clone().symmetric_eigenvalues().min();
        if min < -PSD_TOLERANCE {
            return Err(Error::NotPsd {
                what: what.to_string(),
                min_eigenvalue: min,
            });
        }
    }
    Ok(sym)
}

/// Returns `L` with `L * L^T = m` from the symmetric eigendecomposition,
/// with negative eigenvalues within tolerance clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = check_covariance(m, what)?;
    let eig = sym.symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    Ok(l)
}

/// Symmetric PSD square root `V sqrt(L) V^T`.
pub fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = check_covariance(m, what)?;
    let eig = sym.symmetric_eigen();
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(symmetrize(&(v * d * v.transpose())))
}

pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    m.exp()
}

/// Principal real matrix logarithm by inverse scaling and squaring.
///
/// Square roots come from the Denman-Beavers iteration; once `Y - I` is
/// small, `log(I + X)` is evaluated as the Gauss-Legendre rule applied to
/// `int_0^1 X (I + tX)^-1 dt`, which is the diagonal Pade approximant.
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "logarithm needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    for c in a.complex_eigenvalues().iter() {
        let tol = 1e-12 * c.norm().max(1.0);
        if c.im.abs() <= tol && c.re <= tol {
            return Err(Error::NoRealLogarithm(format!("{:.6e}", c.re)));
        }
    }

    let eye = DMatrix::<f64>::identity(n, n);
    let mut y = a.clone();
    let mut squarings = 0u32;
    while (&y - &eye).norm() > 0.25 {
        y = sqrtm_denman_beavers(&y)?;
        squarings += 1;
        if squarings > 64 {
            return Err(Error::Numerical(
                "matrix square root iteration did not reach the identity".into(),
            ));
        }
    }

    let x = &y - &eye;
    let (nodes, weights) = gauss_legendre(12);
    let mut log = DMatrix::<f64>::zeros(n, n);
    for (t, w) in nodes.iter().zip(weights.iter()) {
        let shifted = &eye + &x * *t;
        let inv = shifted
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular Pade denominator".into()))?;
        log += (&x * inv) * *w;
    }
    Ok(log * 2f64.powi(squarings as i32))
}

fn sqrtm_denman_beavers(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in matrix square root".into()))?;
        let zi = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in matrix square root".into()))?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let change = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if change <= 1e-15 * y.norm() {
            return Ok(y);
        }
    }
    Err(Error::Numerical(
        "matrix square root iteration did not converge".into(),
    ))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking `vec` operator.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// 2-norm condition number from the singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Builds a matrix from row lists, checking that every row has the same
/// length.
pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(format!(
                "row {i} has {} entries, expected {ncols} (rows must be equally long)",
                r.len()
            ));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().copied().collect())
        .collect()
}
