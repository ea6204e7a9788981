//! Small dense linear-algebra helpers shared by the filter, simulator and
//! surrogate. Matrices here are tiny (state dimension ≤ 4, GP Gram matrices
//! of a few hundred rows at most), so everything is plain `DMatrix<f64>`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative PSD tolerance: eigenvalues down to `-PSD_TOL * trace` count as zero.
pub const PSD_TOL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a Taylor series that is
/// summed until the next term no longer changes the result.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input"));
    }
    let n = m.nrows();
    let norm = one_norm(m);
    // Bring the norm under 1/2 so the series converges in ~20 terms.
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings);

    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=60 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if one_norm(&term) <= f64::EPSILON * one_norm(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(sum)
}

/// Cholesky factor of a symmetric positive definite matrix. Failure is
/// reported, never regularized away.
pub fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite(what))
}

/// Quadratic form `eᵀ M⁻¹ e` through a Cholesky solve.
pub fn mahalanobis_sq(e: &DVector<f64>, m: &DMatrix<f64>, what: &'static str) -> Result<f64> {
    if e.len() != m.nrows() || !m.is_square() {
        return Err(Error::Dimension(format!(
            "vector of length {} against {}x{} matrix",
            e.len(),
            m.nrows(),
            m.ncols()
        )));
    }
    let chol = cholesky(m, what)?;
    // ‖L⁻¹e‖² = eᵀ(LLᵀ)⁻¹e
    let l = chol.l();
    let mut y = e.clone();
    if !l.solve_lower_triangular_mut(&mut y) {
        return Err(Error::NotPositiveDefinite(what));
    }
    Ok(y.norm_squared())
}

/// Checks symmetric PSD-ness with the relative eigenvalue tolerance and
/// returns a copy with tiny negative eigenvalues clamped to zero.
pub fn clamp_psd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let trace = sym.trace().abs();
    let tol = PSD_TOL * trace.max(f64::MIN_POSITIVE);
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -tol {
        return Err(Error::NotPositiveSemidefinite(what));
    }
    if min_eig >= 0.0 {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok(symmetrize(&rebuilt))
}

/// Lower-triangular-up-to-permutation factor `L` with `L Lᵀ = cov` for a
/// symmetric PSD matrix: Cholesky with diagonal pivoting, where pivots that
/// fall under the PSD tolerance are clamped to zero together with their column.
pub fn psd_factor(cov: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::Dimension(format!("{what} must be square")));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    let n = cov.nrows();
    let mut a = symmetrize(cov);
    let scale = (0..n).map(|i| a[(i, i)].abs()).sum::<f64>();
    let tol = PSD_TOL * scale.max(f64::MIN_POSITIVE);
    // perm[k] = original index occupying pivot position k
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::<f64>::zeros(n, n);

    for k in 0..n {
        let (p, _) =
            (k..n).map(|j| (j, a[(j, j)])).fold(
                (k, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if p != k {
            a.swap_rows(k, p);
            a.swap_columns(k, p);
            l.swap_rows(k, p);
            perm.swap(k, p);
        }
        let pivot = a[(k, k)];
        if pivot < -tol {
            return Err(Error::NotPositiveSemidefinite(what));
        }
        if pivot <= tol {
            // Remaining Schur complement is numerically zero; every later
            // pivot is at most this one, so we are done.
            for j in k..n {
                for i in k..n {
                    if a[(i, j)].abs() > tol.max(1e-9 * scale) {
                        return Err(Error::NotPositiveSemidefinite(what));
                    }
                }
            }
            break;
        }
        let d = pivot.sqrt();
        l[(k, k)] = d;
        for i in (k + 1)..n {
            l[(i, k)] = a[(i, k)] / d;
        }
        for j in (k + 1)..n {
            for i in (k + 1)..n {
                a[(i, j)] -= l[(i, k)] * l[(j, k)];
            }
        }
    }

    // Undo the permutation on the rows: cov = Pᵀ L Lᵀ P.
    let mut out = DMatrix::<f64>::zeros(n, n);
    for (k, &orig) in perm.iter().enumerate() {
        out.set_row(orig, &l.row(k));
    }
    Ok(out)
}
