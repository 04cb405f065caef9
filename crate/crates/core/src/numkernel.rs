//! Dense real-matrix kernels: norms, singular values, right pseudo-inverses,
//! condition numbers and symmetric eigenvalue extremes.
//!
//! Everything here is deterministic and allocation-local. Singular value
//! decompositions and symmetric eigensolvers come from `nalgebra`; the
//! numerical-rank policy lives here so every caller agrees on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense row/column real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Largest singular value.
    Spectral,
    /// Square root of the sum of squared entries.
    Frobenius,
}

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &Mat) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(sv)
}

/// Threshold below which a singular value counts as zero:
/// `max(rows, cols) * eps * sigma_max`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

pub fn numerical_rank(m: &Mat) -> usize {
    let sv = singular_values(m);
    if sv.is_empty() || sv[0] == 0.0 {
        return 0;
    }
    let tol = rank_tolerance(m.nrows(), m.ncols(), sv[0]);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Spectral norm without input validation, for internal use on values the
/// crate produced itself.
pub(crate) fn spectral(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}

pub fn matrix_norm(m: &Mat, kind: NormKind) -> Result<f64> {
    ensure_finite(m, "matrix")?;
    Ok(match kind {
        NormKind::Spectral => spectral(m),
        NormKind::Frobenius => m.norm(),
    })
}

fn require_full_row_rank(m: &Mat, context: &str) -> Result<()> {
    ensure_finite(m, context)?;
    if m.nrows() == 0 || m.nrows() > m.ncols() {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            rank: numerical_rank(m),
            required: m.nrows(),
        });
    }
    let rank = numerical_rank(m);
    if rank < m.nrows() {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            rank,
            required: m.nrows(),
        });
    }
    Ok(())
}

/// Minimum-Frobenius-norm right inverse `N` with `M N = I`, computed from the
/// thin SVD (`V diag(1/sigma) U^T`).
pub fn right_pseudo_inverse(m: &Mat) -> Result<Mat> {
    require_full_row_rank(m, "right pseudo-inverse")?;
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let inv_sigma = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    Ok(v_t.transpose() * inv_sigma * u.transpose())
}

/// `sigma_max / sigma_min` for a full-row-rank matrix. Equals
/// `||M|| * ||right_pseudo_inverse(M)||`.
pub fn condition_number(m: &Mat) -> Result<f64> {
    require_full_row_rank(m, "condition number")?;
    let sv = singular_values(m);
    Ok(sv[0] / sv[sv.len() - 1])
}

/// Smallest eigenvalue of `(S + S^T) / 2`.
pub fn min_eigenvalue_sym(s: &Mat) -> Result<f64> {
    if !s.is_square() || s.is_empty() {
        return Err(Error::invalid(format!(
            "expected a non-empty square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    ensure_finite(s, "symmetric matrix")?;
    Ok(min_eig_unchecked(s))
}

pub(crate) fn min_eig_unchecked(s: &Mat) -> f64 {
    let sym = (s + s.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if !m.is_square() || m.is_empty() {
        return Err(Error::invalid("spectral radius needs a square matrix"));
    }
    ensure_finite(m, "matrix")?;
    Ok(m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm())))
}

/// Orthonormal basis (as columns) of the row space of a full-row-rank `M`,
/// i.e. the leading right singular vectors. Shape `cols x rows`.
pub fn row_space_basis(m: &Mat) -> Result<Mat> {
    require_full_row_rank(m, "row-space basis")?;
    let svd = m.clone().svd(false, true);
    Ok(svd.v_t.expect("v_t requested").transpose())
}
