//! Dense linear-algebra kernels used by the surgery math.
//!
//! Matrices are `f64` and row-major (`ndarray::Array2`). The two entry points
//! are [`pseudoinverse`] (SVD-based Moore-Penrose inverse with singular-value
//! thresholding) and [`orthonormal_basis`] (modified Gram-Schmidt with
//! reorthogonalization and rank-revealing column dropping). All arithmetic is
//! 64-bit; inputs are validated to be finite.

use ndarray::{Array1, Array2};

use crate::error::{DampError, Result};

/// Row-major dense matrix.
pub type Matrix = Array2<f64>;

/// Default relative cutoff for small singular values.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// Default residual-norm threshold below which a column is dropped during
/// orthonormalization.
pub const DEFAULT_ORTH_TOL: f64 = 1e-8;

fn check_input(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(DampError::InvalidArgument(format!(
            "{what}: matrix must be nonempty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DampError::InvalidArgument(format!(
            "{what}: matrix contains non-finite entries"
        )));
    }
    Ok(())
}

/// Moore-Penrose pseudoinverse via singular value decomposition.
///
/// Singular values below `rcond * sigma_max` are treated as exactly zero, so
/// rank-deficient inputs (duplicate columns, zero rows) stay well behaved.
pub fn pseudoinverse(m: &Matrix, rcond: f64) -> Result<Matrix> {
    check_input(m, "pseudoinverse")?;
    if rcond < 0.0 {
        return Err(DampError::InvalidArgument(format!(
            "pseudoinverse: rcond must be >= 0, got {rcond}"
        )));
    }
    let (rows, cols) = m.dim();
    let dm = nalgebra::DMatrix::from_row_iterator(rows, cols, m.iter().copied());
    let svd = dm.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rcond * sigma_max;

    // pinv = V diag(1/s) U^T, summing only singular triplets above the cutoff.
    let mut pinv = Array2::<f64>::zeros((cols, rows));
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv_s = 1.0 / s;
        for i in 0..cols {
            let v_ik = v_t[(k, i)];
            if v_ik == 0.0 {
                continue;
            }
            for j in 0..rows {
                pinv[[i, j]] += inv_s * v_ik * u[(j, k)];
            }
        }
    }
    Ok(pinv)
}

/// Orthonormal basis of the column space of `columns`, by modified
/// Gram-Schmidt with one reorthogonalization sweep.
///
/// Columns whose residual norm against the accepted basis falls below `tol`
/// are dropped, so the output has `r = numerical rank` columns. An input
/// whose columns are all dropped yields a `d x 0` matrix rather than an
/// error, so callers can treat the empty basis as a no-op.
pub fn orthonormal_basis(columns: &Matrix, tol: f64) -> Result<Matrix> {
    check_input(columns, "orthonormal_basis")?;
    let (d, k) = columns.dim();
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for j in 0..k {
        let mut v = columns.column(j).to_owned();
        // Two MGS sweeps: the second pass cleans up cancellation when the
        // column is nearly in the accepted span.
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.scaled_add(-c, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm < tol {
            continue;
        }
        v.mapv_inplace(|x| x / norm);
        basis.push(v);
    }
    let mut out = Array2::<f64>::zeros((d, basis.len()));
    for (j, q) in basis.iter().enumerate() {
        out.column_mut(j).assign(q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn max_abs(m: &Matrix) -> f64 {
        m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pseudoinverse_identity() {
        let eye = Array2::<f64>::eye(3);
        let pinv = pseudoinverse(&eye, 1e-10).unwrap();
        assert!(max_abs(&(&pinv - &eye)) <= 1e-12);
    }

    #[test]
    fn pseudoinverse_diagonal_with_zero_singular_value() {
        let m = array![[2.0, 0.0], [0.0, 0.0]];
        let expected = array![[0.5, 0.0], [0.0, 0.0]];
        let pinv = pseudoinverse(&m, 1e-10).unwrap();
        assert!(max_abs(&(&pinv - &expected)) <= 1e-12);
    }

    #[test]
    fn pseudoinverse_satisfies_moore_penrose_identities() {
        let m = random_matrix(6, 3, 7);
        let pinv = pseudoinverse(&m, 1e-10).unwrap();
        let mpm = m.dot(&pinv).dot(&m);
        let pmp = pinv.dot(&m).dot(&pinv);
        assert!(max_abs(&(&mpm - &m)) <= 1e-8, "M M+ M != M");
        assert!(max_abs(&(&pmp - &pinv)) <= 1e-8, "M+ M M+ != M+");
    }

    #[test]
    fn pseudoinverse_rejects_empty() {
        let m = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            pseudoinverse(&m, 1e-10),
            Err(DampError::InvalidArgument(_))
        ));
    }

    #[test]
    fn pseudoinverse_of_orthonormal_columns_is_transpose() {
        let cols = random_matrix(12, 4, 11);
        let q = orthonormal_basis(&cols, DEFAULT_ORTH_TOL).unwrap();
        assert_eq!(q.ncols(), 4);
        let pinv = pseudoinverse(&q, DEFAULT_RCOND).unwrap();
        assert!(max_abs(&(&pinv - &q.t().to_owned())) <= 1e-8);
    }

    #[test]
    fn orthonormal_basis_drops_duplicate_column() {
        let mut cols = Array2::<f64>::zeros((4, 2));
        cols[[0, 0]] = 1.0;
        cols[[0, 1]] = 1.0;
        let q = orthonormal_basis(&cols, DEFAULT_ORTH_TOL).unwrap();
        assert_eq!(q.dim(), (4, 1));
        assert!((q[[0, 0]].abs() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn orthonormal_basis_keeps_independent_unit_vectors() {
        let mut cols = Array2::<f64>::zeros((3, 2));
        cols[[0, 0]] = 1.0;
        cols[[1, 1]] = 1.0;
        let q = orthonormal_basis(&cols, DEFAULT_ORTH_TOL).unwrap();
        assert_eq!(q.dim(), (3, 2));
        let gram = q.t().dot(&q);
        assert!(max_abs(&(&gram - &Array2::<f64>::eye(2))) <= 1e-12);
    }

    #[test]
    fn orthonormal_basis_preserves_span() {
        let cols = random_matrix(8, 3, 3);
        let q = orthonormal_basis(&cols, DEFAULT_ORTH_TOL).unwrap();
        assert_eq!(q.ncols(), 3);
        // Every input column must be reconstructed by the projector Q Q^T.
        let proj = q.dot(&q.t().dot(&cols));
        assert!(max_abs(&(&proj - &cols)) <= 1e-8);
    }

    #[test]
    fn orthonormal_basis_all_dropped_gives_empty_signal() {
        let cols = Array2::<f64>::zeros((5, 3));
        let q = orthonormal_basis(&cols, DEFAULT_ORTH_TOL).unwrap();
        assert_eq!(q.dim(), (5, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projector_is_symmetric_and_idempotent(seed in 0u64..500, rows in 1usize..64, cols in 1usize..16) {
            let m = random_matrix(rows, cols, seed);
            let pinv = pseudoinverse(&m, DEFAULT_RCOND).unwrap();
            let p = m.dot(&pinv);
            let sym_err = max_abs(&(&p - &p.t().to_owned()));
            let idem_err = max_abs(&(&p.dot(&p) - &p));
            prop_assert!(sym_err <= 1e-8, "projector not symmetric: {}", sym_err);
            prop_assert!(idem_err <= 1e-8, "projector not idempotent: {}", idem_err);
        }

        #[test]
        fn basis_columns_are_orthonormal(seed in 0u64..500, d in 1usize..32, k in 1usize..8) {
            let cols = random_matrix(d, k, seed);
            let q = orthonormal_basis(&cols, DEFAULT_ORTH_TOL).unwrap();
            if q.ncols() > 0 {
                let gram = q.t().dot(&q);
                let err = max_abs(&(&gram - &Array2::<f64>::eye(q.ncols())));
                prop_assert!(err <= 1e-8, "Q^T Q deviates from I by {}", err);
            }
        }
    }
}
