//! Thin wrappers around the dense LAPACK routines, plus the deterministic
//! post-processing conventions (ordering, signs) used throughout the crate.
//!
//! Parallelism in this crate lives at the replicate/block level, so the BLAS
//! backend is pinned to a single thread on first use: stacking a BLAS thread
//! pool on top of ours both oversubscribes the machine and makes reductions
//! run in schedule-dependent order, which would break bit-for-bit
//! reproducibility of outputs.

use crate::error::{CmmiError, Result};
use ndarray::prelude::*;
use ndarray_linalg::{Eigh, Inverse, JobSvd, QR, SVDDC, UPLO};
use std::sync::Once;

extern "C" {
    fn openblas_set_num_threads(n: std::os::raw::c_int);
}

static BLAS_INIT: Once = Once::new();

/// Pin OpenBLAS to one thread. Called by every wrapper; safe to call often.
pub fn init_backend() {
    BLAS_INIT.call_once(|| unsafe { openblas_set_num_threads(1) });
}

fn numerical(op: &str, e: impl std::fmt::Display) -> CmmiError {
    CmmiError::Numerical(format!("{op}: {e}"))
}

/// Full symmetric eigendecomposition with eigenvalues in algebraically
/// descending order and eigenvectors as the matching columns.
///
/// Only the lower triangle of `a` is read, so inputs that are symmetric up to
/// rounding are handled consistently.
pub fn eigh_desc(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    init_backend();
    if a.nrows() != a.ncols() {
        return Err(CmmiError::Data(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let (vals, vecs) = a.eigh(UPLO::Lower).map_err(|e| numerical("eigh", e))?;
    // LAPACK returns ascending order; flip to descending.
    let n = vals.len();
    let vals_desc: Vec<f64> = vals.iter().rev().copied().collect();
    let mut vecs_desc = Array2::zeros((n, n));
    for k in 0..n {
        vecs_desc.column_mut(k).assign(&vecs.column(n - 1 - k));
    }
    Ok((vals_desc, vecs_desc))
}

/// Thin SVD `a = u diag(s) vt` with `u: m x k`, `s: k`, `vt: k x n`,
/// `k = min(m, n)`, singular values descending.
pub fn svd_thin(a: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
    init_backend();
    let (u, s, vt) = a
        .svddc(JobSvd::Some)
        .map_err(|e| numerical("svd", e))?;
    let u = u.ok_or_else(|| CmmiError::Numerical("svd returned no left vectors".into()))?;
    let vt = vt.ok_or_else(|| CmmiError::Numerical("svd returned no right vectors".into()))?;
    Ok((u, s.to_vec(), vt))
}

/// Thin QR factorization; `q` has orthonormal columns, `r` is upper
/// triangular k x n with k = min(m, n).
pub fn qr_thin(a: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    init_backend();
    a.qr().map_err(|e| numerical("qr", e))
}

/// Inverse of a small square matrix (alignment frames, Gram matrices).
pub fn inv_small(a: &Array2<f64>) -> Result<Array2<f64>> {
    init_backend();
    a.inv().map_err(|e| numerical("matrix inverse", e))
}

/// Deterministic sign convention for a set of basis columns: within each
/// column the entry of largest absolute value is made positive, ties broken
/// by the lowest row index. Eigenvectors and singular vectors are only
/// defined up to sign, and downstream alignment absorbs any convention; this
/// one makes repeated runs bit-identical.
pub fn fix_column_signs(x: &mut Array2<f64>) {
    let flips = column_sign_flips(&x.view());
    for (k, &flip) in flips.iter().enumerate() {
        if flip {
            x.column_mut(k).mapv_inplace(|v| -v);
        }
    }
}

/// Same convention for a singular-vector pair: the left column fixes the
/// sign, and the matching right-vector row flips with it so `u s vt` is
/// unchanged.
pub fn fix_svd_signs(u: &mut Array2<f64>, vt: &mut Array2<f64>) {
    let flips = column_sign_flips(&u.view());
    for (k, &flip) in flips.iter().enumerate() {
        if flip {
            u.column_mut(k).mapv_inplace(|v| -v);
            vt.row_mut(k).mapv_inplace(|v| -v);
        }
    }
}

fn column_sign_flips(x: &ArrayView2<f64>) -> Vec<bool> {
    (0..x.ncols())
        .map(|k| {
            let col = x.column(k);
            let mut best = 0usize;
            let mut best_abs = f64::NEG_INFINITY;
            for (i, &v) in col.iter().enumerate() {
                if v.abs() > best_abs {
                    best_abs = v.abs();
                    best = i;
                }
            }
            col[best] < 0.0
        })
        .collect()
}

/// Frobenius norm, summed in row-major order (deterministic).
pub fn fro_norm(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest absolute entry.
pub fn max_abs(a: &ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Gather a subset of rows (used to restrict embeddings to an overlap).
pub fn take_rows(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), a.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).assign(&a.row(r));
    }
    out
}
