//! Frame alignment between embeddings of overlapping blocks.
//!
//! Each embedding lives in its own arbitrary coordinate frame; two blocks
//! that share entities can have their frames reconciled by comparing the
//! latent positions of the shared entities. Three solvers:
//! - `procrustes`: orthogonal map minimizing `‖aO − b‖_F` (PSD regime);
//! - `lsq_align`: unconstrained d×d least-squares map `a†b` (indefinite
//!   regime, where the frame ambiguity is indefinite-orthogonal and the
//!   relaxation is solved without projecting back onto that group);
//! - asymmetric averaging of the row-side and column-side least-squares
//!   maps, falling back to whichever side has enough overlap.
//!
//! Maps compose left-to-right along a chain of blocks.

use crate::block_model::Overlap;
use crate::error::{warn, CmmiError, Result};
use crate::linalg;
use crate::spectral_embed::Embedding;
use ndarray::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignKind {
    Orthogonal,
    GeneralLinear,
}

/// A fitted frame map taking `from_block` coordinates to `to_block`
/// coordinates: `x_from · w ≈ x_to` on the shared entities.
#[derive(Clone, Debug)]
pub struct AlignmentMap {
    pub from_block: String,
    pub to_block: String,
    pub w: Array2<f64>,
    pub kind: AlignKind,
    pub overlap_size: usize,
    /// Set when the fit was numerically non-unique (rank-deficient cross
    /// Gram); the returned map is still the deterministic polar factor.
    pub degenerate: bool,
}

/// Orthogonal Procrustes: `W = W₁W₂^⊤` from the SVD `a^⊤b = W₁SW₂^⊤`,
/// minimizing `‖aO − b‖_F` over orthogonal `O`.
pub fn procrustes(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(procrustes_flagged(a, b)?.0)
}

/// As [`procrustes`], also reporting whether the solution was non-unique.
pub fn procrustes_flagged(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
) -> Result<(Array2<f64>, bool)> {
    let (m, d) = a.dim();
    if b.dim() != (m, d) {
        return Err(CmmiError::Data(format!(
            "procrustes inputs must share a shape, got {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if m < d {
        return Err(CmmiError::Data(format!(
            "procrustes needs at least d={d} overlap rows, got {m}"
        )));
    }
    let cross = a.t().dot(b);
    let (u, s, vt) = linalg::svd_thin(&cross)?;
    let degenerate = s[0] <= 0.0 || s[d - 1] <= 1e-12 * s[0];
    if degenerate {
        warn("procrustes: rank-deficient cross Gram; the orthogonal map is not unique");
    }
    Ok((u.dot(&vt), degenerate))
}

/// Unconstrained least squares `argmin_O ‖aO − b‖_F = a†b`, computed via the
/// SVD pseudoinverse of `a`. `rank_tol` defaults to `1e-10 · σ_max(a)`.
pub fn lsq_align(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    rank_tol: Option<f64>,
) -> Result<Array2<f64>> {
    let (m, d) = a.dim();
    if b.dim() != (m, d) {
        return Err(CmmiError::Data(format!(
            "least-squares alignment inputs must share a shape, got {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if m < d {
        return Err(CmmiError::Data(format!(
            "least-squares alignment needs at least d={d} overlap rows, got {m}"
        )));
    }
    let (u, s, vt) = linalg::svd_thin(&a.to_owned())?;
    let tol = rank_tol.unwrap_or(1e-10 * s[0]);
    if s[d - 1] <= tol {
        return Err(CmmiError::Numerical(format!(
            "overlap matrix is rank deficient (σ_min = {} at tolerance {tol}); \
             the least-squares alignment is not identified",
            s[d - 1]
        )));
    }
    // a† b = V S^{-1} U^T b
    let utb = u.t().dot(b);
    let mut scaled = utb;
    for k in 0..d {
        scaled.row_mut(k).mapv_inplace(|v| v / s[k]);
    }
    Ok(vt.t().dot(&scaled))
}

fn check_pair(e_a: &Embedding, e_b: &Embedding, ov: &Overlap) -> Result<usize> {
    if ov.block_a != e_a.block_id || ov.block_b != e_b.block_id {
        return Err(CmmiError::Data(format!(
            "overlap ({}, {}) does not match embeddings ({}, {})",
            ov.block_a, ov.block_b, e_a.block_id, e_b.block_id
        )));
    }
    let d = e_a.x.ncols();
    if e_b.x.ncols() != d {
        return Err(CmmiError::Data(format!(
            "embeddings {} and {} have different ranks ({} vs {})",
            e_a.block_id,
            e_b.block_id,
            d,
            e_b.x.ncols()
        )));
    }
    Ok(d)
}

/// Orthogonal alignment of two PSD embeddings over their shared row
/// entities.
pub fn align_pair_psd(e_a: &Embedding, e_b: &Embedding, ov: &Overlap) -> Result<AlignmentMap> {
    let d = check_pair(e_a, e_b, ov)?;
    let n_ov = ov.shared_rows.len();
    if n_ov < d {
        return Err(CmmiError::Data(format!(
            "blocks {} and {} share only {n_ov} row entities; alignment needs at least d={d}",
            e_a.block_id, e_b.block_id
        )));
    }
    let xa = linalg::take_rows(&e_a.x, &ov.local_rows_a);
    let xb = linalg::take_rows(&e_b.x, &ov.local_rows_b);
    let (w, degenerate) = procrustes_flagged(&xa.view(), &xb.view())?;
    Ok(AlignmentMap {
        from_block: e_a.block_id.clone(),
        to_block: e_b.block_id.clone(),
        w,
        kind: AlignKind::Orthogonal,
        overlap_size: n_ov,
        degenerate,
    })
}

/// Least-squares alignment of two indefinite embeddings over their shared
/// row entities.
pub fn align_pair_indefinite(
    e_a: &Embedding,
    e_b: &Embedding,
    ov: &Overlap,
) -> Result<AlignmentMap> {
    let d = check_pair(e_a, e_b, ov)?;
    let n_ov = ov.shared_rows.len();
    if n_ov < d {
        return Err(CmmiError::Data(format!(
            "blocks {} and {} share only {n_ov} row entities; alignment needs at least d={d}",
            e_a.block_id, e_b.block_id
        )));
    }
    let xa = linalg::take_rows(&e_a.x, &ov.local_rows_a);
    let xb = linalg::take_rows(&e_b.x, &ov.local_rows_b);
    let w = lsq_align(&xa.view(), &xb.view(), None)?;
    Ok(AlignmentMap {
        from_block: e_a.block_id.clone(),
        to_block: e_b.block_id.clone(),
        w,
        kind: AlignKind::GeneralLinear,
        overlap_size: n_ov,
        degenerate: false,
    })
}

/// Alignment of two asymmetric embeddings. Uses the row-side map fitted on
/// the left positions, the column-side map fitted on the right positions,
/// or their average when both overlaps reach rank `d`.
pub fn align_pair_asymmetric(
    e_a: &Embedding,
    e_b: &Embedding,
    ov: &Overlap,
) -> Result<AlignmentMap> {
    let d = check_pair(e_a, e_b, ov)?;
    let rows_ok = ov.shared_rows.len() >= d;
    let cols_ok = ov.shared_cols.len() >= d;
    if !rows_ok && !cols_ok {
        return Err(CmmiError::Data(format!(
            "blocks {} and {} share only {} row and {} column entities; \
             alignment needs at least d={d} on one side",
            e_a.block_id,
            e_b.block_id,
            ov.shared_rows.len(),
            ov.shared_cols.len()
        )));
    }
    let w_x = if rows_ok {
        let xa = linalg::take_rows(&e_a.x, &ov.local_rows_a);
        let xb = linalg::take_rows(&e_b.x, &ov.local_rows_b);
        Some(lsq_align(&xa.view(), &xb.view(), None)?)
    } else {
        None
    };
    let w_y = if cols_ok {
        let ya = e_a.y.as_ref().ok_or_else(|| {
            CmmiError::Data(format!("embedding {} has no right positions", e_a.block_id))
        })?;
        let yb = e_b.y.as_ref().ok_or_else(|| {
            CmmiError::Data(format!("embedding {} has no right positions", e_b.block_id))
        })?;
        let ya_ov = linalg::take_rows(ya, &ov.local_cols_a);
        let yb_ov = linalg::take_rows(yb, &ov.local_cols_b);
        // The column-side frame difference satisfies y_b ≈ y_a · W^{-T}, so
        // the map solving ‖y_b O − y_a‖ is W^⊤; transpose it back.
        Some(lsq_align(&yb_ov.view(), &ya_ov.view(), None)?.t().to_owned())
    } else {
        None
    };
    let (w, overlap_size) = match (w_x, w_y) {
        (Some(wx), Some(wy)) => (
            (&wx + &wy).mapv(|v| v / 2.0),
            ov.shared_rows.len().min(ov.shared_cols.len()),
        ),
        (Some(wx), None) => (wx, ov.shared_rows.len()),
        (None, Some(wy)) => (wy, ov.shared_cols.len()),
        (None, None) => unreachable!("at least one side qualified above"),
    };
    Ok(AlignmentMap {
        from_block: e_a.block_id.clone(),
        to_block: e_b.block_id.clone(),
        w,
        kind: AlignKind::GeneralLinear,
        overlap_size,
        degenerate: false,
    })
}

/// Left-to-right product of a chain of alignment maps.
pub fn compose(chain: &[AlignmentMap]) -> Result<Array2<f64>> {
    let first = chain
        .first()
        .ok_or_else(|| CmmiError::Data("cannot compose an empty chain of alignments".into()))?;
    let d = first.w.nrows();
    let mut product = first.w.clone();
    for (prev, next) in chain.iter().zip(chain.iter().skip(1)) {
        if prev.to_block != next.from_block {
            return Err(CmmiError::Data(format!(
                "broken chain: map into {} followed by map from {}",
                prev.to_block, next.from_block
            )));
        }
        if next.w.nrows() != d || next.w.ncols() != d {
            return Err(CmmiError::Data(format!(
                "mixed alignment dimensions in chain: {d} vs {}",
                next.w.nrows()
            )));
        }
        product = product.dot(&next.w);
    }
    Ok(product)
}
