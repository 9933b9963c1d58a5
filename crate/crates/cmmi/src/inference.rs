//! Entrywise variance estimates and normal-approximation confidence
//! intervals for recovered entries.
//!
//! The error of a recovered entry (s,t) is asymptotically normal with
//! variance
//!
//! ```text
//! σ̃²_{s,t} = Σ_{k1} (B_fwd[k1,t])² D_first[s,k1]
//!           + Σ_{k2} (B_bwd[k2,s])² D_last[t,k2]
//! ```
//!
//! where `D` captures the per-cell observation variance of the endpoint
//! blocks and the `B` matrices project that noise through the latent
//! positions and the composed frame map. Two ways to fill the pieces:
//! - plug-in (real data): `B̂` from the endpoint embeddings and the
//!   composed map, `D̂ = (A − X̂X̂^⊤)²` entrywise;
//! - population (simulation): exact `D = [Var(N) + (1−q)·P²]/q` and `B`
//!   from the true latent positions.

use crate::block_model::RescaledBlock;
use crate::error::{warn, CmmiError, Result};
use crate::integrate::ChainRecovery;
use crate::linalg;
use ndarray::prelude::*;

/// Inverse standard-normal CDF via a rational approximation (Acklam-style
/// minimax coefficients; |relative error| < 1.15e-9 across (0,1)).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || p == 0.0 || p == 1.0 || p.is_nan() {
        return Err(CmmiError::Data(format!(
            "normal quantile needs p strictly inside (0,1), got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };
    Ok(x)
}

/// The four matrices entering the entrywise variance formula.
#[derive(Clone, Debug)]
pub struct VarianceComponents {
    /// `n_first × n_last` forward projection.
    pub b_fwd: Array2<f64>,
    /// `n_last × n_first` backward projection.
    pub b_bwd: Array2<f64>,
    /// Per-cell observation variances of the first block.
    pub d_first: Array2<f64>,
    /// Per-cell observation variances of the last block.
    pub d_last: Array2<f64>,
}

/// Plug-in components from a completed chain recovery and the endpoint
/// blocks (whose rescaled values supply the residual matrices).
pub fn variance_components(
    recovery: &ChainRecovery,
    first: &RescaledBlock,
    last: &RescaledBlock,
) -> Result<VarianceComponents> {
    let e_first = recovery
        .embeddings
        .first()
        .ok_or_else(|| CmmiError::Data("chain recovery holds no embeddings".into()))?;
    let e_last = recovery.embeddings.last().expect("non-empty checked");
    if e_first.block_id != first.block_id || e_last.block_id != last.block_id {
        return Err(CmmiError::Data(format!(
            "endpoint blocks ({}, {}) do not match the recovery's chain ({}, {})",
            first.block_id, last.block_id, e_first.block_id, e_last.block_id
        )));
    }
    if first.row_entities.intersect(&last.row_entities).0.len() > 0 {
        warn(&format!(
            "chain endpoints {} and {} share entities; the independence assumption \
             behind the variance formula is violated and the intervals are approximate",
            first.block_id, last.block_id
        ));
    }
    let xf = &e_first.x;
    let xl = &e_last.x;
    let gram_f = linalg::inv_small(&xf.t().dot(xf))?;
    let gram_l = linalg::inv_small(&xl.t().dot(xl))?;
    let w = &recovery.composed_w;
    let b_fwd = xf.dot(&gram_f).dot(w).dot(&xl.t());
    let b_bwd = xl.dot(&gram_l).dot(&w.t()).dot(&xf.t());
    let rec_f = xf.dot(&xf.t());
    let rec_l = xl.dot(&xl.t());
    let d_first = (&first.a - &rec_f).mapv(|v| v * v);
    let d_last = (&last.a - &rec_l).mapv(|v| v * v);
    Ok(VarianceComponents { b_fwd, b_bwd, d_first, d_last })
}

/// Population components for simulation studies: exact `D = [sigma2 +
/// (1−q)·P²]/q` per endpoint and projections through the true latent
/// positions (which share one global frame, so no composed map appears).
pub fn population_variance_components(
    x_first: &ArrayView2<f64>,
    x_last: &ArrayView2<f64>,
    p_first: &ArrayView2<f64>,
    p_last: &ArrayView2<f64>,
    sigma2: f64,
    q_first: f64,
    q_last: f64,
) -> Result<VarianceComponents> {
    if !(0.0..=1.0).contains(&q_first) || q_first == 0.0 || !(0.0..=1.0).contains(&q_last) || q_last == 0.0
    {
        return Err(CmmiError::Data(format!(
            "sampling rates must lie in (0, 1], got {q_first} and {q_last}"
        )));
    }
    if p_first.dim() != (x_first.nrows(), x_first.nrows())
        || p_last.dim() != (x_last.nrows(), x_last.nrows())
    {
        return Err(CmmiError::Data(
            "population matrices do not match the latent position shapes".into(),
        ));
    }
    let gram_f = linalg::inv_small(&x_first.t().dot(x_first))?;
    let gram_l = linalg::inv_small(&x_last.t().dot(x_last))?;
    let b_fwd = x_first.dot(&gram_f).dot(&x_last.t());
    let b_bwd = x_last.dot(&gram_l).dot(&x_first.t());
    let d_first = p_first.mapv(|p| (sigma2 + (1.0 - q_first) * p * p) / q_first);
    let d_last = p_last.mapv(|p| (sigma2 + (1.0 - q_last) * p * p) / q_last);
    Ok(VarianceComponents { b_fwd, b_bwd, d_first, d_last })
}

/// Standard error of one recovered entry.
pub fn entry_stderr(vc: &VarianceComponents, s: usize, t: usize) -> Result<f64> {
    let (n0, nl) = vc.b_fwd.dim();
    if s >= n0 || t >= nl {
        return Err(CmmiError::Data(format!(
            "entry ({s}, {t}) out of range for a {n0}x{nl} recovery"
        )));
    }
    let mut var = 0.0;
    for k1 in 0..n0 {
        var += vc.b_fwd[[k1, t]].powi(2) * vc.d_first[[s, k1]];
    }
    for k2 in 0..nl {
        var += vc.b_bwd[[k2, s]].powi(2) * vc.d_last[[t, k2]];
    }
    Ok(var.sqrt())
}

/// Standard errors for every entry at once:
/// `stderr² = D_first·(B_fwd∘B_fwd) + (D_last·(B_bwd∘B_bwd))^⊤`.
pub fn stderr_matrix(vc: &VarianceComponents) -> Array2<f64> {
    let b_fwd_sq = vc.b_fwd.mapv(|v| v * v);
    let b_bwd_sq = vc.b_bwd.mapv(|v| v * v);
    let term1 = vc.d_first.dot(&b_fwd_sq);
    let term2 = vc.d_last.dot(&b_bwd_sq);
    let mut out = term1 + term2.t();
    out.mapv_inplace(f64::sqrt);
    out
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CmmiError::Data(format!(
            "confidence level alpha must lie in (0,1), got {alpha}"
        )));
    }
    Ok(())
}

/// Two-sided normal interval `est ± z_{α/2}·stderr`.
pub fn confidence_interval(estimate: f64, stderr: f64, alpha: f64) -> Result<(f64, f64)> {
    if stderr < 0.0 {
        return Err(CmmiError::Data(format!("negative standard error {stderr}")));
    }
    check_alpha(alpha)?;
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    Ok((estimate - z * stderr, estimate + z * stderr))
}

/// Interval bounds for a whole recovered rectangle.
pub fn ci_matrices(
    estimate: &ArrayView2<f64>,
    stderr: &ArrayView2<f64>,
    alpha: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if estimate.dim() != stderr.dim() {
        return Err(CmmiError::Data(format!(
            "estimate shape {:?} does not match stderr shape {:?}",
            estimate.dim(),
            stderr.dim()
        )));
    }
    check_alpha(alpha)?;
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let lower = estimate - &(stderr.mapv(|s| z * s));
    let upper = estimate + &(stderr.mapv(|s| z * s));
    Ok((lower, upper))
}
