//! Spectral embeddings of rescaled blocks.
//!
//! Three flavors, one per matrix regime:
//! - PSD: top-`d` eigenpairs, `x = Û diag(λ̂)^{1/2}`;
//! - indefinite: the `d_plus` largest positive plus `d_minus` most negative
//!   eigenpairs, `x = Û |Λ̂|^{1/2}`, so that `x I± x^⊤` reconstructs the
//!   signed truncation (`I±` is `diag(+1,..,+1,−1,..,−1)`);
//! - asymmetric: top-`d` singular triplets, `x = Û Σ̂^{1/2}`,
//!   `y = V̂ Σ̂^{1/2}`.
//!
//! Plus the profile-likelihood rank selector and the per-block residual
//! quality score `c = residual_fro · ln(n) / n^{3/2}` used to weight blocks
//! when building chains.

use crate::block_model::RescaledBlock;
use crate::error::{warn, CmmiError, Result};
use crate::linalg;
use ndarray::prelude::*;

/// Absolute tolerance for calling an eigenvalue positive/negative.
pub const EIGENVALUE_SIGN_TOL: f64 = 1e-10;
/// Relative tolerance below which a singular value counts as zero.
pub const SINGULAR_VALUE_REL_TOL: f64 = 1e-13;

/// Number of positive and negative directions retained by an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signature {
    pub d_plus: usize,
    pub d_minus: usize,
}

impl Signature {
    pub fn new(d_plus: usize, d_minus: usize) -> Result<Self> {
        if d_plus + d_minus == 0 {
            return Err(CmmiError::Data(
                "signature must retain at least one direction".into(),
            ));
        }
        Ok(Self { d_plus, d_minus })
    }

    pub fn d(&self) -> usize {
        self.d_plus + self.d_minus
    }

    /// The metric matrix `I± = diag(+1 × d_plus, −1 × d_minus)`.
    pub fn metric(&self) -> Array2<f64> {
        let d = self.d();
        let mut m = Array2::zeros((d, d));
        for k in 0..self.d_plus {
            m[[k, k]] = 1.0;
        }
        for k in self.d_plus..d {
            m[[k, k]] = -1.0;
        }
        m
    }
}

/// Which estimator family a block belongs to, with its retained rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeSpec {
    Psd { d: usize },
    Indefinite { signature: Signature },
    Asymmetric { d: usize },
}

impl ModeSpec {
    pub fn d(&self) -> usize {
        match self {
            ModeSpec::Psd { d } | ModeSpec::Asymmetric { d } => *d,
            ModeSpec::Indefinite { signature } => signature.d(),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self, ModeSpec::Asymmetric { .. })
    }
}

/// Latent positions extracted from one rescaled block.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub block_id: String,
    /// Left/latent positions, `n × d`.
    pub x: Array2<f64>,
    /// Right positions (`m × d`), present only for asymmetric embeddings.
    pub y: Option<Array2<f64>>,
    /// Retained eigen/singular values, ordered as the stored columns:
    /// positives descending, then negatives in algebraically descending
    /// order (so the whole list is algebraically descending).
    pub spectrum: Vec<f64>,
    pub signature: Signature,
    /// Frobenius norm of the discarded part of the decomposition.
    pub residual_fro: f64,
}

/// Residual quality score of a block; lower means a cleaner block.
#[derive(Clone, Debug)]
pub struct ResidualScore {
    pub block_id: String,
    pub c: f64,
}

/// Embed per `mode`, checking the block's symmetry against the mode.
pub fn embed(block: &RescaledBlock, mode: &ModeSpec) -> Result<Embedding> {
    match mode {
        ModeSpec::Psd { d } => embed_psd(block, *d),
        ModeSpec::Indefinite { signature } => embed_indefinite(block, *signature),
        ModeSpec::Asymmetric { d } => embed_asymmetric(block, *d),
    }
}

fn require_symmetric(block: &RescaledBlock) -> Result<()> {
    if !block.symmetric {
        return Err(CmmiError::Data(format!(
            "block {} is not symmetric; eigen-based embeddings need symmetric blocks",
            block.block_id
        )));
    }
    Ok(())
}

fn warn_degenerate_gap(block_id: &str, last_kept: f64, first_dropped: f64, scale: f64) {
    if (last_kept - first_dropped).abs() <= 1e-10 * scale.abs().max(1.0) {
        warn(&format!(
            "block {block_id}: retained/discarded spectrum boundary is numerically degenerate \
             ({last_kept} vs {first_dropped}); the embedding subspace is not unique"
        ));
    }
}

pub fn embed_psd(block: &RescaledBlock, d: usize) -> Result<Embedding> {
    require_symmetric(block)?;
    let n = block.n_rows();
    if d == 0 || d > n {
        return Err(CmmiError::Data(format!(
            "block {}: rank d={d} out of range for an {n}x{n} block",
            block.block_id
        )));
    }
    let (vals, vecs) = linalg::eigh_desc(&block.a)?;
    if vals[d - 1] <= EIGENVALUE_SIGN_TOL {
        return Err(CmmiError::Numerical(format!(
            "block {}: eigenvalue {} at requested rank {d} is not positive; \
             the block is rank deficient for a PSD embedding",
            block.block_id,
            vals[d - 1]
        )));
    }
    if d < n {
        warn_degenerate_gap(&block.block_id, vals[d - 1], vals[d], vals[0]);
    }
    let mut x = vecs.slice(s![.., ..d]).to_owned();
    for k in 0..d {
        let scale = vals[k].sqrt();
        x.column_mut(k).mapv_inplace(|v| v * scale);
    }
    linalg::fix_column_signs(&mut x);
    let residual_fro = vals[d..].iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(Embedding {
        block_id: block.block_id.clone(),
        x,
        y: None,
        spectrum: vals[..d].to_vec(),
        signature: Signature { d_plus: d, d_minus: 0 },
        residual_fro,
    })
}

pub fn embed_indefinite(block: &RescaledBlock, sig: Signature) -> Result<Embedding> {
    require_symmetric(block)?;
    let n = block.n_rows();
    let d = sig.d();
    if d == 0 || d > n {
        return Err(CmmiError::Data(format!(
            "block {}: signature ({},{}) out of range for an {n}x{n} block",
            block.block_id, sig.d_plus, sig.d_minus
        )));
    }
    let (vals, vecs) = linalg::eigh_desc(&block.a)?;
    if sig.d_plus > 0 && vals[sig.d_plus - 1] <= EIGENVALUE_SIGN_TOL {
        return Err(CmmiError::Numerical(format!(
            "block {}: only {} eigenvalues are positive beyond tolerance, {} requested",
            block.block_id,
            vals.iter().filter(|&&v| v > EIGENVALUE_SIGN_TOL).count(),
            sig.d_plus
        )));
    }
    if sig.d_minus > 0 && vals[n - sig.d_minus] >= -EIGENVALUE_SIGN_TOL {
        return Err(CmmiError::Numerical(format!(
            "block {}: only {} eigenvalues are negative beyond tolerance, {} requested",
            block.block_id,
            vals.iter().filter(|&&v| v < -EIGENVALUE_SIGN_TOL).count(),
            sig.d_minus
        )));
    }
    // Retained columns: indices 0..d_plus and n−d_minus..n of the
    // algebraically descending decomposition, kept in that order.
    let kept: Vec<usize> = (0..sig.d_plus).chain(n - sig.d_minus..n).collect();
    if d < n {
        let scale = vals[0].abs().max(vals[n - 1].abs());
        if sig.d_plus > 0 {
            warn_degenerate_gap(&block.block_id, vals[sig.d_plus - 1], vals[sig.d_plus], scale);
        }
        if sig.d_minus > 0 {
            warn_degenerate_gap(
                &block.block_id,
                vals[n - sig.d_minus],
                vals[n - sig.d_minus - 1],
                scale,
            );
        }
    }
    let mut x = Array2::zeros((n, d));
    let mut spectrum = Vec::with_capacity(d);
    for (col, &idx) in kept.iter().enumerate() {
        let scale = vals[idx].abs().sqrt();
        for r in 0..n {
            x[[r, col]] = vecs[[r, idx]] * scale;
        }
        spectrum.push(vals[idx]);
    }
    linalg::fix_column_signs(&mut x);
    let residual_fro = vals[sig.d_plus..n - sig.d_minus]
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    Ok(Embedding {
        block_id: block.block_id.clone(),
        x,
        y: None,
        spectrum,
        signature: sig,
        residual_fro,
    })
}

pub fn embed_asymmetric(block: &RescaledBlock, d: usize) -> Result<Embedding> {
    let (n, m) = (block.n_rows(), block.n_cols());
    if d == 0 || d > n.min(m) {
        return Err(CmmiError::Data(format!(
            "block {}: rank d={d} out of range for an {n}x{m} block",
            block.block_id
        )));
    }
    let (mut u, s, mut vt) = linalg::svd_thin(&block.a)?;
    if s[0] <= 0.0 || s[d - 1] <= SINGULAR_VALUE_REL_TOL * s[0] {
        return Err(CmmiError::Numerical(format!(
            "block {}: singular value {} at requested rank {d} is zero within tolerance",
            block.block_id,
            s[d - 1]
        )));
    }
    if d < s.len() {
        warn_degenerate_gap(&block.block_id, s[d - 1], s[d], s[0]);
    }
    linalg::fix_svd_signs(&mut u, &mut vt);
    let mut x = u.slice(s![.., ..d]).to_owned();
    let mut y = vt.slice(s![..d, ..]).t().to_owned();
    for k in 0..d {
        let scale = s[k].sqrt();
        x.column_mut(k).mapv_inplace(|v| v * scale);
        y.column_mut(k).mapv_inplace(|v| v * scale);
    }
    let residual_fro = s[d..].iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(Embedding {
        block_id: block.block_id.clone(),
        x,
        y: Some(y),
        spectrum: s[..d].to_vec(),
        signature: Signature { d_plus: d, d_minus: 0 },
        residual_fro,
    })
}

/// Profile-likelihood elbow selection over a descending nonnegative
/// spectrum: each split point is scored by a two-piece Gaussian likelihood
/// with per-piece means and a pooled variance; the best split is the rank.
pub fn select_rank(spectrum_full: &[f64]) -> Result<usize> {
    let n = spectrum_full.len();
    if n < 3 {
        return Err(CmmiError::Data(format!(
            "rank selection needs at least 3 spectrum values, got {n}"
        )));
    }
    for w in spectrum_full.windows(2) {
        if w[0] < w[1] {
            return Err(CmmiError::Data(
                "rank selection expects a descending spectrum".into(),
            ));
        }
    }
    if spectrum_full[n - 1] < 0.0 {
        return Err(CmmiError::Data(
            "rank selection expects nonnegative spectrum values".into(),
        ));
    }
    if spectrum_full[0] == spectrum_full[n - 1] {
        warn("rank selection: constant spectrum has no elbow; returning 1");
        return Ok(1);
    }
    let mut best_k = 1usize;
    let mut best_ll = f64::NEG_INFINITY;
    for k in 1..n {
        let (head, tail) = spectrum_full.split_at(k);
        let mu1 = head.iter().sum::<f64>() / head.len() as f64;
        let mu2 = tail.iter().sum::<f64>() / tail.len() as f64;
        let ss: f64 = head.iter().map(|v| (v - mu1).powi(2)).sum::<f64>()
            + tail.iter().map(|v| (v - mu2).powi(2)).sum::<f64>();
        let sigma2 = ss / n as f64;
        let ll = if sigma2 == 0.0 {
            f64::INFINITY
        } else {
            -(n as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma2).ln() - n as f64 / 2.0
        };
        if ll > best_ll {
            best_ll = ll;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Quality score `c = residual_fro · ln(n) / n^{3/2}` (natural log).
pub fn residual_score(e: &Embedding) -> Result<ResidualScore> {
    let n = e.x.nrows();
    if n < 2 {
        return Err(CmmiError::Data(format!(
            "block {}: residual score needs n >= 2, got {n}",
            e.block_id
        )));
    }
    let nf = n as f64;
    Ok(ResidualScore {
        block_id: e.block_id.clone(),
        c: e.residual_fro * nf.ln() / nf.powf(1.5),
    })
}
