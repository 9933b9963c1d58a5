//! Chain-linked recovery of an unobserved block.
//!
//! Given an ordered chain of overlapping rescaled blocks, embed each block,
//! align consecutive frames over their shared entities, compose the
//! alignment maps, and form the product estimate for the rectangle spanned
//! by the first block's rows and the last block's rows (symmetric regimes)
//! or columns (asymmetric). A one-link chain is the plain pairwise
//! estimator; a zero-link chain (single block) reconstructs the block
//! itself.

use crate::align::{self, AlignmentMap};
use crate::block_model::{compute_overlap_rescaled, EntityIndexSet, RescaledBlock};
use crate::error::{CmmiError, Result};
use crate::linalg;
use crate::spectral_embed::{self, Embedding, ModeSpec, Signature};
use ndarray::prelude::*;
use std::collections::HashMap;

/// Output rectangle of a chain recovery. `stderr` and the interval bounds
/// are filled by the inference layer when requested.
#[derive(Clone, Debug)]
pub struct RecoveredBlock {
    pub row_entities: EntityIndexSet,
    pub col_entities: EntityIndexSet,
    pub estimate: Array2<f64>,
    pub stderr: Option<Array2<f64>>,
    pub ci_lower: Option<Array2<f64>>,
    pub ci_upper: Option<Array2<f64>>,
    /// Block ids along the chain used, first to last.
    pub chain: Vec<String>,
}

/// A recovery plus the intermediate objects the inference layer needs.
#[derive(Clone, Debug)]
pub struct ChainRecovery {
    pub recovered: RecoveredBlock,
    /// One embedding per chain position (shared blocks are embedded once
    /// and cloned into place).
    pub embeddings: Vec<Embedding>,
    /// One map per link, `maps[k]` taking position `k` frames to `k+1`.
    pub maps: Vec<AlignmentMap>,
    /// Composed frame map from the first position to the last; identity for
    /// a single-block chain.
    pub composed_w: Array2<f64>,
}

fn embed_chain(blocks: &[&RescaledBlock], mode: &ModeSpec) -> Result<Vec<Embedding>> {
    // Embed each distinct block once; chains may revisit a block.
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<Embedding> = Vec::new();
    let mut placed = Vec::with_capacity(blocks.len());
    for b in blocks {
        let idx = match by_id.get(b.block_id.as_str()) {
            Some(&i) => i,
            None => {
                let e = spectral_embed::embed(b, mode)?;
                unique.push(e);
                by_id.insert(b.block_id.as_str(), unique.len() - 1);
                unique.len() - 1
            }
        };
        placed.push(idx);
    }
    Ok(placed.into_iter().map(|i| unique[i].clone()).collect())
}

fn recover_chain(blocks: &[&RescaledBlock], mode: &ModeSpec) -> Result<ChainRecovery> {
    if blocks.is_empty() {
        return Err(CmmiError::Data("chain recovery needs at least one block".into()));
    }
    if mode.is_symmetric() {
        for b in blocks {
            if !b.symmetric {
                return Err(CmmiError::Data(format!(
                    "block {} is not symmetric; this estimator requires symmetric blocks",
                    b.block_id
                )));
            }
        }
    }
    let d = mode.d();
    let embeddings = embed_chain(blocks, mode)?;
    let mut maps = Vec::with_capacity(blocks.len().saturating_sub(1));
    for k in 0..blocks.len() - 1 {
        let ov = compute_overlap_rescaled(blocks[k], blocks[k + 1]);
        let map = match mode {
            ModeSpec::Psd { .. } => align::align_pair_psd(&embeddings[k], &embeddings[k + 1], &ov),
            ModeSpec::Indefinite { .. } => {
                align::align_pair_indefinite(&embeddings[k], &embeddings[k + 1], &ov)
            }
            ModeSpec::Asymmetric { .. } => {
                align::align_pair_asymmetric(&embeddings[k], &embeddings[k + 1], &ov)
            }
        }
        .map_err(|e| match e {
            CmmiError::Data(msg) => CmmiError::Data(format!("chain link {k}: {msg}")),
            other => other,
        })?;
        maps.push(map);
    }
    let composed_w = if maps.is_empty() {
        Array2::eye(d)
    } else {
        align::compose(&maps)?
    };
    let first = blocks[0];
    let last = blocks[blocks.len() - 1];
    let e_first = &embeddings[0];
    let e_last = &embeddings[embeddings.len() - 1];
    let (estimate, col_entities) = match mode {
        ModeSpec::Psd { .. } => (
            e_first.x.dot(&composed_w).dot(&e_last.x.t()),
            last.row_entities.clone(),
        ),
        ModeSpec::Indefinite { signature } => (
            e_first
                .x
                .dot(&composed_w)
                .dot(&signature.metric())
                .dot(&e_last.x.t()),
            last.row_entities.clone(),
        ),
        ModeSpec::Asymmetric { .. } => {
            let y_last = e_last.y.as_ref().ok_or_else(|| {
                CmmiError::Data(format!("embedding {} has no right positions", e_last.block_id))
            })?;
            (
                e_first.x.dot(&composed_w).dot(&y_last.t()),
                last.col_entities.clone(),
            )
        }
    };
    Ok(ChainRecovery {
        recovered: RecoveredBlock {
            row_entities: first.row_entities.clone(),
            col_entities,
            estimate,
            stderr: None,
            ci_lower: None,
            ci_upper: None,
            chain: blocks.iter().map(|b| b.block_id.clone()).collect(),
        },
        embeddings,
        maps,
        composed_w,
    })
}

/// PSD chain estimator: `estimate = X̂^(first) · W̃ · X̂^(last)^⊤`.
pub fn cmmi_psd(blocks: &[&RescaledBlock], d: usize) -> Result<RecoveredBlock> {
    Ok(cmmi_psd_full(blocks, d)?.recovered)
}

pub fn cmmi_psd_full(blocks: &[&RescaledBlock], d: usize) -> Result<ChainRecovery> {
    recover_chain(blocks, &ModeSpec::Psd { d })
}

/// Indefinite chain estimator: `X̂ · W̃ · I± · X̂^⊤` with least-squares
/// alignments.
pub fn cmmi_indefinite(blocks: &[&RescaledBlock], sig: Signature) -> Result<RecoveredBlock> {
    Ok(cmmi_indefinite_full(blocks, sig)?.recovered)
}

pub fn cmmi_indefinite_full(blocks: &[&RescaledBlock], sig: Signature) -> Result<ChainRecovery> {
    recover_chain(blocks, &ModeSpec::Indefinite { signature: sig })
}

/// Asymmetric chain estimator: `X̂ · W̃ · Ŷ^⊤`; links may qualify via row or
/// column overlap.
pub fn cmmi_asymmetric(blocks: &[&RescaledBlock], d: usize) -> Result<RecoveredBlock> {
    Ok(cmmi_asymmetric_full(blocks, d)?.recovered)
}

pub fn cmmi_asymmetric_full(blocks: &[&RescaledBlock], d: usize) -> Result<ChainRecovery> {
    recover_chain(blocks, &ModeSpec::Asymmetric { d })
}

/// Generic entry point dispatching on the mode.
pub fn cmmi_full(blocks: &[&RescaledBlock], mode: &ModeSpec) -> Result<ChainRecovery> {
    recover_chain(blocks, mode)
}

/// Split the estimation error `p_hat − p_true` into its first-order part
/// `M⋆ = E_first · B_fwd + B_bwd^⊤ · E_last` (projections of the two
/// endpoint noise matrices through the population latent positions) and the
/// exact remainder. `x_first`/`x_last` are population latent positions;
/// `e_first`/`e_last` are the endpoint observation-noise matrices
/// `A^(i) − P_{U_i,U_i}`.
pub fn first_order_decomposition(
    x_first: &ArrayView2<f64>,
    x_last: &ArrayView2<f64>,
    e_first: &ArrayView2<f64>,
    e_last: &ArrayView2<f64>,
    p_hat: &ArrayView2<f64>,
    p_true: &ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n0 = x_first.nrows();
    let nl = x_last.nrows();
    let d = x_first.ncols();
    if x_last.ncols() != d {
        return Err(CmmiError::Data(format!(
            "latent position ranks differ: {d} vs {}",
            x_last.ncols()
        )));
    }
    if e_first.dim() != (n0, n0) || e_last.dim() != (nl, nl) {
        return Err(CmmiError::Data(format!(
            "noise matrix shapes {:?}, {:?} do not match latent positions ({n0}, {nl})",
            e_first.dim(),
            e_last.dim()
        )));
    }
    if p_hat.dim() != (n0, nl) || p_true.dim() != (n0, nl) {
        return Err(CmmiError::Data(format!(
            "estimate shape {:?} / truth shape {:?} do not match ({n0}, {nl})",
            p_hat.dim(),
            p_true.dim()
        )));
    }
    let gram_first = linalg::inv_small(&x_first.t().dot(x_first))?;
    let gram_last = linalg::inv_small(&x_last.t().dot(x_last))?;
    // B_fwd = X_first (X_first^T X_first)^{-1} X_last^T  (n0 × nl)
    let b_fwd = x_first.dot(&gram_first).dot(&x_last.t());
    // B_bwd^T = X_first (X_last^T X_last)^{-1} X_last^T  (n0 × nl)
    let b_bwd_t = x_first.dot(&gram_last).dot(&x_last.t());
    let m_star = e_first.dot(&b_fwd) + b_bwd_t.dot(e_last);
    let remainder = p_hat - p_true - &m_star;
    Ok((m_star, remainder))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn sym_window(p: &Array2<f64>, rows: std::ops::Range<usize>, id: &str) -> RescaledBlock {
        let ids: Vec<usize> = rows.clone().collect();
        let a = Array2::from_shape_fn((ids.len(), ids.len()), |(i, j)| p[[ids[i], ids[j]]]);
        let ents = EntityIndexSet::new(ids).unwrap();
        RescaledBlock {
            block_id: id.into(),
            row_entities: ents.clone(),
            col_entities: ents,
            a,
            symmetric: true,
        }
    }

    #[test]
    fn psd_single_link_noiseless_exact() {
        let x = latent(8, 3, 41);
        let p = x.dot(&x.t());
        let b1 = sym_window(&p, 0..6, "b1");
        let b2 = sym_window(&p, 2..8, "b2");
        let rec = cmmi_psd(&[&b1, &b2], 3).unwrap();
        assert_eq!(rec.row_entities.ids(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(rec.col_entities.ids(), &[2, 3, 4, 5, 6, 7]);
        let mut max_err = 0.0_f64;
        for (i, &ri) in rec.row_entities.ids().iter().enumerate() {
            for (j, &cj) in rec.col_entities.ids().iter().enumerate() {
                max_err = max_err.max((rec.estimate[[i, j]] - p[[ri, cj]]).abs());
            }
        }
        assert!(max_err < 1e-8, "max err {max_err}");
    }

    #[test]
    fn psd_two_links_overlap_exactly_d() {
        let x = latent(12, 3, 42);
        let p = x.dot(&x.t());
        // windows 0..5, 2..8, 5..11: consecutive overlaps of 3 = d
        let b1 = sym_window(&p, 0..5, "b1");
        let b2 = sym_window(&p, 2..8, "b2");
        let b3 = sym_window(&p, 5..11, "b3");
        let rec = cmmi_psd(&[&b1, &b2, &b3], 3).unwrap();
        let mut max_err = 0.0_f64;
        for (i, &ri) in rec.row_entities.ids().iter().enumerate() {
            for (j, &cj) in rec.col_entities.ids().iter().enumerate() {
                max_err = max_err.max((rec.estimate[[i, j]] - p[[ri, cj]]).abs());
            }
        }
        assert!(max_err < 1e-8, "max err {max_err}");
    }

    #[test]
    fn psd_chain_of_identical_blocks_is_self_reconstruction() {
        let x = latent(6, 2, 43);
        let p = x.dot(&x.t());
        let b = sym_window(&p, 0..6, "b");
        let rec = cmmi_psd(&[&b, &b, &b], 2).unwrap();
        let single = cmmi_psd(&[&b], 2).unwrap();
        for (a, b) in rec.estimate.iter().zip(single.estimate.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert_eq!(rec.chain, vec!["b", "b", "b"]);
    }

    #[test]
    fn psd_insufficient_overlap_is_data_error() {
        let x = latent(10, 3, 44);
        let p = x.dot(&x.t());
        let b1 = sym_window(&p, 0..4, "b1");
        let b2 = sym_window(&p, 2..10, "b2"); // overlap {2,3} = 2 < d = 3
        match cmmi_psd(&[&b1, &b2], 3) {
            Err(CmmiError::Data(msg)) => assert!(msg.contains("chain link 0"), "{msg}"),
            other => panic!("expected Data error, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_noiseless_exact() {
        let sig = Signature { d_plus: 1, d_minus: 1 };
        let x = latent(10, 2, 45);
        let p = x.dot(&sig.metric()).dot(&x.t());
        let b1 = sym_window(&p, 0..6, "b1");
        let b2 = sym_window(&p, 4..10, "b2");
        let rec = cmmi_indefinite(&[&b1, &b2], sig).unwrap();
        let mut max_err = 0.0_f64;
        for (i, &ri) in rec.row_entities.ids().iter().enumerate() {
            for (j, &cj) in rec.col_entities.ids().iter().enumerate() {
                max_err = max_err.max((rec.estimate[[i, j]] - p[[ri, cj]]).abs());
            }
        }
        assert!(max_err < 1e-8, "max err {max_err}");
    }

    #[test]
    fn indefinite_reduces_to_psd_when_all_positive() {
        let x = latent(9, 2, 46);
        let p = x.dot(&x.t());
        let b1 = sym_window(&p, 0..6, "b1");
        let b2 = sym_window(&p, 3..9, "b2");
        let psd = cmmi_psd(&[&b1, &b2], 2).unwrap();
        let indef = cmmi_indefinite(&[&b1, &b2], Signature { d_plus: 2, d_minus: 0 }).unwrap();
        for (a, b) in psd.estimate.iter().zip(indef.estimate.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn indefinite_single_block_uses_metric() {
        let sig = Signature { d_plus: 1, d_minus: 1 };
        let x = latent(5, 2, 47);
        let p = x.dot(&sig.metric()).dot(&x.t());
        let b = sym_window(&p, 0..5, "b");
        let rec = cmmi_indefinite(&[&b], sig).unwrap();
        for (a, b) in rec.estimate.iter().zip(p.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    fn asym_window(
        m: &Array2<f64>,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        id: &str,
    ) -> RescaledBlock {
        let r: Vec<usize> = rows.collect();
        let c: Vec<usize> = cols.collect();
        let a = Array2::from_shape_fn((r.len(), c.len()), |(i, j)| m[[r[i], c[j]]]);
        RescaledBlock {
            block_id: id.into(),
            row_entities: EntityIndexSet::new(r).unwrap(),
            col_entities: EntityIndexSet::new(c).unwrap(),
            a,
            symmetric: false,
        }
    }

    #[test]
    fn asymmetric_staircase_noiseless_exact() {
        let x = latent(8, 2, 48);
        let y = latent(12, 2, 49);
        let m = x.dot(&y.t());
        let b1 = asym_window(&m, 0..5, 0..6, "b1");
        let b2 = asym_window(&m, 3..8, 4..12, "b2");
        let rec = cmmi_asymmetric(&[&b1, &b2], 2).unwrap();
        assert_eq!(rec.col_entities.ids().len(), 8);
        let mut max_err = 0.0_f64;
        for (i, &ri) in rec.row_entities.ids().iter().enumerate() {
            for (j, &cj) in rec.col_entities.ids().iter().enumerate() {
                max_err = max_err.max((rec.estimate[[i, j]] - m[[ri, cj]]).abs());
            }
        }
        assert!(max_err < 1e-8, "max err {max_err}");
    }

    #[test]
    fn asymmetric_rows_only_link_succeeds() {
        let x = latent(8, 2, 50);
        let y = latent(12, 2, 51);
        let m = x.dot(&y.t());
        // disjoint column ranges: the link qualifies through rows alone
        let b1 = asym_window(&m, 0..5, 0..6, "b1");
        let b2 = asym_window(&m, 3..8, 6..12, "b2");
        let rec = cmmi_asymmetric(&[&b1, &b2], 2).unwrap();
        let mut max_err = 0.0_f64;
        for (i, &ri) in rec.row_entities.ids().iter().enumerate() {
            for (j, &cj) in rec.col_entities.ids().iter().enumerate() {
                max_err = max_err.max((rec.estimate[[i, j]] - m[[ri, cj]]).abs());
            }
        }
        assert!(max_err < 1e-8, "max err {max_err}");
    }

    #[test]
    fn asymmetric_overlap_shortfall_errors() {
        let x = latent(8, 3, 52);
        let y = latent(12, 3, 53);
        let m = x.dot(&y.t());
        let b1 = asym_window(&m, 0..4, 0..5, "b1");
        let b2 = asym_window(&m, 2..8, 5..12, "b2"); // rows overlap 2 < 3, cols 0
        assert!(matches!(
            cmmi_asymmetric(&[&b1, &b2], 3),
            Err(CmmiError::Data(_))
        ));
    }

    #[test]
    fn chain_reversal_gives_transpose_noiseless() {
        let x = latent(10, 2, 54);
        let p = x.dot(&x.t());
        let b1 = sym_window(&p, 0..6, "b1");
        let b2 = sym_window(&p, 3..10, "b2");
        let fwd = cmmi_psd(&[&b1, &b2], 2).unwrap();
        let bwd = cmmi_psd(&[&b2, &b1], 2).unwrap();
        for (i, &ri) in fwd.row_entities.ids().iter().enumerate() {
            for (j, &cj) in fwd.col_entities.ids().iter().enumerate() {
                let bi = bwd.row_entities.position(cj).unwrap();
                let bj = bwd.col_entities.position(ri).unwrap();
                assert_abs_diff_eq!(
                    fwd.estimate[[i, j]],
                    bwd.estimate[[bi, bj]],
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn first_order_zero_noise_is_zero() {
        let x = latent(6, 2, 55);
        let p = x.dot(&x.t());
        let e0: Array2<f64> = Array2::zeros((6, 6));
        let (m_star, remainder) = first_order_decomposition(
            &x.view(),
            &x.view(),
            &e0.view(),
            &e0.view(),
            &p.view(),
            &p.view(),
        )
        .unwrap();
        assert_abs_diff_eq!(linalg::max_abs(&m_star.view()), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(linalg::max_abs(&remainder.view()), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn first_order_partition_is_exact_by_construction() {
        let x = latent(6, 2, 56);
        let p = x.dot(&x.t());
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let e_first = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>() - 0.5);
        let e_last = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>() - 0.5);
        let p_hat = Array2::from_shape_fn((6, 6), |(i, j)| p[[i, j]] + 0.01 * (i + j) as f64);
        let (m_star, remainder) = first_order_decomposition(
            &x.view(),
            &x.view(),
            &e_first.view(),
            &e_last.view(),
            &p_hat.view(),
            &p.view(),
        )
        .unwrap();
        let sum = &m_star + &remainder;
        let diff = &p_hat - &p;
        for (a, b) in sum.iter().zip(diff.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
