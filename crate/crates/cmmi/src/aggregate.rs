//! Fusing repeated observations of the same entries across sources.
//!
//! When several blocks observe the same cell, the fused value is the
//! inverse-noise-variance weighted average of the observed values. Each
//! block's noise level is estimated from its own masked residual around a
//! rank-`d` reconstruction; the fused table is then redistributed back into
//! the original block layout (values and masks replaced by the fused
//! restriction), after which the usual chain machinery runs unchanged.

use crate::block_model::{estimate_q, EntityIndexSet, ObservedBlock};
use crate::error::{CmmiError, Result};
use crate::linalg;
use ndarray::prelude::*;
use std::collections::BTreeMap;

/// Floor substituted for a zero noise estimate so a perfect source wins
/// without dividing by zero.
const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct NoiseEstimate {
    pub block_id: String,
    pub sigma2_hat: f64,
}

/// `‖(b − p_hat) ∘ mask‖_F² / ‖mask‖_F²`: mean squared masked residual.
pub fn masked_residual_ratio(
    b: &ArrayView2<f64>,
    p_hat: &ArrayView2<f64>,
    mask: &ArrayView2<u8>,
) -> Result<f64> {
    if b.dim() != p_hat.dim() || b.dim() != mask.dim() {
        return Err(CmmiError::Data(format!(
            "residual ratio inputs disagree in shape: {:?}, {:?}, {:?}",
            b.dim(),
            p_hat.dim(),
            mask.dim()
        )));
    }
    let mut num = 0.0;
    let mut observed = 0usize;
    for ((bij, pij), &m) in b.iter().zip(p_hat.iter()).zip(mask.iter()) {
        if m == 1 {
            num += (bij - pij).powi(2);
            observed += 1;
        }
    }
    if observed == 0 {
        return Err(CmmiError::Data("residual ratio over an empty mask".into()));
    }
    Ok(num / observed as f64)
}

/// Estimate a symmetric block's noise level: reconstruct the block at rank
/// `d` from its density-rescaled values (largest-magnitude eigenvalues,
/// signs kept), then take the mean squared masked residual of the
/// *unrescaled* values around that reconstruction.
pub fn estimate_noise(block: &ObservedBlock, d: usize) -> Result<NoiseEstimate> {
    if !block.symmetric {
        return Err(CmmiError::Data(format!(
            "block {}: noise estimation requires a symmetric block",
            block.block_id
        )));
    }
    let n = block.n_rows();
    if d == 0 || d > n {
        return Err(CmmiError::Data(format!(
            "block {}: rank d={d} out of range for an {n}x{n} block",
            block.block_id
        )));
    }
    let q_hat = estimate_q(block)?;
    let rescaled = block.values.mapv(|v| v / q_hat);
    let (vals, vecs) = linalg::eigh_desc(&rescaled)?;
    // d largest-magnitude eigenvalues, signs kept; ties by position.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| vals[y].abs().total_cmp(&vals[x].abs()).then(x.cmp(&y)));
    let kept = &idx[..d];
    let mut p_hat = Array2::<f64>::zeros((n, n));
    for &k in kept {
        let u = vecs.column(k);
        for i in 0..n {
            for j in 0..n {
                p_hat[[i, j]] += vals[k] * u[i] * u[j];
            }
        }
    }
    let sigma2_hat =
        masked_residual_ratio(&block.values.view(), &p_hat.view(), &block.mask.view())?;
    Ok(NoiseEstimate { block_id: block.block_id.clone(), sigma2_hat })
}

/// Fused values over the union of entities, keyed by (s, t) with s ≤ t
/// (symmetric storage: the lower triangle is implied).
#[derive(Clone, Debug)]
pub struct FusedTable {
    pub entities: EntityIndexSet,
    pub values: BTreeMap<(usize, usize), f64>,
}

/// Inverse-variance weights for one entry's observers. Zero estimates are
/// floored at `SIGMA2_FLOOR` unless every observer is zero, in which case
/// the weights are uniform.
fn entry_weights(sigma2: &[f64]) -> Vec<f64> {
    let k = sigma2.len();
    if sigma2.iter().all(|&s| s == 0.0) {
        return vec![1.0 / k as f64; k];
    }
    let inv: Vec<f64> = sigma2.iter().map(|&s| 1.0 / s.max(SIGMA2_FLOOR)).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|w| w / total).collect()
}

/// Fuse every multiply-observed entry across symmetric blocks by
/// inverse-noise-variance weighting.
pub fn fuse(blocks: &[ObservedBlock], noise: &[NoiseEstimate]) -> Result<FusedTable> {
    if blocks.is_empty() {
        return Err(CmmiError::Data("fusion needs at least one block".into()));
    }
    for b in blocks {
        if !b.symmetric {
            return Err(CmmiError::Data(format!(
                "block {}: fusion handles symmetric blocks only",
                b.block_id
            )));
        }
    }
    let mut sigma2_of: BTreeMap<&str, f64> = BTreeMap::new();
    for nz in noise {
        if !nz.sigma2_hat.is_finite() || nz.sigma2_hat < 0.0 {
            return Err(CmmiError::Data(format!(
                "block {}: noise estimate must be finite and nonnegative, got {}",
                nz.block_id, nz.sigma2_hat
            )));
        }
        if sigma2_of.insert(nz.block_id.as_str(), nz.sigma2_hat).is_some() {
            return Err(CmmiError::Data(format!(
                "duplicate noise estimate for block {}",
                nz.block_id
            )));
        }
    }
    // Collect per-entry observations; local upper triangle maps to global
    // (s, t) with s ≤ t because entity lists are increasing.
    let mut observed: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for b in blocks {
        let sigma2 = *sigma2_of.get(b.block_id.as_str()).ok_or_else(|| {
            CmmiError::Data(format!("no noise estimate supplied for block {}", b.block_id))
        })?;
        let ids = b.row_entities.ids();
        for li in 0..ids.len() {
            for lj in li..ids.len() {
                if b.mask[[li, lj]] == 1 {
                    observed
                        .entry((ids[li], ids[lj]))
                        .or_default()
                        .push((b.values[[li, lj]], sigma2));
                }
            }
        }
    }
    let sets: Vec<&EntityIndexSet> = blocks.iter().map(|b| &b.row_entities).collect();
    let entities = EntityIndexSet::union_of(&sets);
    let mut values = BTreeMap::new();
    for (key, obs) in observed {
        let fused = if obs.len() == 1 {
            obs[0].0
        } else {
            let sigma2: Vec<f64> = obs.iter().map(|&(_, s)| s).collect();
            let weights = entry_weights(&sigma2);
            obs.iter().zip(&weights).map(|(&(v, _), &w)| v * w).sum()
        };
        values.insert(key, fused);
    }
    Ok(FusedTable { entities, values })
}

/// Restrict the fused table back onto each original block's entity square:
/// values come from the table, the mask becomes the union mask restricted
/// to the square, and the sampling rate is re-estimated from that mask
/// (kept verbatim when fusion did not change the block's mask).
pub fn redistribute(fused: &FusedTable, blocks: &[ObservedBlock]) -> Result<Vec<ObservedBlock>> {
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        let ids = b.row_entities.ids();
        let n = ids.len();
        let mut values = Array2::<f64>::zeros((n, n));
        let mut mask = Array2::<u8>::zeros((n, n));
        for li in 0..n {
            for lj in li..n {
                if let Some(&v) = fused.values.get(&(ids[li], ids[lj])) {
                    values[[li, lj]] = v;
                    values[[lj, li]] = v;
                    mask[[li, lj]] = 1;
                    mask[[lj, li]] = 1;
                }
            }
        }
        let q = if mask == b.mask {
            b.q
        } else {
            let observed = mask.iter().filter(|&&m| m == 1).count();
            if observed == 0 {
                return Err(CmmiError::Data(format!(
                    "block {}: nothing observed after fusion",
                    b.block_id
                )));
            }
            Some(observed as f64 / (n * n) as f64)
        };
        out.push(ObservedBlock::new(
            b.block_id.clone(),
            b.row_entities.clone(),
            None,
            values,
            mask,
            q,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn full_mask(n: usize) -> Array2<u8> {
        Array2::from_elem((n, n), 1)
    }

    fn block_of(id: &str, ids: Vec<usize>, values: Array2<f64>, mask: Array2<u8>) -> ObservedBlock {
        ObservedBlock::new(id, EntityIndexSet::new(ids).unwrap(), None, values, mask, None).unwrap()
    }

    #[test]
    fn noiseless_rank_d_block_has_zero_sigma2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((8, 2), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let p = x.dot(&x.t());
        let b = block_of("b", (0..8).collect(), p.clone(), full_mask(8));
        let est = estimate_noise(&b, 2).unwrap();
        let scale: f64 = p.iter().map(|v| v * v).sum();
        assert!(est.sigma2_hat <= 1e-16 * scale, "sigma2 {}", est.sigma2_hat);
    }

    #[test]
    fn monte_carlo_sigma2_concentrates() {
        // P rank 3, n = 200, sigma = 0.5, q = 1: estimate should land in
        // [0.2, 0.3] (truth 0.25) in at least 95 of 100 trials.
        let n = 200;
        let mut pop_rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((n, 3), |_| pop_rng.gen::<f64>() * 2.0 - 1.0);
        let p = x.dot(&x.t());
        let mut hits = 0;
        for rep in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let mut values = p.clone();
            for i in 0..n {
                for j in i..n {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    values[[i, j]] += 0.5 * z;
                    values[[j, i]] = values[[i, j]];
                }
            }
            let b = block_of("b", (0..n).collect(), values, full_mask(n));
            let est = estimate_noise(&b, 3).unwrap();
            if (0.2..=0.3).contains(&est.sigma2_hat) {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 in [0.2, 0.3]");
    }

    #[test]
    fn doubling_noise_quadruples_ratio_at_fixed_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>() - 0.5);
        let zero = Array2::<f64>::zeros((6, 6));
        let mask = full_mask(6);
        let r1 = masked_residual_ratio(&e.view(), &zero.view(), &mask.view()).unwrap();
        let e2 = e.mapv(|v| 2.0 * v);
        let r2 = masked_residual_ratio(&e2.view(), &zero.view(), &mask.view()).unwrap();
        assert_abs_diff_eq!(r2, 4.0 * r1, epsilon = 1e-12);
    }

    #[test]
    fn fuse_weights_example() {
        // σ² = (1, 4), values (10, 14) → weights (0.8, 0.2) → 10.8
        let v1 = array![[10.0]];
        let v2 = array![[14.0]];
        let b1 = block_of("a", vec![5], v1, full_mask(1));
        let b2 = block_of("b", vec![5], v2, full_mask(1));
        let noise = vec![
            NoiseEstimate { block_id: "a".into(), sigma2_hat: 1.0 },
            NoiseEstimate { block_id: "b".into(), sigma2_hat: 4.0 },
        ];
        let fused = fuse(&[b1, b2], &noise).unwrap();
        assert_abs_diff_eq!(fused.values[&(5, 5)], 10.8, epsilon = 1e-12);
    }

    #[test]
    fn fuse_single_observer_and_equal_sigmas() {
        let b1 = block_of("a", vec![0, 1], array![[1.0, 2.0], [2.0, 3.0]], full_mask(2));
        let b2 = block_of("b", vec![1, 2], array![[5.0, 6.0], [6.0, 7.0]], full_mask(2));
        let b3 = block_of("c", vec![1, 3], array![[8.0, 0.5], [0.5, 9.0]], full_mask(2));
        let noise: Vec<NoiseEstimate> = ["a", "b", "c"]
            .iter()
            .map(|id| NoiseEstimate { block_id: (*id).into(), sigma2_hat: 0.7 })
            .collect();
        let fused = fuse(&[b1, b2, b3], &noise).unwrap();
        // entry (0,0): only block a observes it
        assert_abs_diff_eq!(fused.values[&(0, 0)], 1.0, epsilon = 1e-12);
        // entry (1,1): observed as 3, 5, 8 with equal weights → mean
        assert_abs_diff_eq!(fused.values[&(1, 1)], 16.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn fuse_zero_sigma_source_wins() {
        let b1 = block_of("a", vec![0], array![[10.0]], full_mask(1));
        let b2 = block_of("b", vec![0], array![[14.0]], full_mask(1));
        let noise = vec![
            NoiseEstimate { block_id: "a".into(), sigma2_hat: 0.0 },
            NoiseEstimate { block_id: "b".into(), sigma2_hat: 1.0 },
        ];
        let fused = fuse(&[b1, b2], &noise).unwrap();
        assert_abs_diff_eq!(fused.values[&(0, 0)], 10.0, epsilon = 1e-9);
        // all observers zero → uniform
        let b1 = block_of("a", vec![0], array![[10.0]], full_mask(1));
        let b2 = block_of("b", vec![0], array![[14.0]], full_mask(1));
        let noise = vec![
            NoiseEstimate { block_id: "a".into(), sigma2_hat: 0.0 },
            NoiseEstimate { block_id: "b".into(), sigma2_hat: 0.0 },
        ];
        let fused = fuse(&[b1, b2], &noise).unwrap();
        assert_abs_diff_eq!(fused.values[&(0, 0)], 12.0, epsilon = 1e-12);
    }

    #[test]
    fn redistribute_single_block_unchanged() {
        let values = array![[1.0, 2.0], [2.0, 3.0]];
        let b = ObservedBlock::new(
            "solo",
            EntityIndexSet::new(vec![0, 1]).unwrap(),
            None,
            values.clone(),
            full_mask(2),
            Some(0.9),
        )
        .unwrap();
        let noise = vec![NoiseEstimate { block_id: "solo".into(), sigma2_hat: 0.5 }];
        let fused = fuse(&[b.clone()], &noise).unwrap();
        let out = redistribute(&fused, &[b]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].values, values);
        assert_eq!(out[0].q, Some(0.9)); // mask unchanged → q kept verbatim
    }

    #[test]
    fn redistribute_disjoint_masks_union() {
        // Two blocks over the same entities, observing complementary cells.
        let v1 = array![[1.0, 0.0], [0.0, 3.0]];
        let m1 = array![[1u8, 0], [0, 1]];
        let v2 = array![[0.0, 7.0], [7.0, 0.0]];
        let m2 = array![[0u8, 1], [1, 0]];
        let b1 = block_of("a", vec![0, 1], v1, m1);
        let b2 = block_of("b", vec![0, 1], v2, m2);
        let noise = vec![
            NoiseEstimate { block_id: "a".into(), sigma2_hat: 1.0 },
            NoiseEstimate { block_id: "b".into(), sigma2_hat: 1.0 },
        ];
        let fused = fuse(&[b1.clone(), b2.clone()], &noise).unwrap();
        let out = redistribute(&fused, &[b1, b2]).unwrap();
        for o in &out {
            assert!(o.mask.iter().all(|&m| m == 1), "union mask is full");
            assert_abs_diff_eq!(o.q.unwrap(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(o.values[[0, 1]], 7.0, epsilon = 1e-12);
            assert_abs_diff_eq!(o.values[[0, 0]], 1.0, epsilon = 1e-12);
        }
    }
}
