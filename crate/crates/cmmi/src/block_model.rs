//! Data model for entities, observed blocks, masks and sampling rates, plus
//! ingestion utilities: manifest loading, overlap extraction, rescaling, and
//! PMI construction from co-occurrence tables.
//!
//! An observed block is one source's noisy, partially observed view of a
//! sub-square (or sub-rectangle) of a large population matrix. Each block
//! carries the global entity ids it covers, a dense value matrix, a binary
//! observation mask, and a sampling rate `q` (known or estimated). Rescaling
//! by `1/q` turns the masked values into an unbiased estimate of the
//! population sub-block under a Bernoulli observation model.

use crate::error::{CmmiError, Result};
use crate::io;
use ndarray::prelude::*;
use std::path::Path;

/// Tolerance for declaring a pair of mirrored observed values "symmetric".
pub const SYMMETRY_TOL: f64 = 1e-9;

/// A strictly increasing list of global entity identifiers.
///
/// Block entity sets are never empty; intersections of two sets (see
/// [`Overlap`]) may be.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityIndexSet {
    ids: Vec<usize>,
}

impl EntityIndexSet {
    /// Build from a strictly increasing id list.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        for w in ids.windows(2) {
            if w[1] <= w[0] {
                return Err(CmmiError::Data(format!(
                    "entity ids must be strictly increasing, got {} after {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(Self { ids })
    }

    /// Contiguous range of ids `[start, start + len)`.
    pub fn range(start: usize, len: usize) -> Self {
        Self {
            ids: (start..start + len).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Local position of a global id, if present.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.position(id).is_some()
    }

    /// Sorted intersection with local positions on both sides.
    pub fn intersect(&self, other: &Self) -> (Self, Vec<usize>, Vec<usize>) {
        let mut shared = Vec::new();
        let mut pos_a = Vec::new();
        let mut pos_b = Vec::new();
        let (mut i, mut j) = (0usize, 0usize);
        while i < self.ids.len() && j < other.ids.len() {
            match self.ids[i].cmp(&other.ids[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    shared.push(self.ids[i]);
                    pos_a.push(i);
                    pos_b.push(j);
                    i += 1;
                    j += 1;
                }
            }
        }
        (Self { ids: shared }, pos_a, pos_b)
    }

    /// Sorted union of several sets.
    pub fn union_of(sets: &[&EntityIndexSet]) -> Self {
        let mut ids: Vec<usize> = sets.iter().flat_map(|s| s.ids.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }
}

/// One source's observed data: entity sets, dense values, observation mask,
/// and sampling rate. Immutable after construction.
#[derive(Clone, Debug)]
pub struct ObservedBlock {
    pub block_id: String,
    pub row_entities: EntityIndexSet,
    pub col_entities: EntityIndexSet,
    /// Dense `n x m` values; unobserved cells hold 0.0 and are never read.
    pub values: Array2<f64>,
    /// 1 = observed, 0 = missing. Same shape as `values`.
    pub mask: Array2<u8>,
    /// Sampling rate in (0, 1]; `None` until known or estimated.
    pub q: Option<f64>,
    pub symmetric: bool,
}

impl ObservedBlock {
    /// Validating constructor. `col_entities = None` declares a symmetric
    /// block (column set equals the row set); symmetric blocks must have a
    /// symmetric mask and symmetric observed values up to [`SYMMETRY_TOL`].
    /// Unobserved cells are zeroed so sentinel values can never leak into
    /// arithmetic.
    pub fn new(
        block_id: impl Into<String>,
        row_entities: EntityIndexSet,
        col_entities: Option<EntityIndexSet>,
        mut values: Array2<f64>,
        mask: Array2<u8>,
        q: Option<f64>,
    ) -> Result<Self> {
        let block_id = block_id.into();
        let symmetric = col_entities.is_none();
        let col_entities = col_entities.unwrap_or_else(|| row_entities.clone());
        if row_entities.is_empty() || col_entities.is_empty() {
            return Err(CmmiError::Data(format!(
                "block {block_id}: entity sets must be non-empty"
            )));
        }
        let (n, m) = (row_entities.len(), col_entities.len());
        if values.dim() != (n, m) {
            return Err(CmmiError::Data(format!(
                "block {block_id}: values are {}x{} but entity sets declare {}x{}",
                values.nrows(),
                values.ncols(),
                n,
                m
            )));
        }
        if mask.dim() != values.dim() {
            return Err(CmmiError::Data(format!(
                "block {block_id}: mask shape {:?} does not match values {:?}",
                mask.dim(),
                values.dim()
            )));
        }
        if let Some(q) = q {
            if !(q > 0.0 && q <= 1.0) {
                return Err(CmmiError::Data(format!(
                    "block {block_id}: sampling rate q={q} outside (0, 1]"
                )));
            }
        }
        if symmetric {
            for s in 0..n {
                for t in (s + 1)..n {
                    if mask[[s, t]] != mask[[t, s]] {
                        return Err(CmmiError::Data(format!(
                            "block {block_id}: symmetric block has asymmetric mask at ({s}, {t})"
                        )));
                    }
                    if mask[[s, t]] == 1 && (values[[s, t]] - values[[t, s]]).abs() > SYMMETRY_TOL {
                        return Err(CmmiError::Data(format!(
                            "block {block_id}: declared symmetric but values differ at ({s}, {t}): {} vs {}",
                            values[[s, t]],
                            values[[t, s]]
                        )));
                    }
                }
            }
        }
        // Enforce the sentinel rule.
        azip!((v in &mut values, &o in &mask) if o == 0 { *v = 0.0 });
        Ok(Self {
            block_id,
            row_entities,
            col_entities,
            values,
            mask,
            q,
            symmetric,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_entities.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_entities.len()
    }

    /// Copy with a known sampling rate.
    pub fn with_q(mut self, q: f64) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(CmmiError::Data(format!(
                "block {}: sampling rate q={q} outside (0, 1]",
                self.block_id
            )));
        }
        self.q = Some(q);
        Ok(self)
    }
}

/// The `1/q`-rescaled form of an observed block: zeros at unobserved cells,
/// `values/q` elsewhere. Its expectation under the Bernoulli observation
/// model is the population sub-block.
#[derive(Clone, Debug)]
pub struct RescaledBlock {
    pub block_id: String,
    pub a: Array2<f64>,
    pub row_entities: EntityIndexSet,
    pub col_entities: EntityIndexSet,
    pub symmetric: bool,
}

impl RescaledBlock {
    pub fn n_rows(&self) -> usize {
        self.row_entities.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_entities.len()
    }
}

/// The shared entities of two blocks, with position maps into each block's
/// local indexing: `a.row_entities[local_rows_a[k]] == shared_rows[k]`.
#[derive(Clone, Debug)]
pub struct Overlap {
    pub block_a: String,
    pub block_b: String,
    pub shared_rows: EntityIndexSet,
    pub shared_cols: EntityIndexSet,
    pub local_rows_a: Vec<usize>,
    pub local_rows_b: Vec<usize>,
    pub local_cols_a: Vec<usize>,
    pub local_cols_b: Vec<usize>,
}

/// Fraction of observed cells. Symmetric blocks count the full square
/// including the diagonal, matching the `|U_i|^2` denominator used when the
/// rate is re-estimated after aggregation.
pub fn estimate_q(block: &ObservedBlock) -> Result<f64> {
    let observed = block.mask.iter().filter(|&&o| o == 1).count();
    if observed == 0 {
        return Err(CmmiError::Data(format!(
            "block {}: empty mask, nothing observed",
            block.block_id
        )));
    }
    Ok(observed as f64 / (block.n_rows() * block.n_cols()) as f64)
}

/// Divide observed values by `q`, zero elsewhere.
pub fn rescale(block: &ObservedBlock) -> Result<RescaledBlock> {
    let q = block.q.ok_or_else(|| {
        CmmiError::Data(format!(
            "block {}: sampling rate unknown; estimate it first",
            block.block_id
        ))
    })?;
    if q <= 0.0 {
        return Err(CmmiError::Data(format!(
            "block {}: nonpositive sampling rate {q}",
            block.block_id
        )));
    }
    let mut a = block.values.clone();
    azip!((v in &mut a, &o in &block.mask) {
        *v = if o == 1 { *v / q } else { 0.0 };
    });
    Ok(RescaledBlock {
        block_id: block.block_id.clone(),
        a,
        row_entities: block.row_entities.clone(),
        col_entities: block.col_entities.clone(),
        symmetric: block.symmetric,
    })
}

/// Exact intersections of the two blocks' entity sets, with local position
/// maps. Empty intersections are fine.
pub fn compute_overlap(a: &ObservedBlock, b: &ObservedBlock) -> Overlap {
    overlap_of(
        &a.block_id,
        &a.row_entities,
        &a.col_entities,
        &b.block_id,
        &b.row_entities,
        &b.col_entities,
    )
}

/// Overlap of two rescaled blocks (same computation, post-rescale types).
pub fn compute_overlap_rescaled(a: &RescaledBlock, b: &RescaledBlock) -> Overlap {
    overlap_of(
        &a.block_id,
        &a.row_entities,
        &a.col_entities,
        &b.block_id,
        &b.row_entities,
        &b.col_entities,
    )
}

fn overlap_of(
    id_a: &str,
    rows_a: &EntityIndexSet,
    cols_a: &EntityIndexSet,
    id_b: &str,
    rows_b: &EntityIndexSet,
    cols_b: &EntityIndexSet,
) -> Overlap {
    let (shared_rows, local_rows_a, local_rows_b) = rows_a.intersect(rows_b);
    let (shared_cols, local_cols_a, local_cols_b) = cols_a.intersect(cols_b);
    Overlap {
        block_a: id_a.to_string(),
        block_b: id_b.to_string(),
        shared_rows,
        shared_cols,
        local_rows_a,
        local_rows_b,
        local_cols_a,
        local_cols_b,
    }
}

/// Load observed blocks from a JSON manifest. Values CSVs are resolved
/// relative to the manifest's directory; the literal token `NA` marks
/// missing cells. An absent `cols` list declares a symmetric block.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ObservedBlock>> {
    let path = path.as_ref();
    let manifest = io::read_manifest_file(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for entry in &manifest.blocks {
        if !seen.insert(entry.id.clone()) {
            return Err(CmmiError::Manifest(format!(
                "duplicate block id {:?}",
                entry.id
            )));
        }
        let rows = EntityIndexSet::new(entry.rows.clone()).map_err(|e| {
            CmmiError::Manifest(format!("block {:?}: bad row entity list: {e}", entry.id))
        })?;
        let cols = match &entry.cols {
            Some(c) => Some(EntityIndexSet::new(c.clone()).map_err(|e| {
                CmmiError::Manifest(format!("block {:?}: bad col entity list: {e}", entry.id))
            })?),
            None => None,
        };
        let (values, mask) = io::read_values_csv(&base.join(&entry.values))?;
        let block = ObservedBlock::new(entry.id.clone(), rows, cols, values, mask, entry.q)
            .map_err(|e| CmmiError::Manifest(e.to_string()))?;
        blocks.push(block);
    }
    Ok(blocks)
}

/// Pointwise mutual information from a joint co-occurrence table and
/// marginals: `pmi[x, y] = log(joint[x, y] / (marginal[x] * marginal[y]))`.
///
/// Zero joints have no finite PMI; they are mapped to `log(floor)` minus the
/// log marginal product, where `floor` defaults to the smallest positive
/// joint in the table and can be overridden.
pub fn cooccurrence_to_pmi(
    joint: &Array2<f64>,
    marginals: &[f64],
    zero_floor: Option<f64>,
) -> Result<Array2<f64>> {
    let (n, m) = joint.dim();
    if n != marginals.len() || m != marginals.len() {
        return Err(CmmiError::Data(format!(
            "joint table {n}x{m} does not match {} marginals",
            marginals.len()
        )));
    }
    if let Some(&bad) = marginals.iter().find(|&&p| p <= 0.0) {
        return Err(CmmiError::Data(format!("nonpositive marginal {bad}")));
    }
    if joint.iter().any(|&p| p < 0.0) {
        return Err(CmmiError::Data("negative joint probability".into()));
    }
    let floor = match zero_floor {
        Some(f) => {
            if f <= 0.0 {
                return Err(CmmiError::Data(format!("nonpositive PMI floor {f}")));
            }
            Some(f)
        }
        None => joint
            .iter()
            .copied()
            .filter(|&p| p > 0.0)
            .fold(None, |acc: Option<f64>, p| {
                Some(acc.map_or(p, |a| a.min(p)))
            }),
    };
    let mut out = Array2::zeros((n, m));
    for x in 0..n {
        for y in 0..m {
            let p = joint[[x, y]];
            let subst = if p > 0.0 {
                p
            } else {
                floor.ok_or_else(|| {
                    CmmiError::Data("all joint probabilities are zero and no floor given".into())
                })?
            };
            out[[x, y]] = subst.ln() - marginals[x].ln() - marginals[y].ln();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn full_mask(n: usize, m: usize) -> Array2<u8> {
        Array2::ones((n, m))
    }

    #[test]
    fn estimate_q_counts_ratio() {
        let mut mask = full_mask(2, 2);
        mask[[0, 1]] = 0;
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::range(0, 2),
            Some(EntityIndexSet::range(10, 2)),
            array![[1.0, 2.0], [3.0, 4.0]],
            mask,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(estimate_q(&b).unwrap(), 0.75);

        let f = ObservedBlock::new(
            "f",
            EntityIndexSet::range(0, 5),
            None,
            Array2::zeros((5, 5)),
            full_mask(5, 5),
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(estimate_q(&f).unwrap(), 1.0);
    }

    #[test]
    fn estimate_q_dense_count() {
        // 10x10 with 80 observed cells -> 0.8 (kept symmetric: mask built by
        // zeroing 10 mirrored off-diagonal pairs).
        let mut mask = full_mask(10, 10);
        let mut removed = 0;
        'outer: for s in 0..10 {
            for t in (s + 1)..10 {
                mask[[s, t]] = 0;
                mask[[t, s]] = 0;
                removed += 2;
                if removed == 20 {
                    break 'outer;
                }
            }
        }
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::range(0, 10),
            None,
            Array2::zeros((10, 10)),
            mask,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(estimate_q(&b).unwrap(), 0.8);
    }

    #[test]
    fn estimate_q_rejects_empty_mask() {
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::range(0, 2),
            None,
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
            None,
        )
        .unwrap();
        assert!(estimate_q(&b).is_err());
    }

    #[test]
    fn rescale_divides_observed_and_zeroes_missing() {
        let mut mask = full_mask(2, 2);
        mask[[1, 0]] = 0;
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::range(0, 2),
            Some(EntityIndexSet::range(5, 2)),
            array![[2.0, 4.0], [6.0, 8.0]],
            mask,
            Some(0.5),
        )
        .unwrap();
        let r = rescale(&b).unwrap();
        assert_abs_diff_eq!(r.a[[0, 0]], 4.0);
        assert_abs_diff_eq!(r.a[[0, 1]], 8.0);
        assert_abs_diff_eq!(r.a[[1, 0]], 0.0);
        assert_abs_diff_eq!(r.a[[1, 1]], 16.0);
    }

    #[test]
    fn rescale_identity_at_q1_and_preserves_symmetry() {
        let vals = array![[1.0, 2.0, 3.0], [2.0, 5.0, 6.0], [3.0, 6.0, 9.0]];
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::range(0, 3),
            None,
            vals.clone(),
            full_mask(3, 3),
            Some(1.0),
        )
        .unwrap();
        let r = rescale(&b).unwrap();
        assert_eq!(r.a, vals);

        let b8 = ObservedBlock::new(
            "b8",
            EntityIndexSet::range(0, 3),
            None,
            vals,
            full_mask(3, 3),
            Some(0.8),
        )
        .unwrap();
        let r8 = rescale(&b8).unwrap();
        for s in 0..3 {
            for t in 0..3 {
                assert_abs_diff_eq!(r8.a[[s, t]], r8.a[[t, s]]);
            }
        }
    }

    #[test]
    fn rescale_requires_known_q() {
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::range(0, 2),
            None,
            array![[1.0, 0.0], [0.0, 1.0]],
            full_mask(2, 2),
            None,
        )
        .unwrap();
        assert!(rescale(&b).is_err());
    }

    #[test]
    fn overlap_positions_are_consistent() {
        let a = ObservedBlock::new(
            "a",
            EntityIndexSet::new(vec![1, 2, 3]).unwrap(),
            None,
            Array2::zeros((3, 3)),
            full_mask(3, 3),
            None,
        )
        .unwrap();
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::new(vec![3, 4, 5]).unwrap(),
            None,
            Array2::zeros((3, 3)),
            full_mask(3, 3),
            None,
        )
        .unwrap();
        let ov = compute_overlap(&a, &b);
        assert_eq!(ov.shared_rows.ids(), &[3]);
        assert_eq!(ov.local_rows_a, vec![2]);
        assert_eq!(ov.local_rows_b, vec![0]);
        for (k, &id) in ov.shared_rows.ids().iter().enumerate() {
            assert_eq!(a.row_entities.ids()[ov.local_rows_a[k]], id);
            assert_eq!(b.row_entities.ids()[ov.local_rows_b[k]], id);
        }
    }

    #[test]
    fn overlap_disjoint_and_identical() {
        let mk = |ids: Vec<usize>| {
            let n = ids.len();
            ObservedBlock::new(
                format!("b{}", ids[0]),
                EntityIndexSet::new(ids).unwrap(),
                None,
                Array2::zeros((n, n)),
                full_mask(n, n),
                None,
            )
            .unwrap()
        };
        let a = mk(vec![0, 1]);
        let b = mk(vec![7, 8]);
        let ov = compute_overlap(&a, &b);
        assert!(ov.shared_rows.is_empty());

        let c = mk(vec![2, 3, 4, 5]);
        let d = mk(vec![2, 3, 4, 5]);
        let ov = compute_overlap(&c, &d);
        assert_eq!(ov.shared_rows.len(), 4);
        assert_eq!(ov.local_rows_a, vec![0, 1, 2, 3]);
        assert_eq!(ov.local_rows_b, vec![0, 1, 2, 3]);
    }

    #[test]
    fn symmetric_validation_rejects_asymmetry() {
        let bad = ObservedBlock::new(
            "bad",
            EntityIndexSet::range(0, 2),
            None,
            array![[1.0, 2.0], [2.5, 1.0]],
            full_mask(2, 2),
            None,
        );
        assert!(bad.is_err());

        let bad_mask = {
            let mut m = full_mask(2, 2);
            m[[0, 1]] = 0;
            ObservedBlock::new(
                "bm",
                EntityIndexSet::range(0, 2),
                None,
                array![[1.0, 0.0], [2.0, 1.0]],
                m,
                None,
            )
        };
        assert!(bad_mask.is_err());
    }

    #[test]
    fn sentinel_cells_are_zeroed() {
        let mut mask = full_mask(2, 2);
        mask[[0, 1]] = 0;
        let b = ObservedBlock::new(
            "b",
            EntityIndexSet::range(0, 2),
            Some(EntityIndexSet::range(2, 2)),
            array![[1.0, 99.0], [3.0, 4.0]],
            mask,
            None,
        )
        .unwrap();
        assert_eq!(b.values[[0, 1]], 0.0);
    }

    #[test]
    fn pmi_examples() {
        // joint 0.2, marginals 0.4 and 0.5 -> 0.
        let j = array![[0.2]];
        // marginals must be one per entity; use a 2x2 table instead.
        let joint = array![[0.2, 0.2], [0.2, 0.3]];
        let _ = j;
        let pmi = cooccurrence_to_pmi(&joint, &[0.4, 0.5], None).unwrap();
        assert_abs_diff_eq!(pmi[[0, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pmi[[1, 1]], (0.3f64 / 0.25).ln(), epsilon = 1e-12);

        // Independence: joint = outer product of marginals -> all zeros.
        let m = [0.3, 0.7];
        let mut joint = Array2::zeros((2, 2));
        for x in 0..2 {
            for y in 0..2 {
                joint[[x, y]] = m[x] * m[y];
            }
        }
        let pmi = cooccurrence_to_pmi(&joint, &m, None).unwrap();
        assert!(pmi.iter().all(|v| v.abs() < 1e-12));

        // Direct arithmetic: log(0.3 / 0.25) = log(1.2).
        let joint = array![[0.2, 0.3], [0.3, 0.2]];
        let pmi = cooccurrence_to_pmi(&joint, &[0.5, 0.5], None).unwrap();
        assert_abs_diff_eq!(pmi[[0, 1]], 1.2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(pmi[[0, 1]], 0.1823215567939546, epsilon = 1e-12);
    }

    #[test]
    fn pmi_zero_joint_uses_floor_and_zero_marginal_errors() {
        let joint = array![[0.0, 0.5], [0.5, 0.0]];
        let pmi = cooccurrence_to_pmi(&joint, &[0.5, 0.5], None).unwrap();
        // Floor = smallest positive joint = 0.5 -> same value as the observed cells.
        assert_abs_diff_eq!(pmi[[0, 0]], pmi[[0, 1]], epsilon = 1e-12);

        let with_floor = cooccurrence_to_pmi(&joint, &[0.5, 0.5], Some(1e-6)).unwrap();
        assert!(with_floor[[0, 0]] < pmi[[0, 0]]);

        assert!(cooccurrence_to_pmi(&joint, &[0.0, 0.5], None).is_err());
    }
}
