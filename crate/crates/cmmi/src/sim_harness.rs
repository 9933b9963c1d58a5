//! Synthetic data generation and Monte-Carlo studies.
//!
//! Populations are exact rank-`d` matrices built from Haar-random
//! orthonormal frames with a fixed spectral profile scaled by the entity
//! count. Observed blocks are carved out of the population along a diagonal
//! chain of overlapping windows, corrupted by additive Gaussian noise and
//! Bernoulli masking. Every random draw flows through the sub-stream
//! discipline in [`crate::rng`], so results are bit-reproducible for a
//! given seed regardless of thread scheduling.

use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Deserialize;
use std::time::Instant;

use crate::block_model::{rescale, EntityIndexSet, ObservedBlock, RescaledBlock};
use crate::error::{CmmiError, Result};
use crate::inference;
use crate::integrate;
use crate::linalg;
use crate::rng::{substream, StreamPurpose};
use crate::spectral_embed::{ModeSpec, Signature};
use crate::stats;

/// Population model for a simulated experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimMode {
    /// Positive semidefinite symmetric population of rank `d`.
    Psd { d: usize },
    /// Indefinite symmetric population with `d_plus` positive and
    /// `d_minus` negative eigenvalues.
    Indefinite { d_plus: usize, d_minus: usize },
    /// Rectangular population of rank `d` with independent row and column
    /// entity universes.
    Asymmetric { d: usize },
}

impl SimMode {
    pub fn d(&self) -> usize {
        match self {
            SimMode::Psd { d } | SimMode::Asymmetric { d } => *d,
            SimMode::Indefinite { d_plus, d_minus } => d_plus + d_minus,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self, SimMode::Asymmetric { .. })
    }
}

/// How the chain windows are laid out over the population.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Square windows sliding along the diagonal of a symmetric population;
    /// consecutive windows share `m` entities.
    DiagonalChain,
    /// Square windows over a rectangular population; row windows slide as in
    /// [`Layout::DiagonalChain`] while column windows advance by the same
    /// step, except at links listed in `rows_only_links`, where the column
    /// windows are made disjoint so the link connects through rows alone.
    DiagonalChainAsymmetric,
}

/// Overlap between consecutive windows, as a fraction of the window size or
/// as an absolute entity count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OverlapSpec {
    Fraction(f64),
    Absolute(usize),
}

/// Configuration of one simulated chain experiment.
#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Number of row entities in the population.
    pub n_total: usize,
    pub mode: SimMode,
    /// Spectral profile, multiplied by `n_total` to produce eigenvalues
    /// (singular values in the rectangular mode). Must be algebraically
    /// descending with `d` entries.
    pub eigen_profile: Vec<f64>,
    /// Window size as a fraction of `n_total`.
    pub block_fraction: f64,
    pub overlap: OverlapSpec,
    /// Bernoulli observation rate in (0, 1].
    pub q: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Number of links; the chain visits `chain_length + 1` windows.
    pub chain_length: usize,
    pub layout: Layout,
    /// Link indices (1-based, in `1..=chain_length`) whose column windows
    /// are disjoint. Only meaningful for the asymmetric layout.
    pub rows_only_links: Vec<usize>,
    pub seed: u64,
    pub replicates: usize,
}

/// JSON surface for [`SimConfig`]. Optional fields take documented
/// defaults; `overlap_fraction` and `overlap_size` are mutually exclusive.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    n_total: usize,
    mode: SimMode,
    #[serde(default)]
    eigen_profile: Option<Vec<f64>>,
    block_fraction: f64,
    #[serde(default)]
    overlap_fraction: Option<f64>,
    #[serde(default)]
    overlap_size: Option<usize>,
    q: f64,
    sigma: f64,
    chain_length: usize,
    #[serde(default)]
    layout: Option<Layout>,
    #[serde(default)]
    rows_only_links: Option<Vec<usize>>,
    #[serde(default)]
    seed: Option<u64>,
    replicates: usize,
}

/// Evenly spaced profile from 1.0 down to 0.5 (a single direction gets 1.0).
fn default_positive_profile(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d)
        .map(|k| 1.0 - 0.5 * k as f64 / (d - 1) as f64)
        .collect()
}

fn default_profile(mode: SimMode) -> Vec<f64> {
    match mode {
        SimMode::Psd { d } | SimMode::Asymmetric { d } => default_positive_profile(d),
        SimMode::Indefinite { d_plus, d_minus } => {
            let mut out = default_positive_profile(d_plus);
            out.extend(default_positive_profile(d_minus).into_iter().rev().map(|v| -v));
            out
        }
    }
}

impl SimConfig {
    /// Parse a JSON configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)
            .map_err(|e| CmmiError::Manifest(format!("invalid simulation config: {e}")))?;
        let overlap = match (raw.overlap_fraction, raw.overlap_size) {
            (Some(f), None) => OverlapSpec::Fraction(f),
            (None, Some(s)) => OverlapSpec::Absolute(s),
            (Some(_), Some(_)) => {
                return Err(CmmiError::Manifest(
                    "give either overlap_fraction or overlap_size, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CmmiError::Manifest(
                    "one of overlap_fraction or overlap_size is required".into(),
                ))
            }
        };
        let layout = raw.layout.unwrap_or(match raw.mode {
            SimMode::Asymmetric { .. } => Layout::DiagonalChainAsymmetric,
            _ => Layout::DiagonalChain,
        });
        let cfg = SimConfig {
            n_total: raw.n_total,
            mode: raw.mode,
            eigen_profile: raw.eigen_profile.unwrap_or_else(|| default_profile(raw.mode)),
            block_fraction: raw.block_fraction,
            overlap,
            q: raw.q,
            sigma: raw.sigma,
            chain_length: raw.chain_length,
            layout,
            rows_only_links: raw.rows_only_links.unwrap_or_default(),
            seed: raw.seed.unwrap_or(0),
            replicates: raw.replicates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Convenience constructor covering the common sweep shape; validates.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_total: usize,
        mode: SimMode,
        block_fraction: f64,
        overlap: OverlapSpec,
        q: f64,
        sigma: f64,
        chain_length: usize,
        seed: u64,
        replicates: usize,
    ) -> Result<Self> {
        let layout = match mode {
            SimMode::Asymmetric { .. } => Layout::DiagonalChainAsymmetric,
            _ => Layout::DiagonalChain,
        };
        let cfg = SimConfig {
            n_total,
            mode,
            eigen_profile: default_profile(mode),
            block_fraction,
            overlap,
            q,
            sigma,
            chain_length,
            layout,
            rows_only_links: Vec::new(),
            seed,
            replicates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mode_spec(&self) -> Result<ModeSpec> {
        match self.mode {
            SimMode::Psd { d } => Ok(ModeSpec::Psd { d }),
            SimMode::Indefinite { d_plus, d_minus } => Ok(ModeSpec::Indefinite {
                signature: Signature::new(d_plus, d_minus)?,
            }),
            SimMode::Asymmetric { d } => Ok(ModeSpec::Asymmetric { d }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mode.d();
        if d == 0 {
            return Err(CmmiError::Data("rank must be at least 1".into()));
        }
        if self.eigen_profile.len() != d {
            return Err(CmmiError::Data(format!(
                "eigen_profile has {} entries but the mode needs {d}",
                self.eigen_profile.len()
            )));
        }
        if self
            .eigen_profile
            .windows(2)
            .any(|w| !(w[0] >= w[1]) )
        {
            return Err(CmmiError::Data(
                "eigen_profile must be algebraically descending".into(),
            ));
        }
        match self.mode {
            SimMode::Psd { .. } | SimMode::Asymmetric { .. } => {
                if self.eigen_profile.iter().any(|&v| !(v > 0.0)) {
                    return Err(CmmiError::Data(
                        "eigen_profile must be strictly positive for this mode".into(),
                    ));
                }
            }
            SimMode::Indefinite { d_plus, d_minus } => {
                let pos_ok = self.eigen_profile[..d_plus].iter().all(|&v| v > 0.0);
                let neg_ok = self.eigen_profile[d - d_minus..].iter().all(|&v| v < 0.0);
                if !pos_ok || !neg_ok {
                    return Err(CmmiError::Data(format!(
                        "eigen_profile must hold {d_plus} positive then {d_minus} negative values"
                    )));
                }
            }
        }
        if !(self.block_fraction > 0.0 && self.block_fraction <= 1.0) {
            return Err(CmmiError::Data(format!(
                "block_fraction must lie in (0, 1], got {}",
                self.block_fraction
            )));
        }
        if let OverlapSpec::Fraction(f) = self.overlap {
            if !(f > 0.0 && f < 1.0) {
                return Err(CmmiError::Data(format!(
                    "overlap_fraction must lie in (0, 1), got {f}"
                )));
            }
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(CmmiError::Data(format!(
                "observation rate q must lie in (0, 1], got {}",
                self.q
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(CmmiError::Data(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.chain_length == 0 {
            return Err(CmmiError::Data("chain_length must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(CmmiError::Data("replicates must be at least 1".into()));
        }
        match self.layout {
            Layout::DiagonalChain => {
                if !self.mode.is_symmetric() {
                    return Err(CmmiError::Data(
                        "the symmetric layout needs a symmetric population mode".into(),
                    ));
                }
                if !self.rows_only_links.is_empty() {
                    return Err(CmmiError::Data(
                        "rows_only_links only applies to the asymmetric layout".into(),
                    ));
                }
            }
            Layout::DiagonalChainAsymmetric => {
                if self.mode.is_symmetric() {
                    return Err(CmmiError::Data(
                        "the asymmetric layout needs the asymmetric population mode".into(),
                    ));
                }
                for &k in &self.rows_only_links {
                    if k == 0 || k > self.chain_length {
                        return Err(CmmiError::Data(format!(
                            "rows_only_links entry {k} is outside 1..={}",
                            self.chain_length
                        )));
                    }
                }
            }
        }
        // Geometry feasibility is the detailed check.
        resolve_geometry(self).map(|_| ())
    }
}

/// Resolved window layout for a chain over the population.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainGeometry {
    /// Window size.
    pub n: usize,
    /// Shared entities between consecutive windows.
    pub m: usize,
    /// Row window starts, one per chain position.
    pub row_starts: Vec<usize>,
    /// Column window starts for the asymmetric layout.
    pub col_starts: Option<Vec<usize>>,
    /// Column entity count of the population (`n_total` when symmetric).
    pub n_cols_total: usize,
}

impl ChainGeometry {
    pub fn row_window(&self, i: usize) -> EntityIndexSet {
        EntityIndexSet::range(self.row_starts[i], self.n)
    }

    pub fn col_window(&self, i: usize) -> Option<EntityIndexSet> {
        self.col_starts
            .as_ref()
            .map(|cs| EntityIndexSet::range(cs[i], self.n))
    }
}

/// Turn fractions into concrete window positions and check they fit.
pub fn resolve_geometry(cfg: &SimConfig) -> Result<ChainGeometry> {
    let n_pop = cfg.n_total;
    let n = (cfg.block_fraction * n_pop as f64).round() as usize;
    let d = cfg.mode.d();
    if n < d.max(1) {
        return Err(CmmiError::Data(format!(
            "window size {n} is below the rank {d}"
        )));
    }
    let m = match cfg.overlap {
        OverlapSpec::Fraction(f) => (f * n as f64).round() as usize,
        OverlapSpec::Absolute(s) => s,
    };
    if m < d {
        return Err(CmmiError::Data(format!(
            "window overlap {m} is below the rank {d}; alignment would be underdetermined"
        )));
    }
    if m >= n {
        return Err(CmmiError::Data(format!(
            "window overlap {m} must be smaller than the window size {n}"
        )));
    }
    let step = n - m;
    let ell = cfg.chain_length;
    let row_starts: Vec<usize> = (0..=ell).map(|i| i * step).collect();
    if row_starts[ell] + n > n_pop {
        return Err(CmmiError::Data(format!(
            "chain of {} windows of size {n} with step {step} needs {} row entities \
             but the population has {n_pop}",
            ell + 1,
            row_starts[ell] + n
        )));
    }
    match cfg.layout {
        Layout::DiagonalChain => Ok(ChainGeometry {
            n,
            m,
            row_starts,
            col_starts: None,
            n_cols_total: n_pop,
        }),
        Layout::DiagonalChainAsymmetric => {
            let mut col_starts = Vec::with_capacity(ell + 1);
            col_starts.push(0usize);
            for k in 1..=ell {
                let stride = if cfg.rows_only_links.contains(&k) { n } else { step };
                let prev = col_starts[k - 1];
                col_starts.push(prev + stride);
            }
            let n_cols_total = col_starts[ell] + n;
            Ok(ChainGeometry {
                n,
                m,
                row_starts,
                col_starts: Some(col_starts),
                n_cols_total,
            })
        }
    }
}

/// Ground truth for one experiment: the population matrix and the latent
/// positions that generated it.
#[derive(Clone, Debug)]
pub struct Population {
    /// `n_total x n_cols_total` population matrix, exactly rank `d`.
    pub p: Array2<f64>,
    /// Left latent positions (`n_total x d`).
    pub x: Array2<f64>,
    /// Right latent positions for the asymmetric mode.
    pub y: Option<Array2<f64>>,
}

/// Haar-distributed `n x d` orthonormal frame: Gaussian matrix, thin QR,
/// then column signs fixed so the R diagonal is nonnegative (this makes the
/// distribution exactly Haar rather than QR-convention dependent).
pub fn haar_orthonormal(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    if d > n {
        return Err(CmmiError::Data(format!(
            "cannot draw {d} orthonormal directions in dimension {n}"
        )));
    }
    let g = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    let (mut q, r) = linalg::qr_thin(&g)?;
    for k in 0..d {
        if r[[k, k]] < 0.0 {
            q.column_mut(k).mapv_inplace(|v| -v);
        }
    }
    Ok(q)
}

fn scale_columns(u: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let mut out = u.clone();
    for (k, &w) in weights.iter().enumerate() {
        out.column_mut(k).mapv_inplace(|v| v * w);
    }
    out
}

/// Enforce bitwise symmetry (BLAS products are only symmetric to rounding).
fn symmetrize(p: &mut Array2<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (p[[i, j]] + p[[j, i]]);
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
}

/// Draw the population for one replicate. The draw order (left frame, then
/// right frame when present) is part of the reproducibility contract.
pub fn generate_population(
    cfg: &SimConfig,
    geom: &ChainGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<Population> {
    let n_pop = cfg.n_total;
    let scale = n_pop as f64;
    let values: Vec<f64> = cfg.eigen_profile.iter().map(|v| v * scale).collect();
    let half: Vec<f64> = values.iter().map(|v| v.abs().sqrt()).collect();
    match cfg.mode {
        SimMode::Psd { d } => {
            let u = haar_orthonormal(n_pop, d, rng)?;
            let x = scale_columns(&u, &half);
            let mut p = x.dot(&x.t());
            symmetrize(&mut p);
            Ok(Population { p, x, y: None })
        }
        SimMode::Indefinite { d_plus: _, d_minus: _ } => {
            let d = cfg.mode.d();
            let u = haar_orthonormal(n_pop, d, rng)?;
            let x = scale_columns(&u, &half);
            let signs: Vec<f64> = values.iter().map(|v| v.signum()).collect();
            let xs = scale_columns(&x, &signs);
            let mut p = x.dot(&xs.t());
            symmetrize(&mut p);
            Ok(Population { p, x, y: None })
        }
        SimMode::Asymmetric { d } => {
            let m_pop = geom.n_cols_total;
            let u = haar_orthonormal(n_pop, d, rng)?;
            let v = haar_orthonormal(m_pop, d, rng)?;
            let x = scale_columns(&u, &half);
            let y = scale_columns(&v, &half);
            let p = x.dot(&y.t());
            Ok(Population { p, x, y: Some(y) })
        }
    }
}

/// Observe one symmetric window of a population: additive Gaussian noise and
/// a Bernoulli mask, both mirrored across the diagonal so the block is
/// bitwise symmetric. Noise and mask variates are always drawn, even when
/// `sigma == 0` or `q == 1`, so stream positions do not depend on them.
pub fn observe_symmetric_block(
    p: &ArrayView2<f64>,
    entities: &EntityIndexSet,
    block_id: &str,
    sigma: f64,
    q: f64,
    noise_rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
) -> Result<ObservedBlock> {
    let n = entities.len();
    let mut values = Array2::<f64>::zeros((n, n));
    let mut mask = Array2::<u8>::zeros((n, n));
    for li in 0..n {
        let gi = entities.ids()[li];
        for lj in li..n {
            let gj = entities.ids()[lj];
            let z: f64 = noise_rng.sample(StandardNormal);
            let v = p[[gi, gj]] + sigma * z;
            values[[li, lj]] = v;
            values[[lj, li]] = v;
            let o = u8::from(mask_rng.gen::<f64>() < q);
            mask[[li, lj]] = o;
            mask[[lj, li]] = o;
        }
    }
    ObservedBlock::new(block_id, entities.clone(), None, values, mask, Some(q))
}

/// Observe one rectangular window with independent noise and mask per cell.
#[allow(clippy::too_many_arguments)]
pub fn observe_asymmetric_block(
    p: &ArrayView2<f64>,
    rows: &EntityIndexSet,
    cols: &EntityIndexSet,
    block_id: &str,
    sigma: f64,
    q: f64,
    noise_rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
) -> Result<ObservedBlock> {
    let (n, mc) = (rows.len(), cols.len());
    let mut values = Array2::<f64>::zeros((n, mc));
    let mut mask = Array2::<u8>::zeros((n, mc));
    for li in 0..n {
        let gi = rows.ids()[li];
        for lj in 0..mc {
            let gj = cols.ids()[lj];
            let z: f64 = noise_rng.sample(StandardNormal);
            values[[li, lj]] = p[[gi, gj]] + sigma * z;
            mask[[li, lj]] = u8::from(mask_rng.gen::<f64>() < q);
        }
    }
    ObservedBlock::new(
        block_id,
        rows.clone(),
        Some(cols.clone()),
        values,
        mask,
        Some(q),
    )
}

/// Carve the chain of observed blocks out of a population. Blocks are
/// produced in chain order with ids `"0"`, `"1"`, ....
pub fn carve_chain(
    cfg: &SimConfig,
    geom: &ChainGeometry,
    pop: &Population,
    noise_rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
) -> Result<Vec<ObservedBlock>> {
    let mut blocks = Vec::with_capacity(cfg.chain_length + 1);
    for i in 0..=cfg.chain_length {
        let rows = geom.row_window(i);
        let id = i.to_string();
        let block = match geom.col_window(i) {
            None => observe_symmetric_block(
                &pop.p.view(),
                &rows,
                &id,
                cfg.sigma,
                cfg.q,
                noise_rng,
                mask_rng,
            )?,
            Some(cols) => observe_asymmetric_block(
                &pop.p.view(),
                &rows,
                &cols,
                &id,
                cfg.sigma,
                cfg.q,
                noise_rng,
                mask_rng,
            )?,
        };
        blocks.push(block);
    }
    Ok(blocks)
}

/// Per-replicate error summary. `first_order_max` and `remainder_max` are
/// NaN when the decomposition is not computed (any mode other than the
/// positive semidefinite one).
#[derive(Clone, Debug)]
pub struct RepRecord {
    pub replicate: usize,
    /// Largest absolute entrywise error over the recovered rectangle.
    pub max_err: f64,
    /// Frobenius error relative to the Frobenius norm of the truth.
    pub rel_fro: f64,
    pub first_order_max: f64,
    pub remainder_max: f64,
    pub wall_ms: u64,
}

/// Results of a replicated chain experiment, plus the effective design
/// (fractions recomputed from the resolved integer geometry).
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub n_total: usize,
    /// Effective window fraction `n / n_total`.
    pub p: f64,
    /// Effective overlap fraction `m / n`.
    pub p_breve: f64,
    pub q: f64,
    pub sigma: f64,
    pub chain_length: usize,
    /// One record per successful replicate, in replicate order.
    pub rows: Vec<RepRecord>,
    /// `(replicate, message)` for replicates whose recovery failed.
    pub failures: Vec<(usize, String)>,
}

fn median_of(values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(stats::median(&values))
    }
}

impl ExperimentResult {
    pub fn median_max_err(&self) -> Option<f64> {
        median_of(self.rows.iter().map(|r| r.max_err).collect())
    }

    pub fn median_rel_fro(&self) -> Option<f64> {
        median_of(self.rows.iter().map(|r| r.rel_fro).collect())
    }

    pub fn median_first_order_max(&self) -> Option<f64> {
        median_of(
            self.rows
                .iter()
                .map(|r| r.first_order_max)
                .filter(|v| !v.is_nan())
                .collect(),
        )
    }

    pub fn median_remainder_max(&self) -> Option<f64> {
        median_of(
            self.rows
                .iter()
                .map(|r| r.remainder_max)
                .filter(|v| !v.is_nan())
                .collect(),
        )
    }
}

/// Truth rectangle for a chain: rows of the first window against the
/// columns covered by the last window (its rows when symmetric).
fn truth_rectangle<'a>(pop: &'a Population, geom: &ChainGeometry, ell: usize) -> ArrayView2<'a, f64> {
    let r0 = geom.row_starts[0];
    match &geom.col_starts {
        None => {
            let cl = geom.row_starts[ell];
            pop.p.slice(s![r0..r0 + geom.n, cl..cl + geom.n])
        }
        Some(cs) => {
            let cl = cs[ell];
            pop.p.slice(s![r0..r0 + geom.n, cl..cl + geom.n])
        }
    }
}

fn run_replicate(
    cfg: &SimConfig,
    geom: &ChainGeometry,
    mode: &ModeSpec,
    rep: usize,
) -> Result<RepRecord> {
    let mut pop_rng = substream(cfg.seed, rep as u64, StreamPurpose::Population);
    let mut noise_rng = substream(cfg.seed, rep as u64, StreamPurpose::Noise);
    let mut mask_rng = substream(cfg.seed, rep as u64, StreamPurpose::Mask);
    let pop = generate_population(cfg, geom, &mut pop_rng)?;
    let blocks = carve_chain(cfg, geom, &pop, &mut noise_rng, &mut mask_rng)?;
    let started = Instant::now();
    let rescaled: Vec<RescaledBlock> = blocks.iter().map(rescale).collect::<Result<_>>()?;
    let refs: Vec<&RescaledBlock> = rescaled.iter().collect();
    let recovery = integrate::cmmi_full(&refs, mode)?;
    let wall_ms = started.elapsed().as_millis() as u64;

    let ell = cfg.chain_length;
    let truth = truth_rectangle(&pop, geom, ell);
    let diff = &recovery.recovered.estimate - &truth;
    let max_err = linalg::max_abs(&diff.view());
    let truth_norm = linalg::fro_norm(&truth);
    let rel_fro = if truth_norm > 0.0 {
        linalg::fro_norm(&diff.view()) / truth_norm
    } else {
        f64::NAN
    };

    let (first_order_max, remainder_max) = if matches!(mode, ModeSpec::Psd { .. }) {
        let r0 = geom.row_starts[0];
        let rl = geom.row_starts[ell];
        let x_first = pop.x.slice(s![r0..r0 + geom.n, ..]);
        let x_last = pop.x.slice(s![rl..rl + geom.n, ..]);
        let p_first = pop.p.slice(s![r0..r0 + geom.n, r0..r0 + geom.n]);
        let p_last = pop.p.slice(s![rl..rl + geom.n, rl..rl + geom.n]);
        let e_first = &rescaled[0].a - &p_first;
        let e_last = &rescaled[ell].a - &p_last;
        let (m_star, remainder) = integrate::first_order_decomposition(
            &x_first,
            &x_last,
            &e_first.view(),
            &e_last.view(),
            &recovery.recovered.estimate.view(),
            &truth,
        )?;
        (
            linalg::max_abs(&m_star.view()),
            linalg::max_abs(&remainder.view()),
        )
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(RepRecord {
        replicate: rep,
        max_err,
        rel_fro,
        first_order_max,
        remainder_max,
        wall_ms,
    })
}

/// Run the configured experiment over all replicates. Replicates are
/// independent sub-streams, so parallel execution cannot change any value;
/// failed replicates are recorded rather than aborting the sweep.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let geom = resolve_geometry(cfg)?;
    let mode = cfg.mode_spec()?;
    let outcomes: Vec<std::result::Result<RepRecord, (usize, String)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &geom, &mode, rep).map_err(|e| (rep, e.to_string())))
        .collect();
    let mut rows = Vec::with_capacity(cfg.replicates);
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => rows.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(ExperimentResult {
        n_total: cfg.n_total,
        p: geom.n as f64 / cfg.n_total as f64,
        p_breve: geom.m as f64 / geom.n as f64,
        q: cfg.q,
        sigma: cfg.sigma,
        chain_length: cfg.chain_length,
        rows,
        failures,
    })
}

/// Distribution summary for one recovered entry across replicates, with the
/// errors standardized by the population-level standard error.
#[derive(Clone, Debug)]
pub struct EntryNormality {
    /// Local (row, column) position inside the recovered rectangle.
    pub entry: (usize, usize),
    pub sigma_tilde: f64,
    /// Standardized errors, one per successful replicate; empty when the
    /// population standard error is zero.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    /// True when the population standard error is zero (noiseless, fully
    /// observed designs), so standardization is undefined.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct NormalityStudy {
    pub entries: Vec<EntryNormality>,
    pub replicates_used: usize,
    pub failures: Vec<(usize, String)>,
}

/// Sampling-distribution study against one fixed population: the population
/// is drawn once (replicate stream 0), then noise and mask are redrawn per
/// replicate, and each requested entry's error is standardized by the exact
/// population standard error.
pub fn normality_study(cfg: &SimConfig, entries: &[(usize, usize)]) -> Result<NormalityStudy> {
    cfg.validate()?;
    let mode = cfg.mode_spec()?;
    if !matches!(mode, ModeSpec::Psd { .. }) {
        return Err(CmmiError::Data(
            "the sampling-distribution study needs the positive semidefinite mode, \
             where the population standard error is available in closed form"
                .into(),
        ));
    }
    if entries.is_empty() {
        return Err(CmmiError::Data("no entries requested".into()));
    }
    let geom = resolve_geometry(cfg)?;
    let mut pop_rng = substream(cfg.seed, 0, StreamPurpose::Population);
    let pop = generate_population(cfg, &geom, &mut pop_rng)?;
    let ell = cfg.chain_length;
    let r0 = geom.row_starts[0];
    let rl = geom.row_starts[ell];
    let x_first = pop.x.slice(s![r0..r0 + geom.n, ..]);
    let x_last = pop.x.slice(s![rl..rl + geom.n, ..]);
    let p_first = pop.p.slice(s![r0..r0 + geom.n, r0..r0 + geom.n]);
    let p_last = pop.p.slice(s![rl..rl + geom.n, rl..rl + geom.n]);
    let vc = inference::population_variance_components(
        &x_first,
        &x_last,
        &p_first,
        &p_last,
        cfg.sigma * cfg.sigma,
        cfg.q,
        cfg.q,
    )?;
    let sigma_tildes: Vec<f64> = entries
        .iter()
        .map(|&(s, t)| inference::entry_stderr(&vc, s, t))
        .collect::<Result<_>>()?;
    let truth = truth_rectangle(&pop, &geom, ell).to_owned();

    let outcomes: Vec<std::result::Result<Vec<f64>, (usize, String)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<Vec<f64>> {
                let mut noise_rng = substream(cfg.seed, rep as u64, StreamPurpose::Noise);
                let mut mask_rng = substream(cfg.seed, rep as u64, StreamPurpose::Mask);
                let blocks = carve_chain(cfg, &geom, &pop, &mut noise_rng, &mut mask_rng)?;
                let rescaled: Vec<RescaledBlock> =
                    blocks.iter().map(rescale).collect::<Result<_>>()?;
                let refs: Vec<&RescaledBlock> = rescaled.iter().collect();
                let recovery = integrate::cmmi_full(&refs, &mode)?;
                Ok(entries
                    .iter()
                    .map(|&(s, t)| recovery.recovered.estimate[[s, t]] - truth[[s, t]])
                    .collect())
            };
            run().map_err(|e| (rep, e.to_string()))
        })
        .collect();

    let mut per_entry: Vec<Vec<f64>> = vec![Vec::new(); entries.len()];
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(errs) => {
                for (k, e) in errs.into_iter().enumerate() {
                    per_entry[k].push(e);
                }
            }
            Err(f) => failures.push(f),
        }
    }
    let replicates_used = per_entry.first().map_or(0, Vec::len);

    let mut out = Vec::with_capacity(entries.len());
    for (k, &entry) in entries.iter().enumerate() {
        let sigma_tilde = sigma_tildes[k];
        if sigma_tilde == 0.0 {
            out.push(EntryNormality {
                entry,
                sigma_tilde,
                samples: Vec::new(),
                mean: f64::NAN,
                variance: f64::NAN,
                ks_statistic: f64::NAN,
                ks_p_value: f64::NAN,
                degenerate: true,
            });
            continue;
        }
        let samples: Vec<f64> = per_entry[k].iter().map(|e| e / sigma_tilde).collect();
        let mean = stats::mean(&samples);
        let variance = stats::sample_variance(&samples);
        let ks = stats::ks_statistic(&samples, stats::normal_cdf);
        let ks_p = stats::ks_pvalue(ks, samples.len());
        out.push(EntryNormality {
            entry,
            sigma_tilde,
            samples,
            mean,
            variance,
            ks_statistic: ks,
            ks_p_value: ks_p,
            degenerate: false,
        });
    }
    Ok(NormalityStudy {
        entries: out,
        replicates_used,
        failures,
    })
}

#[derive(Clone, Debug)]
pub struct OverlapStudyPoint {
    /// Window size at this sweep point.
    pub n: usize,
    pub n_total: usize,
    pub median_max_err: f64,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct OverlapStudy {
    pub points: Vec<OverlapStudyPoint>,
    /// Least-squares slope of `ln median_max_err` against `ln n`.
    pub slope: f64,
    pub all_succeeded: bool,
}

/// Sweep the window size with the overlap pinned at its minimum feasible
/// value (the rank itself). The population grows with the window so the
/// chain always fits exactly: `n_total = n + chain_length * (n - d)`.
pub fn minimal_overlap_study(cfg: &SimConfig, window_sizes: &[usize]) -> Result<OverlapStudy> {
    let d = cfg.mode.d();
    if window_sizes.len() < 2 {
        return Err(CmmiError::Data(
            "the sweep needs at least two window sizes".into(),
        ));
    }
    let mut points = Vec::with_capacity(window_sizes.len());
    let mut all_succeeded = true;
    for &n in window_sizes {
        if n <= d {
            return Err(CmmiError::Data(format!(
                "window size {n} must exceed the rank {d}"
            )));
        }
        let n_total = n + cfg.chain_length * (n - d);
        let mut point_cfg = cfg.clone();
        point_cfg.n_total = n_total;
        point_cfg.block_fraction = n as f64 / n_total as f64;
        point_cfg.overlap = OverlapSpec::Absolute(d);
        let result = run_experiment(&point_cfg)?;
        if !result.failures.is_empty() {
            all_succeeded = false;
        }
        points.push(OverlapStudyPoint {
            n,
            n_total,
            median_max_err: result.median_max_err().unwrap_or(f64::NAN),
            failures: result.failures.len(),
        });
    }
    let xs: Vec<f64> = points
        .iter()
        .filter(|pt| pt.median_max_err.is_finite())
        .map(|pt| pt.n as f64)
        .collect();
    let ys: Vec<f64> = points
        .iter()
        .filter(|pt| pt.median_max_err.is_finite())
        .map(|pt| pt.median_max_err)
        .collect();
    let slope = if xs.len() >= 2 {
        stats::log_log_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(OverlapStudy {
        points,
        slope,
        all_succeeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn psd_cfg(n_total: usize, sigma: f64, q: f64, reps: usize) -> SimConfig {
        SimConfig::new(
            n_total,
            SimMode::Psd { d: 3 },
            0.4,
            OverlapSpec::Fraction(0.25),
            q,
            sigma,
            2,
            7,
            reps,
        )
        .unwrap()
    }

    #[test]
    fn geometry_places_windows_on_the_diagonal() {
        let cfg = SimConfig {
            n_total: 10,
            mode: SimMode::Psd { d: 1 },
            eigen_profile: vec![1.0],
            block_fraction: 0.4,
            overlap: OverlapSpec::Absolute(1),
            q: 1.0,
            sigma: 0.0,
            chain_length: 2,
            layout: Layout::DiagonalChain,
            rows_only_links: Vec::new(),
            seed: 0,
            replicates: 1,
        };
        let geom = resolve_geometry(&cfg).unwrap();
        assert_eq!(geom.n, 4);
        assert_eq!(geom.m, 1);
        assert_eq!(geom.row_starts, vec![0, 3, 6]);
        assert_eq!(geom.n_cols_total, 10);
        assert_eq!(geom.row_window(2).ids(), &[6, 7, 8, 9]);
    }

    #[test]
    fn geometry_rejects_chains_that_do_not_fit() {
        let mut cfg = psd_cfg(100, 0.0, 1.0, 1);
        cfg.chain_length = 10;
        assert!(matches!(
            resolve_geometry(&cfg),
            Err(CmmiError::Data(_))
        ));
    }

    #[test]
    fn asymmetric_geometry_advances_columns_and_skips_rows_only_links() {
        let cfg = SimConfig {
            n_total: 16,
            mode: SimMode::Asymmetric { d: 2 },
            eigen_profile: vec![1.0, 0.5],
            block_fraction: 0.5,
            overlap: OverlapSpec::Absolute(4),
            q: 1.0,
            sigma: 0.0,
            chain_length: 2,
            layout: Layout::DiagonalChainAsymmetric,
            rows_only_links: vec![2],
            seed: 0,
            replicates: 1,
        };
        let geom = resolve_geometry(&cfg).unwrap();
        assert_eq!(geom.n, 8);
        assert_eq!(geom.row_starts, vec![0, 4, 8]);
        // Link 1 shares 4 columns; link 2 is disjoint in columns.
        assert_eq!(geom.col_starts.as_ref().unwrap(), &vec![0, 4, 12]);
        assert_eq!(geom.n_cols_total, 20);
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let text = r#"{
            "n_total": 60,
            "mode": {"kind": "psd", "d": 3},
            "block_fraction": 0.4,
            "overlap_fraction": 0.25,
            "q": 0.9,
            "sigma": 0.1,
            "chain_length": 2,
            "replicates": 3
        }"#;
        let cfg = SimConfig::from_json(text).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.layout, Layout::DiagonalChain);
        assert_eq!(cfg.eigen_profile, vec![1.0, 0.75, 0.5]);

        let indef = r#"{
            "n_total": 60,
            "mode": {"kind": "indefinite", "d_plus": 2, "d_minus": 2},
            "block_fraction": 0.5,
            "overlap_size": 6,
            "q": 1.0,
            "sigma": 0.0,
            "chain_length": 1,
            "seed": 11,
            "replicates": 1
        }"#;
        let cfg = SimConfig::from_json(indef).unwrap();
        assert_eq!(cfg.eigen_profile, vec![1.0, 0.5, -0.5, -1.0]);
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn config_json_rejects_conflicting_or_unknown_fields() {
        let both = r#"{
            "n_total": 60, "mode": {"kind": "psd", "d": 3},
            "block_fraction": 0.4, "overlap_fraction": 0.25, "overlap_size": 3,
            "q": 0.9, "sigma": 0.1, "chain_length": 2, "replicates": 3
        }"#;
        assert!(matches!(
            SimConfig::from_json(both),
            Err(CmmiError::Manifest(_))
        ));
        let unknown = r#"{
            "n_total": 60, "mode": {"kind": "psd", "d": 3},
            "block_fraction": 0.4, "overlap_fraction": 0.25,
            "q": 0.9, "sigma": 0.1, "chain_length": 2, "replicates": 3,
            "extra": true
        }"#;
        assert!(matches!(
            SimConfig::from_json(unknown),
            Err(CmmiError::Manifest(_))
        ));
    }

    #[test]
    fn population_has_exact_rank_and_spectrum() {
        let cfg = psd_cfg(60, 0.0, 1.0, 1);
        let geom = resolve_geometry(&cfg).unwrap();
        let mut rng = substream(3, 0, StreamPurpose::Population);
        let pop = generate_population(&cfg, &geom, &mut rng).unwrap();
        let (vals, _) = linalg::eigh_desc(&pop.p).unwrap();
        assert_abs_diff_eq!(vals[0], 60.0, epsilon = 1e-8);
        assert_abs_diff_eq!(vals[1], 45.0, epsilon = 1e-8);
        assert_abs_diff_eq!(vals[2], 30.0, epsilon = 1e-8);
        for &v in &vals[3..] {
            assert!(v.abs() < 1e-8, "rank should be exactly 3, got residual eigenvalue {v}");
        }
        // The latent positions reproduce the population exactly.
        let rec = pop.x.dot(&pop.x.t());
        assert!(linalg::max_abs(&(&rec - &pop.p).view()) < 1e-10);
    }

    #[test]
    fn indefinite_population_matches_its_signed_spectrum() {
        let cfg = SimConfig::new(
            40,
            SimMode::Indefinite { d_plus: 2, d_minus: 2 },
            0.5,
            OverlapSpec::Fraction(0.3),
            1.0,
            0.0,
            1,
            5,
            1,
        )
        .unwrap();
        let geom = resolve_geometry(&cfg).unwrap();
        let mut rng = substream(5, 0, StreamPurpose::Population);
        let pop = generate_population(&cfg, &geom, &mut rng).unwrap();
        let (vals, _) = linalg::eigh_desc(&pop.p).unwrap();
        assert_abs_diff_eq!(vals[0], 40.0, epsilon = 1e-8);
        assert_abs_diff_eq!(vals[1], 20.0, epsilon = 1e-8);
        assert_abs_diff_eq!(vals[vals.len() - 2], -20.0, epsilon = 1e-8);
        assert_abs_diff_eq!(vals[vals.len() - 1], -40.0, epsilon = 1e-8);
    }

    #[test]
    fn carve_reproduces_population_when_noiseless_and_dense() {
        let cfg = psd_cfg(60, 0.0, 1.0, 1);
        let geom = resolve_geometry(&cfg).unwrap();
        let mut pop_rng = substream(1, 0, StreamPurpose::Population);
        let mut noise_rng = substream(1, 0, StreamPurpose::Noise);
        let mut mask_rng = substream(1, 0, StreamPurpose::Mask);
        let pop = generate_population(&cfg, &geom, &mut pop_rng).unwrap();
        let blocks = carve_chain(&cfg, &geom, &pop, &mut noise_rng, &mut mask_rng).unwrap();
        assert_eq!(blocks.len(), 3);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b.block_id, i.to_string());
            assert!(b.mask.iter().all(|&o| o == 1));
            let s = geom.row_starts[i];
            let window = pop.p.slice(s![s..s + geom.n, s..s + geom.n]);
            assert_eq!(b.values, window.to_owned());
        }
    }

    #[test]
    fn mask_density_tracks_the_observation_rate() {
        let cfg = psd_cfg(100, 0.5, 0.7, 1);
        let geom = resolve_geometry(&cfg).unwrap();
        let mut pop_rng = substream(2, 0, StreamPurpose::Population);
        let mut noise_rng = substream(2, 0, StreamPurpose::Noise);
        let mut mask_rng = substream(2, 0, StreamPurpose::Mask);
        let pop = generate_population(&cfg, &geom, &mut pop_rng).unwrap();
        let blocks = carve_chain(&cfg, &geom, &pop, &mut noise_rng, &mut mask_rng).unwrap();
        // Count only the upper triangle: the mirrored cells are not
        // independent draws.
        let mut observed = 0usize;
        let mut total = 0usize;
        for b in &blocks {
            let n = b.n_rows();
            for i in 0..n {
                for j in i..n {
                    total += 1;
                    observed += usize::from(b.mask[[i, j]] == 1);
                }
            }
        }
        let density = observed as f64 / total as f64;
        let sd = (0.7f64 * 0.3 / total as f64).sqrt();
        assert!(
            (density - 0.7).abs() < 4.0 * sd,
            "density {density} strays from 0.7 (sd {sd})"
        );
    }

    #[test]
    fn noiseless_experiment_recovers_exactly() {
        let cfg = psd_cfg(60, 0.0, 1.0, 2);
        let result = run_experiment(&cfg).unwrap();
        assert!(result.failures.is_empty());
        assert_eq!(result.rows.len(), 2);
        for row in &result.rows {
            assert!(row.max_err < 1e-8, "max_err {} too large", row.max_err);
            assert!(row.rel_fro < 1e-10);
        }
        assert_abs_diff_eq!(result.p, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(result.p_breve, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn experiments_are_bit_reproducible() {
        let cfg = psd_cfg(60, 0.3, 0.8, 3);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.max_err.to_bits(), rb.max_err.to_bits());
            assert_eq!(ra.rel_fro.to_bits(), rb.rel_fro.to_bits());
            assert_eq!(ra.first_order_max.to_bits(), rb.first_order_max.to_bits());
        }
    }

    #[test]
    fn noisy_psd_experiment_fills_decomposition_fields() {
        let cfg = psd_cfg(60, 0.2, 0.9, 2);
        let result = run_experiment(&cfg).unwrap();
        assert!(result.failures.is_empty());
        for row in &result.rows {
            assert!(row.first_order_max.is_finite());
            assert!(row.remainder_max.is_finite());
            assert!(row.first_order_max > 0.0);
        }
    }

    #[test]
    fn asymmetric_experiment_recovers_noiselessly() {
        let cfg = SimConfig {
            n_total: 40,
            mode: SimMode::Asymmetric { d: 2 },
            eigen_profile: vec![1.0, 0.5],
            block_fraction: 0.4,
            overlap: OverlapSpec::Absolute(4),
            q: 1.0,
            sigma: 0.0,
            chain_length: 2,
            layout: Layout::DiagonalChainAsymmetric,
            rows_only_links: vec![2],
            seed: 9,
            replicates: 1,
        };
        let result = run_experiment(&cfg).unwrap();
        assert!(result.failures.is_empty(), "failures: {:?}", result.failures);
        assert!(result.rows[0].max_err < 1e-8);
        assert!(result.rows[0].first_order_max.is_nan());
    }

    #[test]
    fn normality_study_flags_degenerate_designs_and_standardizes_noisy_ones() {
        let exact = psd_cfg(60, 0.0, 1.0, 3);
        let study = normality_study(&exact, &[(0, 0)]).unwrap();
        assert!(study.entries[0].degenerate);
        assert!(study.entries[0].samples.is_empty());

        let noisy = psd_cfg(60, 0.4, 0.9, 40);
        let study = normality_study(&noisy, &[(0, 0), (0, 1)]).unwrap();
        assert!(study.failures.is_empty());
        for e in &study.entries {
            assert!(!e.degenerate);
            assert!(e.sigma_tilde > 0.0);
            assert_eq!(e.samples.len(), 40);
            // Loose sanity bounds; the acceptance suite tightens these.
            assert!(e.mean.abs() < 1.0, "mean {}", e.mean);
            assert!(e.variance > 0.05 && e.variance < 20.0, "variance {}", e.variance);
        }
    }

    #[test]
    fn minimal_overlap_sweep_is_exact_without_noise() {
        let mut cfg = psd_cfg(60, 0.0, 1.0, 2);
        cfg.chain_length = 2;
        let study = minimal_overlap_study(&cfg, &[12, 24]).unwrap();
        assert!(study.all_succeeded);
        for pt in &study.points {
            assert!(pt.median_max_err < 1e-8);
            assert_eq!(pt.failures, 0);
        }
        // n = 12, L = 2, d = 3 gives a population of 12 + 2 * 9 = 30.
        assert_eq!(study.points[0].n_total, 30);
    }
}
