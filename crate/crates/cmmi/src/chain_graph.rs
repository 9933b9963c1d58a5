//! The overlap graph and its orchestration algorithms.
//!
//! Blocks are vertices; two blocks are adjacent when they share at least
//! `threshold` entities (row side, or either side for asymmetric blocks).
//! On top of the graph:
//! - recoverability: an entry (s,t) is recoverable iff one connected
//!   component covers both s and t;
//! - chain selection for a target entry: endpoints are the pair of blocks
//!   covering s and t with minimal summed residual score among connected
//!   pairs, joined by a BFS shortest path;
//! - holistic recovery: per component, align every embedding to a root
//!   frame along a minimum spanning tree and read off one global latent
//!   position per entity, best (lowest-score) block winning conflicts.

use crate::align;
use crate::block_model::{compute_overlap_rescaled, EntityIndexSet, ObservedBlock, RescaledBlock};
use crate::error::{CmmiError, Result};
use crate::linalg;
use crate::spectral_embed::{self, Embedding, ModeSpec, ResidualScore};
use ndarray::prelude::*;
use std::cmp::Ordering;
use std::collections::HashMap;

/// Order block ids numerically when both parse as integers, otherwise
/// lexicographically; purely numeric ids sort before non-numeric ones.
pub fn compare_block_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Clone, Debug)]
pub struct VertexInfo {
    pub block_id: String,
    pub rows: EntityIndexSet,
    pub cols: EntityIndexSet,
    pub symmetric: bool,
    /// Residual quality score of the block.
    pub c: f64,
}

#[derive(Clone, Debug)]
pub struct EdgeInfo {
    /// Vertex indices with `a < b`.
    pub a: usize,
    pub b: usize,
    pub row_overlap: usize,
    pub col_overlap: usize,
    /// `c_a + c_b`.
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct OverlapGraph {
    pub vertices: Vec<VertexInfo>,
    pub edges: Vec<EdgeInfo>,
    pub threshold: usize,
    /// `adj[v]` lists (neighbor vertex, edge index) sorted by neighbor
    /// block id.
    adj: Vec<Vec<(usize, usize)>>,
}

/// Residual scores of zero for every id — recoverability and plain
/// connectivity questions do not depend on scores.
pub fn zero_scores(ids: &[String]) -> Vec<ResidualScore> {
    ids.iter()
        .map(|id| ResidualScore { block_id: id.clone(), c: 0.0 })
        .collect()
}

fn match_scores(ids: &[&str], scores: &[ResidualScore]) -> Result<Vec<f64>> {
    let mut by_id: HashMap<&str, f64> = HashMap::new();
    for s in scores {
        if !s.c.is_finite() || s.c < 0.0 {
            return Err(CmmiError::Data(format!(
                "residual score for block {} must be finite and nonnegative, got {}",
                s.block_id, s.c
            )));
        }
        if by_id.insert(s.block_id.as_str(), s.c).is_some() {
            return Err(CmmiError::Data(format!(
                "duplicate residual score for block {}",
                s.block_id
            )));
        }
    }
    ids.iter()
        .map(|id| {
            by_id.get(id).copied().ok_or_else(|| {
                CmmiError::Data(format!("no residual score supplied for block {id}"))
            })
        })
        .collect()
}

pub fn vertices_of_observed(
    blocks: &[ObservedBlock],
    scores: &[ResidualScore],
) -> Result<Vec<VertexInfo>> {
    let ids: Vec<&str> = blocks.iter().map(|b| b.block_id.as_str()).collect();
    let cs = match_scores(&ids, scores)?;
    Ok(blocks
        .iter()
        .zip(cs)
        .map(|(b, c)| VertexInfo {
            block_id: b.block_id.clone(),
            rows: b.row_entities.clone(),
            cols: b.col_entities.clone(),
            symmetric: b.symmetric,
            c,
        })
        .collect())
}

pub fn vertices_of_rescaled(
    blocks: &[RescaledBlock],
    scores: &[ResidualScore],
) -> Result<Vec<VertexInfo>> {
    let ids: Vec<&str> = blocks.iter().map(|b| b.block_id.as_str()).collect();
    let cs = match_scores(&ids, scores)?;
    Ok(blocks
        .iter()
        .zip(cs)
        .map(|(b, c)| VertexInfo {
            block_id: b.block_id.clone(),
            rows: b.row_entities.clone(),
            cols: b.col_entities.clone(),
            symmetric: b.symmetric,
            c,
        })
        .collect())
}

/// Build the overlap graph: an edge joins two blocks when they share at
/// least `threshold` row entities, or — for asymmetric blocks — at least
/// `threshold` entities on either side.
pub fn build_graph(vertices: Vec<VertexInfo>, threshold: usize) -> Result<OverlapGraph> {
    if threshold == 0 {
        return Err(CmmiError::Data("overlap threshold must be at least 1".into()));
    }
    let n = vertices.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let row_overlap = vertices[i].rows.intersect(&vertices[j].rows).0.len();
            let col_overlap = vertices[i].cols.intersect(&vertices[j].cols).0.len();
            if row_overlap >= threshold || col_overlap >= threshold {
                edges.push(EdgeInfo {
                    a: i,
                    b: j,
                    row_overlap,
                    col_overlap,
                    weight: vertices[i].c + vertices[j].c,
                });
            }
        }
    }
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e_idx, e) in edges.iter().enumerate() {
        adj[e.a].push((e.b, e_idx));
        adj[e.b].push((e.a, e_idx));
    }
    for (v, list) in adj.iter_mut().enumerate() {
        let _ = v;
        list.sort_by(|&(x, _), &(y, _)| {
            compare_block_ids(&vertices[x].block_id, &vertices[y].block_id)
        });
    }
    Ok(OverlapGraph { vertices, edges, threshold, adj })
}

impl OverlapGraph {
    pub fn vertex_index(&self, block_id: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v.block_id == block_id)
    }

    /// Neighbor vertex indices of `v` in ascending block-id order.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[v].iter().map(|&(u, _)| u)
    }

    /// Connected components as sorted-by-discovery lists of vertex
    /// indices, found by depth-first search.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.vertices.len();
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                comp.push(v);
                for u in self.neighbors(v) {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// BFS shortest path between two vertices in the same component;
    /// neighbors are explored in ascending block-id order so ties among
    /// equal-length paths resolve deterministically.
    fn bfs_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        if from == to {
            return Some(vec![from]);
        }
        let n = self.vertices.len();
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut seen = vec![false; n];
        seen[from] = true;
        let mut queue = std::collections::VecDeque::from([from]);
        while let Some(v) = queue.pop_front() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    parent[u] = Some(v);
                    if u == to {
                        let mut path = vec![to];
                        let mut cur = to;
                        while let Some(p) = parent[cur] {
                            path.push(p);
                            cur = p;
                        }
                        path.reverse();
                        return Some(path);
                    }
                    queue.push_back(u);
                }
            }
        }
        None
    }
}

/// Union of the entity sets of each connected component, with a point
/// query: an entry (s,t) is recoverable iff one component covers s on the
/// row side and t on the column side.
#[derive(Clone, Debug)]
pub struct ComponentCover {
    pub rows: EntityIndexSet,
    pub cols: EntityIndexSet,
    /// Member block ids, sorted.
    pub members: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RecoverabilityMask {
    pub components: Vec<ComponentCover>,
}

impl RecoverabilityMask {
    pub fn entry(&self, s: usize, t: usize) -> bool {
        self.components
            .iter()
            .any(|c| c.rows.contains(s) && c.cols.contains(t))
    }
}

/// Connected components and their covered entity unions, ordered by the
/// smallest covered row entity.
pub fn recoverability(g: &OverlapGraph) -> RecoverabilityMask {
    let mut components = Vec::new();
    for comp in g.components() {
        let row_sets: Vec<&EntityIndexSet> = comp.iter().map(|&v| &g.vertices[v].rows).collect();
        let col_sets: Vec<&EntityIndexSet> = comp.iter().map(|&v| &g.vertices[v].cols).collect();
        let mut members: Vec<String> =
            comp.iter().map(|&v| g.vertices[v].block_id.clone()).collect();
        members.sort_by(|a, b| compare_block_ids(a, b));
        components.push(ComponentCover {
            rows: EntityIndexSet::union_of(&row_sets),
            cols: EntityIndexSet::union_of(&col_sets),
            members,
        });
    }
    components.sort_by_key(|c| c.rows.ids().first().copied().unwrap_or(usize::MAX));
    RecoverabilityMask { components }
}

/// Choose a chain of block ids for recovering entry (s,t): endpoints
/// minimize `c_i + c_j` over connected pairs of blocks covering s (rows)
/// and t (columns); the interior is the BFS shortest path. Ties go to the
/// smallest (i, j) id pair.
pub fn select_chain(g: &OverlapGraph, s: usize, t: usize) -> Result<Vec<String>> {
    let comps = g.components();
    let mut comp_of = vec![usize::MAX; g.vertices.len()];
    for (ci, comp) in comps.iter().enumerate() {
        for &v in comp {
            comp_of[v] = ci;
        }
    }
    let b_s: Vec<usize> = (0..g.vertices.len())
        .filter(|&v| g.vertices[v].rows.contains(s))
        .collect();
    let b_t: Vec<usize> = (0..g.vertices.len())
        .filter(|&v| g.vertices[v].cols.contains(t))
        .collect();
    if b_s.is_empty() || b_t.is_empty() {
        return Err(CmmiError::Data(format!(
            "entry ({s}, {t}) is not recoverable: no block covers {}",
            if b_s.is_empty() { s } else { t }
        )));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for &i in &b_s {
        for &j in &b_t {
            if comp_of[i] != comp_of[j] {
                continue;
            }
            let w = g.vertices[i].c + g.vertices[j].c;
            // Ties resolve to the lexicographically smallest (i, j) id pair.
            let better = match best {
                None => true,
                Some((bw, bi, bj)) => match w.total_cmp(&bw) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => {
                        match compare_block_ids(&g.vertices[i].block_id, &g.vertices[bi].block_id)
                        {
                            Ordering::Less => true,
                            Ordering::Greater => false,
                            Ordering::Equal => compare_block_ids(
                                &g.vertices[j].block_id,
                                &g.vertices[bj].block_id,
                            ) == Ordering::Less,
                        }
                    }
                },
            };
            if better {
                best = Some((w, i, j));
            }
        }
    }
    let (_, i0, il) = best.ok_or_else(|| {
        CmmiError::Data(format!(
            "entry ({s}, {t}) is not recoverable: the blocks covering {s} and those \
             covering {t} lie in different components"
        ))
    })?;
    let path = g
        .bfs_path(i0, il)
        .expect("endpoints verified to share a component");
    Ok(path
        .into_iter()
        .map(|v| g.vertices[v].block_id.clone())
        .collect())
}

/// Kruskal minimum spanning forest. Returns, per connected component (in
/// [`OverlapGraph::components`] order), the edge indices of its MST. Edges
/// are considered in (weight, id-pair) order, so the forest is
/// deterministic even with tied weights.
pub fn minimum_spanning_forest(g: &OverlapGraph) -> Vec<Vec<usize>> {
    let n = g.vertices.len();
    let mut order: Vec<usize> = (0..g.edges.len()).collect();
    order.sort_by(|&x, &y| {
        let (ex, ey) = (&g.edges[x], &g.edges[y]);
        ex.weight
            .total_cmp(&ey.weight)
            .then_with(|| {
                compare_block_ids(&g.vertices[ex.a].block_id, &g.vertices[ey.a].block_id)
            })
            .then_with(|| {
                compare_block_ids(&g.vertices[ex.b].block_id, &g.vertices[ey.b].block_id)
            })
    });
    // Union-find with path halving.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut chosen: Vec<usize> = Vec::new();
    for e_idx in order {
        let e = &g.edges[e_idx];
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra] = rb;
            chosen.push(e_idx);
        }
    }
    // Group chosen edges by component.
    let comps = g.components();
    let mut comp_of = vec![usize::MAX; n];
    for (ci, comp) in comps.iter().enumerate() {
        for &v in comp {
            comp_of[v] = ci;
        }
    }
    let mut forest = vec![Vec::new(); comps.len()];
    for e_idx in chosen {
        forest[comp_of[g.edges[e_idx].a]].push(e_idx);
    }
    forest
}

#[derive(Clone, Debug)]
pub struct HolisticComponent {
    /// Member block ids, sorted.
    pub members: Vec<String>,
    pub rows: EntityIndexSet,
    pub cols: EntityIndexSet,
}

/// Output of holistic recovery: one aligned latent position per covered
/// entity and the assembled estimate with NaN at unrecoverable cells.
#[derive(Clone, Debug)]
pub struct HolisticResult {
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
    /// Aligned latent positions, one row per entry of `row_ids`.
    pub x_tilde: Array2<f64>,
    /// Right positions per entry of `col_ids` (asymmetric mode only).
    pub y_tilde: Option<Array2<f64>>,
    /// Estimated values over `row_ids × col_ids`; NaN where the row and
    /// column entity never share a component.
    pub estimate: Array2<f64>,
    pub components: Vec<HolisticComponent>,
}

/// Align all blocks of each component into a common frame along the MST
/// and assemble a global latent matrix plus the full estimate.
pub fn holistic_recover(
    g: &OverlapGraph,
    blocks: &[RescaledBlock],
    mode: &ModeSpec,
) -> Result<HolisticResult> {
    if g.vertices.is_empty() {
        return Err(CmmiError::Data("holistic recovery on an empty graph".into()));
    }
    let block_of: HashMap<&str, &RescaledBlock> =
        blocks.iter().map(|b| (b.block_id.as_str(), b)).collect();
    let ordered: Vec<&RescaledBlock> = g
        .vertices
        .iter()
        .map(|v| {
            block_of.get(v.block_id.as_str()).copied().ok_or_else(|| {
                CmmiError::Data(format!("graph vertex {} has no matching block", v.block_id))
            })
        })
        .collect::<Result<_>>()?;
    let d = mode.d();
    // Embed each block once.
    let mut embeddings: Vec<Embedding> = Vec::with_capacity(ordered.len());
    for b in &ordered {
        embeddings.push(spectral_embed::embed(b, mode)?);
    }
    let row_sets: Vec<&EntityIndexSet> = g.vertices.iter().map(|v| &v.rows).collect();
    let col_sets: Vec<&EntityIndexSet> = g.vertices.iter().map(|v| &v.cols).collect();
    let row_union = EntityIndexSet::union_of(&row_sets);
    let col_union = EntityIndexSet::union_of(&col_sets);
    let n_rows = row_union.len();
    let n_cols = col_union.len();
    let mut x_tilde = Array2::from_elem((n_rows, d), f64::NAN);
    let mut y_tilde = if mode.is_symmetric() {
        None
    } else {
        Some(Array2::from_elem((n_cols, d), f64::NAN))
    };
    let mut estimate = Array2::from_elem((n_rows, n_cols), f64::NAN);

    let comps = g.components();
    let forest = minimum_spanning_forest(g);
    // Order components by their smallest covered row entity, matching the
    // recoverability listing.
    let mut comp_order: Vec<usize> = (0..comps.len()).collect();
    comp_order.sort_by_key(|&ci| {
        comps[ci]
            .iter()
            .filter_map(|&v| g.vertices[v].rows.ids().first().copied())
            .min()
            .unwrap_or(usize::MAX)
    });

    let mut out_components = Vec::new();
    for &ci in &comp_order {
        let comp = &comps[ci];
        // Root: minimum residual score, ties to smallest block id.
        let root = *comp
            .iter()
            .min_by(|&&a, &&b| {
                g.vertices[a]
                    .c
                    .total_cmp(&g.vertices[b].c)
                    .then_with(|| {
                        compare_block_ids(&g.vertices[a].block_id, &g.vertices[b].block_id)
                    })
            })
            .expect("components are non-empty");
        // MST adjacency restricted to this component.
        let mut tree_adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for &e_idx in &forest[ci] {
            let e = &g.edges[e_idx];
            tree_adj.entry(e.a).or_default().push(e.b);
            tree_adj.entry(e.b).or_default().push(e.a);
        }
        for list in tree_adj.values_mut() {
            list.sort_by(|&x, &y| {
                compare_block_ids(&g.vertices[x].block_id, &g.vertices[y].block_id)
            });
        }
        // Frames by BFS from the root: frame[root] = I, and for a child
        // discovered from `parent`, frame[child] = W(child→parent) ·
        // frame[parent], so x_child · frame[child] lives in root
        // coordinates.
        let mut frames: HashMap<usize, Array2<f64>> = HashMap::new();
        frames.insert(root, Array2::eye(d));
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(parent) = queue.pop_front() {
            let Some(children) = tree_adj.get(&parent) else { continue };
            for &child in children {
                if frames.contains_key(&child) {
                    continue;
                }
                let ov = compute_overlap_rescaled(ordered[child], ordered[parent]);
                let map = match mode {
                    ModeSpec::Psd { .. } => {
                        align::align_pair_psd(&embeddings[child], &embeddings[parent], &ov)?
                    }
                    ModeSpec::Indefinite { .. } => {
                        align::align_pair_indefinite(&embeddings[child], &embeddings[parent], &ov)?
                    }
                    ModeSpec::Asymmetric { .. } => {
                        align::align_pair_asymmetric(&embeddings[child], &embeddings[parent], &ov)?
                    }
                };
                let frame = map.w.dot(&frames[&parent]);
                frames.insert(child, frame);
                queue.push_back(child);
            }
        }
        // Fill order: descending score, then descending id, so the
        // lowest-score (smallest-id on ties) block is written last and wins
        // every conflicting entity.
        let mut fill: Vec<usize> = comp.clone();
        fill.sort_by(|&a, &b| {
            g.vertices[b]
                .c
                .total_cmp(&g.vertices[a].c)
                .then_with(|| compare_block_ids(&g.vertices[b].block_id, &g.vertices[a].block_id))
        });
        for &v in &fill {
            let frame = &frames[&v];
            let xr = embeddings[v].x.dot(frame);
            for (local, &ent) in g.vertices[v].rows.ids().iter().enumerate() {
                let gr = row_union.position(ent).expect("row in union");
                x_tilde.row_mut(gr).assign(&xr.row(local));
            }
            if let Some(y_tilde) = y_tilde.as_mut() {
                let y = embeddings[v].y.as_ref().ok_or_else(|| {
                    CmmiError::Data(format!(
                        "embedding {} has no right positions",
                        embeddings[v].block_id
                    ))
                })?;
                let frame_inv_t = linalg::inv_small(frame)?.t().to_owned();
                let yr = y.dot(&frame_inv_t);
                for (local, &ent) in g.vertices[v].cols.ids().iter().enumerate() {
                    let gc = col_union.position(ent).expect("col in union");
                    y_tilde.row_mut(gc).assign(&yr.row(local));
                }
            }
        }
        // Component estimate from the freshly written positions.
        let comp_rows =
            EntityIndexSet::union_of(&comp.iter().map(|&v| &g.vertices[v].rows).collect::<Vec<_>>());
        let comp_cols =
            EntityIndexSet::union_of(&comp.iter().map(|&v| &g.vertices[v].cols).collect::<Vec<_>>());
        let row_pos: Vec<usize> = comp_rows
            .ids()
            .iter()
            .map(|&e| row_union.position(e).expect("row in union"))
            .collect();
        let col_pos: Vec<usize> = comp_cols
            .ids()
            .iter()
            .map(|&e| col_union.position(e).expect("col in union"))
            .collect();
        let xc = linalg::take_rows(&x_tilde, &row_pos);
        let est = match mode {
            ModeSpec::Psd { .. } => {
                let xc_cols = linalg::take_rows(&x_tilde, &col_pos);
                xc.dot(&xc_cols.t())
            }
            ModeSpec::Indefinite { signature } => {
                let xc_cols = linalg::take_rows(&x_tilde, &col_pos);
                xc.dot(&signature.metric()).dot(&xc_cols.t())
            }
            ModeSpec::Asymmetric { .. } => {
                let yc = linalg::take_rows(y_tilde.as_ref().expect("asymmetric has y"), &col_pos);
                xc.dot(&yc.t())
            }
        };
        for (li, &gi) in row_pos.iter().enumerate() {
            for (lj, &gj) in col_pos.iter().enumerate() {
                estimate[[gi, gj]] = est[[li, lj]];
            }
        }
        let mut members: Vec<String> =
            comp.iter().map(|&v| g.vertices[v].block_id.clone()).collect();
        members.sort_by(|a, b| compare_block_ids(a, b));
        out_components.push(HolisticComponent { members, rows: comp_rows, cols: comp_cols });
    }
    Ok(HolisticResult {
        row_ids: row_union.ids().to_vec(),
        col_ids: col_union.ids().to_vec(),
        x_tilde,
        y_tilde,
        estimate,
        components: out_components,
    })
}
