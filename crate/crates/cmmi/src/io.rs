//! File formats and atomic output.
//!
//! Formats
//! - Manifest: JSON `{"blocks": [{"id", "rows", "cols"?, "values", "q"?}]}`;
//!   `values` is a path relative to the manifest, `cols` absent means the
//!   block is symmetric.
//! - Values CSV: headerless, comma-separated, one line per row entity, the
//!   literal token `NA` (case-sensitive) for missing cells.
//! - Recovered block CSV: header row of column entity ids (first cell
//!   empty), then one line per row entity: id followed by values.
//! - Confidence intervals CSV: long format `row,col,lower,upper` with
//!   global entity ids, row-major order.
//! - Embedding CSV: first line `block_id,d_plus,d_minus,n`, then the `x`
//!   matrix row-major (one row per line), then, for asymmetric embeddings,
//!   a line `Y` followed by the `y` matrix.
//! - Recoverability CSV: header `entity,component`, one line per
//!   (entity, component) membership, sorted.
//! - Experiment results CSV: header `replicate,N,p,p_breve,q,sigma,L,
//!   max_err,rel_fro,first_order_max,remainder_max,wall_ms`, one line per
//!   replicate.
//!
//! All writers go through [`write_atomic`]: content is written to a
//! temporary file in the destination directory and renamed into place, so a
//! failed run never leaves a truncated file. Floats are serialized with
//! Rust's shortest-round-trip formatting, which is deterministic; `NaN`
//! serializes as `NA`.

use crate::error::{CmmiError, Result};
use crate::sim_harness::ExperimentResult;
use crate::spectral_embed::Embedding;
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Missing-value sentinel used in every CSV format.
pub const NA_TOKEN: &str = "NA";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub blocks: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rows: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<Vec<usize>>,
    pub values: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

pub fn read_manifest_file(path: &Path) -> Result<ManifestFile> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CmmiError::Manifest(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CmmiError::Manifest(format!("cannot parse manifest {}: {e}", path.display())))
}

pub fn write_manifest_file(path: &Path, manifest: &ManifestFile) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CmmiError::Manifest(format!("cannot serialize manifest: {e}")))?;
    write_atomic(path, &text)
}

/// Read a headerless values CSV into (values, mask); `NA` cells get value
/// 0.0 and mask 0.
pub fn read_values_csv(path: &Path) -> Result<(Array2<f64>, Array2<u8>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| CmmiError::Manifest(format!("cannot open values file {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<u8> = Vec::new();
    let mut n_cols: Option<usize> = None;
    let mut n_rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            CmmiError::Manifest(format!("bad CSV in {}: {e}", path.display()))
        })?;
        match n_cols {
            None => n_cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(CmmiError::Manifest(format!(
                    "ragged CSV in {}: line {} has {} fields, expected {c}",
                    path.display(),
                    n_rows + 1,
                    record.len()
                )));
            }
            _ => {}
        }
        for field in record.iter() {
            if field == NA_TOKEN {
                values.push(0.0);
                mask.push(0);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    CmmiError::Manifest(format!(
                        "unparseable value {:?} in {} line {}",
                        field,
                        path.display(),
                        n_rows + 1
                    ))
                })?;
                values.push(v);
                mask.push(1);
            }
        }
        n_rows += 1;
    }
    let n_cols = n_cols.unwrap_or(0);
    if n_rows == 0 || n_cols == 0 {
        return Err(CmmiError::Manifest(format!(
            "empty values file {}",
            path.display()
        )));
    }
    let values = Array2::from_shape_vec((n_rows, n_cols), values)
        .expect("shape checked while reading");
    let mask = Array2::from_shape_vec((n_rows, n_cols), mask).expect("shape checked while reading");
    Ok((values, mask))
}

/// Write `content` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(content.as_bytes())?;
    tmp.persist(path)
        .map_err(|e| CmmiError::Io(e.error))?;
    Ok(())
}

/// Shortest-round-trip float formatting; NaN becomes the NA token.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        NA_TOKEN.to_string()
    } else {
        format!("{v}")
    }
}

/// Headerless dense matrix CSV; NaN cells become `NA`.
pub fn write_matrix_csv(path: &Path, a: &ArrayView2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in a.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_atomic(path, &out)
}

/// Recovered block CSV with entity-id headers.
pub fn write_recovered_csv(
    path: &Path,
    row_ids: &[usize],
    col_ids: &[usize],
    values: &ArrayView2<f64>,
) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = std::iter::once(String::new())
        .chain(col_ids.iter().map(|id| id.to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, &rid) in row_ids.iter().enumerate() {
        let mut line = vec![rid.to_string()];
        line.extend(values.row(i).iter().map(|&v| format_value(v)));
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_atomic(path, &out)
}

/// Long-format confidence-interval CSV: `row,col,lower,upper`.
pub fn write_ci_csv(
    path: &Path,
    row_ids: &[usize],
    col_ids: &[usize],
    lower: &ArrayView2<f64>,
    upper: &ArrayView2<f64>,
) -> Result<()> {
    let mut out = String::from("row,col,lower,upper\n");
    for (i, &rid) in row_ids.iter().enumerate() {
        for (j, &cid) in col_ids.iter().enumerate() {
            out.push_str(&format!(
                "{rid},{cid},{},{}\n",
                format_value(lower[[i, j]]),
                format_value(upper[[i, j]])
            ));
        }
    }
    write_atomic(path, &out)
}

/// Embedding export: `block_id,d_plus,d_minus,n` then `x` row-major, then an
/// optional `Y` section for asymmetric embeddings.
pub fn write_embedding_csv(path: &Path, e: &Embedding) -> Result<()> {
    let mut out = format!(
        "{},{},{},{}\n",
        e.block_id,
        e.signature.d_plus,
        e.signature.d_minus,
        e.x.nrows()
    );
    for row in e.x.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    if let Some(y) = &e.y {
        out.push_str("Y\n");
        for row in y.rows() {
            let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
    }
    write_atomic(path, &out)
}

/// Recoverability CSV: one line per (entity, component) membership.
pub fn write_recoverable_csv(path: &Path, memberships: &[(usize, usize)]) -> Result<()> {
    let mut rows = memberships.to_vec();
    rows.sort_unstable();
    let mut out = String::from("entity,component\n");
    for (entity, component) in rows {
        out.push_str(&format!("{entity},{component}\n"));
    }
    write_atomic(path, &out)
}

/// Experiment results CSV. `include_timings = false` (the default in the
/// CLI) writes `wall_ms` as 0 so that fixed-seed runs are byte-identical;
/// real timings are an explicit opt-in because they can never be
/// reproducible.
pub fn write_results_csv(path: &Path, result: &ExperimentResult, include_timings: bool) -> Result<()> {
    let mut out =
        String::from("replicate,N,p,p_breve,q,sigma,L,max_err,rel_fro,first_order_max,remainder_max,wall_ms\n");
    for row in &result.rows {
        let wall = if include_timings { row.wall_ms } else { 0 };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.replicate,
            result.n_total,
            format_value(result.p),
            format_value(result.p_breve),
            format_value(result.q),
            format_value(result.sigma),
            result.chain_length,
            format_value(row.max_err),
            format_value(row.rel_fro),
            format_value(row.first_order_max),
            format_value(row.remainder_max),
            wall
        ));
    }
    write_atomic(path, &out)
}
