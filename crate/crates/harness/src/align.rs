//! Affine alignment between learned embeddings and ground-truth coordinates.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{io_err, HarnessError, Result};

/// Singular values below `RANK_TOL · σ_max` count as zero.
const RANK_TOL: f64 = 1e-10;

/// Coefficient of determination of the best affine map `A·e + b ≈ y`.
///
/// `embeddings` is `m × k`, `targets` is `m × p`, both row-major. The residual
/// and total sums of squares are pooled over all target columns, with the
/// total taken about each column's mean.
pub fn eval_embedding_alignment(embeddings: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    let m = embeddings.len();
    if m != targets.len() {
        return Err(HarnessError::Input(format!(
            "{m} embedding rows but {} target rows",
            targets.len()
        )));
    }
    if m < 3 {
        return Err(HarnessError::Input(format!("alignment needs at least 3 rows, got {m}")));
    }
    let k = embeddings[0].len();
    let p = targets[0].len();
    if k == 0 || p == 0 {
        return Err(HarnessError::Input("embeddings and targets need at least one column".into()));
    }
    if embeddings.iter().any(|r| r.len() != k) || targets.iter().any(|r| r.len() != p) {
        return Err(HarnessError::Input("ragged rows".into()));
    }
    let finite = |rows: &[Vec<f64>]| rows.iter().flatten().all(|v| v.is_finite());
    if !finite(embeddings) || !finite(targets) {
        return Err(HarnessError::Input("non-finite value in alignment input".into()));
    }

    let design = DMatrix::from_fn(m, k + 1, |i, j| if j < k { embeddings[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(m, p, |i, j| targets[i][j]);

    let mean = y.row_mean();
    let sst: f64 = y.row_iter().map(|r| (r - &mean).norm_squared()).sum();
    if sst == 0.0 {
        return Err(HarnessError::Degenerate("targets are constant".into()));
    }

    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax).count();
    if rank < k + 1 {
        return Err(HarnessError::Degenerate(format!(
            "design [embedding, 1] has rank {rank} < {}; an embedding column is constant or collinear",
            k + 1
        )));
    }
    let coef = svd
        .solve(&y, RANK_TOL * smax)
        .map_err(|e| HarnessError::Degenerate(e.to_string()))?;
    let sse = (design * coef - y).norm_squared();
    Ok((1.0 - sse / sst).min(1.0))
}

/// A CSV table split into embedding columns (`phi_*`, `psi_*`) and target
/// columns (everything else).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTable {
    pub embedding_columns: Vec<String>,
    pub target_columns: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl AlignmentTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let is_embedding = |h: &str| h.starts_with("phi_") || h.starts_with("psi_");
        let mut table = Self {
            embedding_columns: Vec::new(),
            target_columns: Vec::new(),
            embeddings: Vec::new(),
            targets: Vec::new(),
        };
        for h in &headers {
            if is_embedding(h) {
                table.embedding_columns.push(h.to_string());
            } else {
                table.target_columns.push(h.to_string());
            }
        }
        if table.embedding_columns.is_empty() || table.target_columns.is_empty() {
            return Err(HarnessError::Input(
                "need at least one phi_*/psi_* column and one target column".into(),
            ));
        }
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let (mut e, mut t) = (Vec::new(), Vec::new());
            for (h, field) in headers.iter().zip(record.iter()) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    HarnessError::Input(format!("row {}: `{field}` in column {h} is not a number", line + 2))
                })?;
                if is_embedding(h) {
                    e.push(v);
                } else {
                    t.push(v);
                }
            }
            table.embeddings.push(e);
            table.targets.push(t);
        }
        Ok(table)
    }

    pub fn r2(&self) -> Result<f64> {
        eval_embedding_alignment(&self.embeddings, &self.targets)
    }
}
