//! Forget residual directions and the per-stage orthonormal forget basis.
//!
//! At each stage the retain prototypes are stacked as columns of `R`; each
//! forget prototype is reduced to its component outside the retain span,
//! `d_f = mu_f - R R^+ mu_f`. Residuals above the tolerance are normalized
//! and orthonormalized into the stage's forget basis; the rest are logged as
//! skipped.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};

use super::prototypes::PrototypeTable;
use crate::error::{DampError, Result};
use crate::linalg::{orthonormal_basis, pseudoinverse, DEFAULT_RCOND};

/// One stage's forget subspace.
#[derive(Debug, Clone)]
pub struct BasisEntry {
    /// 1-based stage index.
    pub stage: usize,
    /// `d x r` orthonormal columns; `r = 0` makes the stage a surgery no-op.
    pub q: Array2<f64>,
    /// `(class, residual norm)` for every forget class that contributed.
    pub residual_norms: Vec<(usize, f64)>,
    /// Forget classes whose residual fell below the tolerance.
    pub skipped: Vec<(usize, f64)>,
}

impl BasisEntry {
    pub fn rank(&self) -> usize {
        self.q.ncols()
    }
}

/// Forget bases for all stages, tied to the model they were derived from.
#[derive(Debug, Clone)]
pub struct ForgetBasis {
    pub stages: Vec<BasisEntry>,
    pub model_fingerprint: String,
}

/// Unit residual directions of the forget prototypes against the retain span
/// at one stage. Returns `(directions, skipped)` where `directions` triples
/// each kept class with its unit residual and pre-normalization residual
/// norm, and `skipped` logs sub-tolerance classes with their norms.
pub fn forget_directions(
    table: &PrototypeTable,
    retain_classes: &BTreeSet<usize>,
    forget_classes: &BTreeSet<usize>,
    stage: usize,
    tolerance: f64,
) -> Result<(Vec<(usize, Array1<f64>, f64)>, Vec<(usize, f64)>)> {
    let retain: Vec<&Array1<f64>> = retain_classes
        .iter()
        .filter_map(|c| table.get(stage, *c).map(|p| &p.mean))
        .collect();
    if retain.is_empty() {
        return Err(DampError::InvalidState(format!(
            "no retain prototypes available at stage {stage}"
        )));
    }
    if retain.len() != retain_classes.len() {
        return Err(DampError::InvalidState(format!(
            "stage {stage}: retain prototypes missing for some classes"
        )));
    }
    let d = retain[0].len();
    let mut r = Array2::<f64>::zeros((d, retain.len()));
    for (j, proto) in retain.iter().enumerate() {
        r.column_mut(j).assign(proto);
    }
    let r_pinv = pseudoinverse(&r, DEFAULT_RCOND)?;

    let mut directions = Vec::new();
    let mut skipped = Vec::new();
    for &f in forget_classes {
        let mu = &table
            .get(stage, f)
            .ok_or_else(|| {
                DampError::InvalidState(format!("stage {stage}: missing forget prototype {f}"))
            })?
            .mean;
        let coeffs = r_pinv.dot(mu);
        let residual = mu - &r.dot(&coeffs);
        let norm = residual.dot(&residual).sqrt();
        if norm >= tolerance {
            directions.push((f, residual.mapv(|v| v / norm), norm));
        } else {
            skipped.push((f, norm));
        }
    }
    Ok((directions, skipped))
}

/// Orthonormalize kept directions into the stage's forget basis. An empty
/// direction list yields rank zero.
pub fn build_basis(
    directions: &[(usize, Array1<f64>, f64)],
    skipped: Vec<(usize, f64)>,
    stage: usize,
    tolerance: f64,
    edit_dim: usize,
) -> Result<BasisEntry> {
    if directions.is_empty() {
        return Ok(BasisEntry {
            stage,
            q: Array2::zeros((edit_dim, 0)),
            residual_norms: Vec::new(),
            skipped,
        });
    }
    let d = directions[0].1.len();
    let mut cols = Array2::<f64>::zeros((d, directions.len()));
    for (j, (_, v, _)) in directions.iter().enumerate() {
        cols.column_mut(j).assign(v);
    }
    let q = orthonormal_basis(&cols, tolerance)?;
    Ok(BasisEntry {
        stage,
        q,
        residual_norms: directions.iter().map(|(c, _, n)| (*c, *n)).collect(),
        skipped,
    })
}
