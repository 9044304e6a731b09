//! Per-class, per-stage edit-space prototypes.
//!
//! A prototype is the streaming mean of all edit-space rows a class produces:
//! every sample and, for convolutional edit spaces, every spatial location
//! contributes one row with equal weight. Prototypes are computed once from
//! the unedited model and stay fixed during surgery.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array1;

use crate::data::LabeledDataset;
use crate::error::{DampError, Result};
use crate::nn::{edit_rows_from_outputs, StageModel};

/// Mean edit-space vector and contributing row count for one (class, stage).
#[derive(Debug, Clone)]
pub struct Prototype {
    pub mean: Array1<f64>,
    pub rows: u64,
}

/// Prototypes for every requested class at every stage, plus the fingerprint
/// of the model they were measured on.
#[derive(Debug, Clone)]
pub struct PrototypeTable {
    /// `stages[l - 1][class]` holds the stage-`l` prototype.
    pub stages: Vec<BTreeMap<usize, Prototype>>,
    pub model_fingerprint: String,
}

impl PrototypeTable {
    pub fn get(&self, stage: usize, class: usize) -> Option<&Prototype> {
        self.stages.get(stage - 1).and_then(|m| m.get(&class))
    }
}

/// Accumulate prototypes for `classes` over the dataset, batchwise.
pub fn compute_prototypes(
    model: &StageModel,
    data: &LabeledDataset,
    classes: &BTreeSet<usize>,
) -> Result<PrototypeTable> {
    let stage_count = model.stage_count();
    let mut sums: Vec<BTreeMap<usize, (Array1<f64>, u64)>> = vec![BTreeMap::new(); stage_count];

    for &class in classes {
        let class_data = data.filter_class(class);
        if class_data.is_empty() {
            return Err(DampError::MissingClass(class));
        }
        let idx: Vec<usize> = (0..class_data.len()).collect();
        for chunk in idx.chunks(256) {
            let (x, _) = class_data.gather(chunk);
            let trace = model.forward(&x, true)?;
            for stage in 1..=stage_count {
                let (rows, _locs) = edit_rows_from_outputs(model, &trace.stage_outputs, stage)?;
                let entry = sums[stage - 1]
                    .entry(class)
                    .or_insert_with(|| (Array1::zeros(rows.ncols()), 0));
                for row in rows.rows() {
                    entry.0 += &row;
                    entry.1 += 1;
                }
            }
        }
    }

    let stages = sums
        .into_iter()
        .map(|m| {
            m.into_iter()
                .map(|(class, (sum, rows))| {
                    let mean = sum.mapv(|v| v / rows as f64);
                    (class, Prototype { mean, rows })
                })
                .collect()
        })
        .collect();
    Ok(PrototypeTable {
        stages,
        model_fingerprint: crate::data::fingerprint(model),
    })
}
