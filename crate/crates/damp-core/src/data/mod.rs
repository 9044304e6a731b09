//! Dataset ingestion and persistence: synthetic Gaussian blob generation,
//! MNIST-style IDX files, retain/forget splitting, checkpoints, and dataset
//! manifests.

pub mod blobs;
pub mod checkpoint;
pub mod idx;
pub mod manifest;

use std::collections::BTreeSet;

use ndarray::{Array4, Axis};

use crate::error::{DampError, Result};

pub use blobs::{synth_blobs, synth_blobs_pair, BlobShape};
pub use checkpoint::{fingerprint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use idx::load_idx;
pub use manifest::{read_manifest, write_manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

/// A labeled dataset with uniform input shape `(n, c, h, w)` and values in
/// `[0, 1]`. Flat (vector) data uses a trailing `1x1` spatial extent.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Array4<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: SplitTag,
}

impl LabeledDataset {
    pub fn new(
        inputs: Array4<f64>,
        labels: Vec<usize>,
        class_count: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if inputs.dim().0 != labels.len() {
            return Err(DampError::Consistency(format!(
                "{} inputs but {} labels",
                inputs.dim().0,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DampError::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if inputs.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DampError::InvalidArgument(
                "inputs must be normalized to [0, 1]".into(),
            ));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input shape without the batch axis.
    pub fn item_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.inputs.dim();
        (c, h, w)
    }

    /// Gather rows by index into a fresh batch.
    pub fn gather(&self, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (_, c, h, w) = self.inputs.dim();
        let mut x = Array4::<f64>::zeros((idx.len(), c, h, w));
        let mut y = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            x.index_axis_mut(Axis(0), row)
                .assign(&self.inputs.index_axis(Axis(0), i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    /// Subset of samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> LabeledDataset {
        let idx: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        let (inputs, labels) = self.gather(&idx);
        LabeledDataset {
            inputs,
            labels,
            class_count: self.class_count,
            split: self.split,
        }
    }

    /// Subset of samples of one class.
    pub fn filter_class(&self, class: usize) -> LabeledDataset {
        self.filter_classes(&BTreeSet::from([class]))
    }

    /// Distinct labels present.
    pub fn present_classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

/// The set of classes to forget.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ForgetSpec {
    pub classes: BTreeSet<usize>,
}

impl ForgetSpec {
    pub fn new<I: IntoIterator<Item = usize>>(classes: I) -> Self {
        ForgetSpec {
            classes: classes.into_iter().collect(),
        }
    }

    /// Nonempty and a strict subset of `[0, class_count)`.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(DampError::InvalidArgument(
                "forget spec must name at least one class".into(),
            ));
        }
        if let Some(&bad) = self.classes.iter().find(|&&c| c >= class_count) {
            return Err(DampError::InvalidArgument(format!(
                "forget class {bad} outside [0, {class_count})"
            )));
        }
        if self.classes.len() >= class_count {
            return Err(DampError::InvalidArgument(
                "forget spec must leave at least one retain class".into(),
            ));
        }
        Ok(())
    }

    pub fn retain_classes(&self, class_count: usize) -> BTreeSet<usize> {
        (0..class_count)
            .filter(|c| !self.classes.contains(c))
            .collect()
    }
}

/// Partition a dataset into retain and forget parts by label.
pub fn split_retain_forget(
    data: &LabeledDataset,
    spec: &ForgetSpec,
) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate(data.class_count)?;
    let present = data.present_classes();
    for &c in &spec.classes {
        if !present.contains(&c) {
            return Err(DampError::MissingClass(c));
        }
    }
    let forget = data.filter_classes(&spec.classes);
    let retain_set: BTreeSet<usize> = present
        .iter()
        .copied()
        .filter(|c| !spec.classes.contains(c))
        .collect();
    let retain = data.filter_classes(&retain_set);
    Ok((retain, forget))
}
