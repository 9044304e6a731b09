//! Seeded Gaussian blob datasets, the desk-scale stand-in for image corpora.
//!
//! Class means are drawn once per seed and rescaled so the minimum pairwise
//! distance equals `separation`; samples add unit-variance isotropic noise.
//! The finished dataset is affinely squashed into `[0, 1]` with a single
//! global scale, which preserves nearest-mean decisions.

use ndarray::{Array1, Array2};
#[cfg(test)]
use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabeledDataset, SplitTag};
use crate::error::{DampError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlobShape {
    /// Flat feature vectors, stored as `(n, dim, 1, 1)`.
    Flat(usize),
    /// Image-shaped samples `(channels, height, width)`.
    Image(usize, usize, usize),
}

impl BlobShape {
    pub fn dim(&self) -> usize {
        match *self {
            BlobShape::Flat(d) => d,
            BlobShape::Image(c, h, w) => c * h * w,
        }
    }

    fn as_chw(&self) -> (usize, usize, usize) {
        match *self {
            BlobShape::Flat(d) => (d, 1, 1),
            BlobShape::Image(c, h, w) => (c, h, w),
        }
    }
}

fn class_means(rng: &mut ChaCha8Rng, class_count: usize, dim: usize, separation: f64) -> Array2<f64> {
    let mut means = Array2::<f64>::zeros((class_count, dim));
    for mut row in means.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut min_dist = f64::INFINITY;
    for i in 0..class_count {
        for j in (i + 1)..class_count {
            let d2: f64 = (0..dim)
                .map(|k| (means[[i, k]] - means[[j, k]]).powi(2))
                .sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    means.mapv_inplace(|v| v * separation / min_dist);
    means
}

fn draw_samples(
    rng: &mut ChaCha8Rng,
    means: &Array2<f64>,
    per_class: usize,
) -> (Array2<f64>, Vec<usize>) {
    let (classes, dim) = means.dim();
    let n = classes * per_class;
    let mut raw = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for s in 0..per_class {
            let row = c * per_class + s;
            for k in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                raw[[row, k]] = means[[c, k]] + noise;
            }
            labels.push(c);
        }
    }
    (raw, labels)
}

fn squash_to_unit(parts: &mut [&mut Array2<f64>]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in parts.iter() {
        for &v in p.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || hi <= lo {
        return;
    }
    let scale = 1.0 / (hi - lo);
    for p in parts.iter_mut() {
        p.mapv_inplace(|v| (v - lo) * scale);
    }
}

fn into_dataset(
    raw: Array2<f64>,
    labels: Vec<usize>,
    shape: BlobShape,
    class_count: usize,
    split: SplitTag,
) -> Result<LabeledDataset> {
    let (c, h, w) = shape.as_chw();
    let n = labels.len();
    let inputs = raw
        .into_shape_with_order((n, c, h, w))
        .expect("shape product matches");
    LabeledDataset::new(inputs, labels, class_count, split)
}

/// Seeded Gaussian clusters with pairwise mean distance at least
/// `separation` (in noise standard deviations).
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    shape: BlobShape,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let (train, _) = synth_blobs_pair(class_count, per_class, 0, shape, separation, seed)?;
    Ok(train)
}

/// Train/test pair drawn around the same class means, normalized with a
/// shared affine map so the two splits live on the same scale.
pub fn synth_blobs_pair(
    class_count: usize,
    per_class_train: usize,
    per_class_test: usize,
    shape: BlobShape,
    separation: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if class_count < 2 {
        return Err(DampError::InvalidArgument(
            "blob generation needs at least 2 classes".into(),
        ));
    }
    if separation <= 0.0 {
        return Err(DampError::InvalidArgument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let dim = shape.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(&mut rng, class_count, dim, separation);
    let (mut train_raw, train_labels) = draw_samples(&mut rng, &means, per_class_train);
    let (mut test_raw, test_labels) = draw_samples(&mut rng, &means, per_class_test);
    squash_to_unit(&mut [&mut train_raw, &mut test_raw]);
    let train = into_dataset(train_raw, train_labels, shape, class_count, SplitTag::Train)?;
    let test = into_dataset(test_raw, test_labels, shape, class_count, SplitTag::Test)?;
    Ok((train, test))
}

/// Nearest-class-mean classification accuracy, an independent sanity check
/// on cluster separation.
pub fn nearest_mean_accuracy(data: &LabeledDataset) -> f64 {
    let n = data.len();
    if n == 0 {
        return 0.0;
    }
    let dim = data.inputs.len() / n;
    let flat = data
        .inputs
        .to_shape((n, dim))
        .expect("standard layout")
        .to_owned();
    let mut sums: Vec<Array1<f64>> = vec![Array1::zeros(dim); data.class_count];
    let mut counts = vec![0usize; data.class_count];
    for i in 0..n {
        sums[data.labels[i]] += &flat.row(i);
        counts[data.labels[i]] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(counts.iter()) {
        if c > 0 {
            s.mapv_inplace(|v| v / c as f64);
        }
    }
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (c, mean) in sums.iter().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let d: f64 = flat
                .row(i)
                .iter()
                .zip(mean.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_blobs_are_nearest_mean_classifiable() {
        let data = synth_blobs(10, 40, BlobShape::Flat(32), 10.0, 7).unwrap();
        assert!(nearest_mean_accuracy(&data) >= 0.999);
    }

    #[test]
    fn same_seed_is_deterministic() {
        let a = synth_blobs(4, 10, BlobShape::Flat(8), 6.0, 3).unwrap();
        let b = synth_blobs(4, 10, BlobShape::Flat(8), 6.0, 3).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inputs, b.inputs);
    }

    #[test]
    fn zero_per_class_gives_empty_dataset() {
        let data = synth_blobs(3, 0, BlobShape::Flat(4), 5.0, 1).unwrap();
        assert!(data.is_empty());
    }

    #[test]
    fn values_land_in_unit_interval() {
        let data = synth_blobs(5, 20, BlobShape::Image(1, 4, 4), 8.0, 11).unwrap();
        let lo = data.inputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.inputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= 0.0 && hi <= 1.0);
        assert!((hi - lo) > 0.9, "normalization should span the interval");
    }

    #[test]
    fn paired_splits_share_cluster_structure() {
        let (train, test) = synth_blobs_pair(6, 30, 10, BlobShape::Flat(16), 9.0, 5).unwrap();
        assert_eq!(train.len(), 180);
        assert_eq!(test.len(), 60);
        assert_eq!(test.split, SplitTag::Test);
        // Test points classify correctly against train means.
        let mut merged_inputs = Array4::zeros((240, 16, 1, 1));
        for i in 0..180 {
            merged_inputs
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&train.inputs.index_axis(ndarray::Axis(0), i));
        }
        for i in 0..60 {
            merged_inputs
                .index_axis_mut(ndarray::Axis(0), 180 + i)
                .assign(&test.inputs.index_axis(ndarray::Axis(0), i));
        }
        let mut labels = train.labels.clone();
        labels.extend_from_slice(&test.labels);
        let merged = LabeledDataset::new(merged_inputs, labels, 6, SplitTag::Train).unwrap();
        assert!(nearest_mean_accuracy(&merged) >= 0.999);
    }
}
