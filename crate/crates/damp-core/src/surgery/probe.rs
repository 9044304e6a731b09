//! Forget-versus-retain separability probe.
//!
//! A logistic classifier on standardized GAP features, solved by full-batch
//! Newton iterations with unit-strength L2 regularization on the weights
//! (never the intercept), inverse-frequency class weighting, and a seeded
//! stratified 80/20 train/test split. The held-out accuracy `a` is the
//! probe's output; held-out scores are kept so callers can compute AUCs.

use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{DampError, Result};
use crate::nn::{gap_forward, StageModel};

/// Minimum pool size for a meaningful held-out estimate.
pub const MIN_POOL: usize = 5;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// Fraction of each pool used for fitting (the rest is held out).
    pub split_fraction: f64,
    /// L2 strength on the weights.
    pub l2: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            split_fraction: 0.8,
            l2: 1.0,
            max_iter: 1000,
            seed: 0,
        }
    }
}

/// Outcome of one probe fit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeOutcome {
    /// Held-out accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Held-out decision scores, parallel to `held_out_labels`.
    pub held_out_scores: Vec<f64>,
    /// Held-out labels: 1 = forget pool, 0 = retain pool.
    pub held_out_labels: Vec<u8>,
    pub train_size: usize,
    pub test_size: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn stratified_split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let cut = ((n as f64) * fraction).floor() as usize;
    let cut = cut.clamp(1, n - 1);
    (idx[..cut].to_vec(), idx[cut..].to_vec())
}

/// Fit the probe on two feature pools. Rows of `forget` get label 1, rows of
/// `retain` label 0.
pub fn probe_from_features(
    forget: &Array2<f64>,
    retain: &Array2<f64>,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if forget.nrows() < MIN_POOL || retain.nrows() < MIN_POOL {
        return Err(DampError::InsufficientData(format!(
            "probe pools need >= {MIN_POOL} samples each, got {} forget / {} retain",
            forget.nrows(),
            retain.nrows()
        )));
    }
    if forget.ncols() != retain.ncols() {
        return Err(DampError::InvalidArgument(
            "probe pools have mismatched feature dimensions".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.split_fraction) || cfg.split_fraction == 0.0 {
        return Err(DampError::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {}",
            cfg.split_fraction
        )));
    }
    let d = forget.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Stratified by pool: split each side independently so the held-out set
    // always contains both labels.
    let (f_train, f_test) = stratified_split(forget.nrows(), cfg.split_fraction, &mut rng);
    let (r_train, r_test) = stratified_split(retain.nrows(), cfg.split_fraction, &mut rng);

    let n_train = f_train.len() + r_train.len();
    let mut x_train = Array2::<f64>::zeros((n_train, d));
    let mut y_train = Vec::with_capacity(n_train);
    for (row, &i) in f_train.iter().enumerate() {
        x_train.row_mut(row).assign(&forget.row(i));
        y_train.push(1.0);
    }
    for (row, &i) in r_train.iter().enumerate() {
        x_train.row_mut(f_train.len() + row).assign(&retain.row(i));
        y_train.push(0.0);
    }

    // Standardize with training-portion statistics; zero-variance features
    // pass through unscaled.
    let mean = x_train.mean_axis(Axis(0)).expect("nonempty");
    let mut std = Array1::<f64>::zeros(d);
    for j in 0..d {
        let col = x_train.column(j);
        let var = col.iter().map(|&v| (v - mean[j]).powi(2)).sum::<f64>() / n_train as f64;
        std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    for mut row in x_train.rows_mut() {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }

    // Inverse-frequency class weights over the training portion.
    let n_pos = f_train.len() as f64;
    let n_neg = r_train.len() as f64;
    let w_pos = n_train as f64 / (2.0 * n_pos);
    let w_neg = n_train as f64 / (2.0 * n_neg);
    let cw: Vec<f64> = y_train
        .iter()
        .map(|&y| if y > 0.5 { w_pos } else { w_neg })
        .collect();

    let (w, b) = newton_logistic(&x_train, &y_train, &cw, cfg.l2, cfg.max_iter);

    // Held-out evaluation.
    let mut scores = Vec::with_capacity(f_test.len() + r_test.len());
    let mut labels = Vec::with_capacity(scores.capacity());
    let mut correct = 0usize;
    let score_of = |features: ndarray::ArrayView1<f64>| -> f64 {
        let mut z = b;
        for j in 0..d {
            z += w[j] * (features[j] - mean[j]) / std[j];
        }
        z
    };
    for &i in &f_test {
        let z = score_of(forget.row(i));
        if z >= 0.0 {
            correct += 1;
        }
        scores.push(z);
        labels.push(1u8);
    }
    for &i in &r_test {
        let z = score_of(retain.row(i));
        if z < 0.0 {
            correct += 1;
        }
        scores.push(z);
        labels.push(0u8);
    }
    let test_size = scores.len();
    Ok(ProbeOutcome {
        accuracy: correct as f64 / test_size as f64,
        held_out_scores: scores,
        held_out_labels: labels,
        train_size: n_train,
        test_size,
    })
}

/// Newton-Raphson on the weighted, L2-regularized logistic objective.
fn newton_logistic(
    x: &Array2<f64>,
    y: &[f64],
    cw: &[f64],
    l2: f64,
    max_iter: usize,
) -> (Array1<f64>, f64) {
    let (n, d) = x.dim();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0_f64;
    for _ in 0..max_iter {
        let mut p = vec![0.0; n];
        for i in 0..n {
            let z = x.row(i).dot(&w) + b;
            p[i] = sigmoid(z);
        }
        // Gradient of sum_i cw_i * CE_i + (l2/2) ||w||^2.
        let mut grad = Array1::<f64>::zeros(d + 1);
        for i in 0..n {
            let g = cw[i] * (p[i] - y[i]);
            for j in 0..d {
                grad[j] += g * x[[i, j]];
            }
            grad[d] += g;
        }
        for j in 0..d {
            grad[j] += l2 * w[j];
        }
        // Hessian with the intercept appended as the last coordinate.
        let mut hess = nalgebra::DMatrix::<f64>::zeros(d + 1, d + 1);
        for i in 0..n {
            let s = cw[i] * p[i] * (1.0 - p[i]);
            if s == 0.0 {
                continue;
            }
            let row = x.row(i);
            for a in 0..d {
                let sa = s * row[a];
                for bb in a..d {
                    hess[(a, bb)] += sa * row[bb];
                }
                hess[(a, d)] += sa;
            }
            hess[(d, d)] += s;
        }
        for a in 0..d {
            for bb in 0..a {
                hess[(a, bb)] = hess[(bb, a)];
            }
            hess[(d, a)] = hess[(a, d)];
            hess[(a, a)] += l2;
        }
        // Keep the system solvable when the probe saturates.
        for a in 0..=d {
            hess[(a, a)] += 1e-10;
        }
        let rhs = nalgebra::DVector::from_iterator(d + 1, grad.iter().copied());
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => break,
        };
        let mut max_step = 0.0_f64;
        for j in 0..d {
            w[j] -= step[j];
            max_step = max_step.max(step[j].abs());
        }
        b -= step[d];
        max_step = max_step.max(step[d].abs());
        if max_step < 1e-10 {
            break;
        }
    }
    (w, b)
}

/// GAP features `h^l` of every sample, extracted batchwise in inference mode.
pub fn stage_features(model: &StageModel, data: &LabeledDataset, stage: usize) -> Result<Array2<f64>> {
    let l = model.stage_count();
    if stage < 1 || stage > l {
        return Err(DampError::InvalidArgument(format!(
            "stage index {stage} out of range 1..={l}"
        )));
    }
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut rows: Option<Array2<f64>> = None;
    let mut cursor = 0usize;
    for chunk in idx.chunks(256) {
        let (x, _) = data.gather(chunk);
        let trace = model.forward(&x, true)?;
        let feats = gap_forward(&trace.stage_outputs[stage - 1]);
        let out = rows.get_or_insert_with(|| Array2::zeros((n, feats.ncols())));
        for (r, row) in feats.rows().into_iter().enumerate() {
            out.row_mut(cursor + r).assign(&row);
        }
        cursor += chunk.len();
    }
    rows.ok_or_else(|| DampError::InsufficientData("no samples to featurize".into()))
}

/// Held-out accuracy of the forget-vs-retain probe at one stage.
pub fn probe_separability(
    model: &StageModel,
    stage: usize,
    forget_data: &LabeledDataset,
    retain_data: &LabeledDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if forget_data.len() < MIN_POOL || retain_data.len() < MIN_POOL {
        return Err(DampError::InsufficientData(format!(
            "probe pools need >= {MIN_POOL} samples each, got {} forget / {} retain",
            forget_data.len(),
            retain_data.len()
        )));
    }
    let xf = stage_features(model, forget_data, stage)?;
    let xr = stage_features(model, retain_data, stage)?;
    probe_from_features(&xf, &xr, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian_pool(n: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z + shift
        })
    }

    #[test]
    fn separated_pools_probe_near_one() {
        let xf = gaussian_pool(60, 8, 8.0, 1);
        let xr = gaussian_pool(60, 8, 0.0, 2);
        let out = probe_from_features(&xf, &xr, &ProbeConfig::default()).unwrap();
        assert!(out.accuracy >= 0.99, "got {}", out.accuracy);
    }

    #[test]
    fn identical_distributions_probe_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..10 {
            let xf = gaussian_pool(80, 6, 0.0, 100 + seed);
            let xr = gaussian_pool(80, 6, 0.0, 200 + seed);
            let cfg = ProbeConfig {
                seed,
                ..ProbeConfig::default()
            };
            accs.push(probe_from_features(&xf, &xr, &cfg).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(
            (mean - 0.5).abs() <= 0.07,
            "null probe accuracy should sit near chance, got {mean}"
        );
    }

    #[test]
    fn tiny_pools_are_rejected() {
        let xf = gaussian_pool(4, 3, 0.0, 1);
        let xr = gaussian_pool(10, 3, 0.0, 2);
        assert!(matches!(
            probe_from_features(&xf, &xr, &ProbeConfig::default()),
            Err(DampError::InsufficientData(_))
        ));
    }

    #[test]
    fn probe_is_deterministic_per_seed() {
        let xf = gaussian_pool(30, 4, 1.0, 5);
        let xr = gaussian_pool(30, 4, 0.0, 6);
        let cfg = ProbeConfig {
            seed: 9,
            ..ProbeConfig::default()
        };
        let a = probe_from_features(&xf, &xr, &cfg).unwrap();
        let b = probe_from_features(&xf, &xr, &cfg).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.held_out_scores, b.held_out_scores);
    }

    #[test]
    fn imbalanced_pools_still_learn_with_balanced_weights() {
        let xf = gaussian_pool(20, 5, 5.0, 7);
        let xr = gaussian_pool(200, 5, 0.0, 8);
        let out = probe_from_features(&xf, &xr, &ProbeConfig::default()).unwrap();
        assert!(out.accuracy >= 0.95, "got {}", out.accuracy);
    }
}
