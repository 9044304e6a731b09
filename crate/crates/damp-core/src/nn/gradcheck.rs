//! Finite-difference validation of the reverse-mode gradients.

use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::layers::softmax_cross_entropy;
use super::{ForwardMode, StageModel};
use crate::error::{DampError, Result};

/// Central-difference step on 64-bit weights.
pub const FD_STEP: f64 = 1e-4;

/// Compare reverse-mode gradients against central finite differences on a
/// seeded subset of parameters (up to `per_tensor` entries of each tensor).
/// Returns the maximum relative error.
///
/// Running statistics are frozen so every loss evaluation sees the same
/// batch-normalization state.
pub fn gradient_check(
    model: &StageModel,
    batch: &Array4<f64>,
    labels: &[usize],
    per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    if model.param_count() > 5_000 {
        return Err(DampError::InvalidArgument(format!(
            "gradient_check expects a small model (<= 5k parameters), got {}",
            model.param_count()
        )));
    }
    let mut work = model.clone();
    let mode = ForwardMode::Train {
        update_running: false,
    };
    let tape = work.forward_tape(batch, mode)?;
    let (_, dlogits) = softmax_cross_entropy(&tape.logits, labels);
    let (grads, _) = work.backward(&tape, &dlogits, false);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0_f64;
    let tensor_count = grads.tensors.len();
    for ti in 0..tensor_count {
        let len = grads.tensors[ti].len();
        let mut picks: Vec<usize> = (0..len).collect();
        picks.shuffle(&mut rng);
        picks.truncate(per_tensor.min(len));
        for &i in &picks {
            let analytic = grads.tensors[ti].as_slice().expect("standard layout")[i];
            let orig = work.named_params_mut()[ti].1.as_slice_mut()[i];
            work.named_params_mut()[ti].1.as_slice_mut()[i] = orig + FD_STEP;
            let loss_plus = loss_only(&mut work, batch, labels)?;
            work.named_params_mut()[ti].1.as_slice_mut()[i] = orig - FD_STEP;
            let loss_minus = loss_only(&mut work, batch, labels)?;
            work.named_params_mut()[ti].1.as_slice_mut()[i] = orig;
            let fd = (loss_plus - loss_minus) / (2.0 * FD_STEP);
            // Relative error with a floor so near-zero gradient pairs do not
            // divide by noise.
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn loss_only(model: &mut StageModel, batch: &Array4<f64>, labels: &[usize]) -> Result<f64> {
    let tape = model.forward_tape(
        batch,
        ForwardMode::Train {
            update_running: false,
        },
    )?;
    let (loss, _) = softmax_cross_entropy(&tape.logits, labels);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_cnn5, build_mlp5_custom};
    use ndarray::Array4;

    fn random_batch(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dim, |_| rng.random_range(0.05..0.95))
    }

    #[test]
    fn mlp5_tiny_gradients_match_finite_differences() {
        let model = build_mlp5_custom(6, [8, 8, 8, 8, 8], 4, 21).unwrap();
        assert!(model.param_count() <= 5_000);
        let x = random_batch((6, 6, 1, 1), 22);
        let y = vec![0, 1, 2, 3, 0, 1];
        let err = gradient_check(&model, &x, &y, 6, 23).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn cnn5_tiny_gradients_match_finite_differences() {
        let model = build_cnn5(1, [2, 3, 4, 4, 3], 4, 31).unwrap();
        assert!(model.param_count() <= 5_000);
        let x = random_batch((4, 1, 8, 8), 32);
        let y = vec![0, 1, 2, 3];
        let err = gradient_check(&model, &x, &y, 4, 33).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn saturated_model_has_near_zero_gradients_both_ways() {
        // Scale the head so the correct class dominates: gradients vanish.
        let mut model = build_mlp5_custom(4, [6, 6, 6, 6, 6], 2, 41).unwrap();
        let x = random_batch((4, 4, 1, 1), 42);
        // Label with the model's own (confident) predictions after boosting.
        model.head.weight.mapv_inplace(|v| v * 50.0);
        let trace = model.forward(&x, false).unwrap();
        let y: Vec<usize> = trace
            .logits
            .rows()
            .into_iter()
            .map(|r| if r[0] > r[1] { 0 } else { 1 })
            .collect();
        let err = gradient_check(&model, &x, &y, 4, 43).unwrap();
        // Both gradient estimates are ~0; the floored relative error stays tiny.
        assert!(err <= 1e-4, "saturated gradients should agree, got {err}");
    }
}
