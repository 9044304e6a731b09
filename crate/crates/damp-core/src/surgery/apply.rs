//! The closed-form projection edit.
//!
//! For each stage `l = L..1` with a nonempty forget basis, the next
//! operator's flattened weight matrix is updated as
//! `W <- W (I - alpha_l Q Q^T)`, deep to shallow. Biases are never written.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::alpha::LayerCoefficient;
use super::directions::ForgetBasis;
use crate::error::{DampError, Result};
use crate::nn::{StageModel, StageOp};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEdit {
    pub stage: usize,
    pub rank: usize,
    pub alpha_applied: f64,
    /// Frobenius norm of `W' - W` on the edited tensor.
    pub frobenius_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurgeryReport {
    /// Deep-to-shallow order, matching the application order.
    pub edits: Vec<StageEdit>,
    pub wall_seconds: f64,
}

fn edited_weight_matrix(model: &StageModel, stage: usize) -> Result<Array2<f64>> {
    let l = model.stage_count();
    if stage == l {
        return Ok(model.head.weight.clone());
    }
    Ok(match &model.stages[stage].op {
        StageOp::Conv(conv) => conv.weight_matrix(),
        StageOp::Linear(lin) => lin.weight.clone(),
    })
}

fn store_edited_weight(model: &mut StageModel, stage: usize, w: Array2<f64>) {
    let l = model.stage_count();
    if stage == l {
        model.head.weight = w;
        return;
    }
    match &mut model.stages[stage].op {
        StageOp::Conv(conv) => conv.set_weight_matrix(&w),
        StageOp::Linear(lin) => lin.weight = w,
    }
}

/// Apply the projection update to every stage with a nonempty basis.
///
/// The basis and coefficients must have been computed from exactly this
/// model (fingerprint-checked), and the edit is gradient-free: no backward
/// pass runs inside this function.
pub fn apply_surgery(
    model: &mut StageModel,
    basis: &ForgetBasis,
    coefficients: &[LayerCoefficient],
) -> Result<SurgeryReport> {
    let start = Instant::now();
    let l = model.stage_count();
    if basis.stages.len() != l || coefficients.len() != l {
        return Err(DampError::InvalidState(format!(
            "expected {l} basis entries and coefficients, got {} and {}",
            basis.stages.len(),
            coefficients.len()
        )));
    }
    let fp = crate::data::fingerprint(model);
    if basis.model_fingerprint != fp {
        return Err(DampError::InvalidState(
            "forget basis was computed from a different model (one-shot statistics must come \
             from the unedited weights)"
                .into(),
        ));
    }
    let mut edits = Vec::with_capacity(l);
    for stage in (1..=l).rev() {
        let entry = &basis.stages[stage - 1];
        let coeff = &coefficients[stage - 1];
        if coeff.stage != stage || entry.stage != stage {
            return Err(DampError::InvalidState(
                "basis/coefficient entries out of stage order".into(),
            ));
        }
        if entry.rank() == 0 {
            edits.push(StageEdit {
                stage,
                rank: 0,
                alpha_applied: coeff.applied_alpha,
                frobenius_delta: 0.0,
            });
            continue;
        }
        let w = edited_weight_matrix(model, stage)?;
        if w.ncols() != entry.q.nrows() {
            return Err(DampError::InvalidState(format!(
                "stage {stage}: basis dimension {} does not match operator input {}",
                entry.q.nrows(),
                w.ncols()
            )));
        }
        // W' = W - alpha (W Q) Q^T keeps the edit O(m d r).
        let wq = w.dot(&entry.q);
        let delta = wq.dot(&entry.q.t()) * coeff.applied_alpha;
        let w_new = &w - &delta;
        let frobenius_delta = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        store_edited_weight(model, stage, w_new);
        edits.push(StageEdit {
            stage,
            rank: entry.rank(),
            alpha_applied: coeff.applied_alpha,
            frobenius_delta,
        });
    }
    Ok(SurgeryReport {
        edits,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fingerprint;
    use crate::linalg::orthonormal_basis;
    use crate::nn::{build_model, Arch};
    use crate::surgery::alpha::layer_alpha;
    use crate::surgery::directions::BasisEntry;
    use ndarray::Array1;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn empty_basis_for(model: &StageModel) -> ForgetBasis {
        let stages = (1..=model.stage_count())
            .map(|stage| BasisEntry {
                stage,
                q: Array2::zeros((crate::nn::edit_space_dim(model, stage).unwrap(), 0)),
                residual_norms: vec![],
                skipped: vec![],
            })
            .collect();
        ForgetBasis {
            stages,
            model_fingerprint: fingerprint(model),
        }
    }

    fn coeffs_all(model: &StageModel, a: f64) -> Vec<LayerCoefficient> {
        (1..=model.stage_count())
            .map(|s| layer_alpha(a, s, model.stage_count(), 0.0).unwrap())
            .collect()
    }

    #[test]
    fn zero_alpha_leaves_model_bit_identical() {
        let mut model = build_model(Arch::Mlp5, 8, 4, 3).unwrap();
        let before = fingerprint(&model);
        let mut basis = empty_basis_for(&model);
        // Give one stage a real direction but alpha 0.5 at chance accuracy.
        let d = crate::nn::edit_space_dim(&model, 5).unwrap();
        let mut q = Array2::zeros((d, 1));
        q[[0, 0]] = 1.0;
        basis.stages[4].q = q;
        let coeffs = coeffs_all(&model, 0.5); // alpha_probe = 0 everywhere
        apply_surgery(&mut model, &basis, &coeffs).unwrap();
        assert_eq!(fingerprint(&model), before);
    }

    #[test]
    fn unit_alpha_on_axis_direction_zeroes_head_column() {
        let mut model = build_model(Arch::Mlp5, 8, 4, 3).unwrap();
        let head_before = model.head.weight.clone();
        let mut basis = empty_basis_for(&model);
        let d = crate::nn::edit_space_dim(&model, 5).unwrap();
        let mut q = Array2::zeros((d, 1));
        q[[0, 0]] = 1.0;
        basis.stages[4].q = q;
        let coeffs = coeffs_all(&model, 1.0); // alpha_l = l/L, stage 5 -> 1.0
        apply_surgery(&mut model, &basis, &coeffs).unwrap();
        for r in 0..model.head.weight.nrows() {
            assert_eq!(model.head.weight[[r, 0]], 0.0);
            for c in 1..d {
                assert_eq!(model.head.weight[[r, c]], head_before[[r, c]]);
            }
        }
    }

    #[test]
    fn spectral_action_scales_span_and_preserves_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = build_model(Arch::Mlp5, 8, 4, 7).unwrap();
        let d = crate::nn::edit_space_dim(&model, 5).unwrap();
        let raw = Array2::from_shape_fn((d, 2), |_| rng.random_range(-1.0_f64..1.0));
        let q = orthonormal_basis(&raw, 1e-8).unwrap();
        let w_before = model.head.weight.clone();
        let mut basis = empty_basis_for(&model);
        basis.stages[4].q = q.clone();
        // alpha = 0.4 at the deepest stage: probe 0.7 -> alpha_probe 0.4, depth 1.
        let mut coeffs = coeffs_all(&model, 0.5);
        coeffs[4] = layer_alpha(0.7, 5, 5, 0.0).unwrap();
        let report = apply_surgery(&mut model, &basis, &coeffs).unwrap();
        let alpha = coeffs[4].alpha;
        assert!((alpha - 0.4).abs() < 1e-12);

        // Direction inside the span: W' q = (1 - alpha) W q.
        for j in 0..q.ncols() {
            let v = q.column(j).to_owned();
            let got = model.head.weight.dot(&v);
            let expect = w_before.dot(&v) * (1.0 - alpha);
            for (a, b) in got.iter().zip(expect.iter()) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
        // Direction orthogonal to the span: unchanged.
        let mut v = Array1::from_shape_fn(d, |_| rng.random_range(-1.0_f64..1.0));
        let proj = q.dot(&q.t().dot(&v));
        v -= &proj;
        let got = model.head.weight.dot(&v);
        let expect = w_before.dot(&v);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-8);
        }
        assert_eq!(report.edits.first().unwrap().stage, 5);
    }

    #[test]
    fn stale_fingerprint_is_rejected() {
        let mut model = build_model(Arch::Mlp5, 8, 4, 3).unwrap();
        let basis = empty_basis_for(&model);
        model.head.weight[[0, 0]] += 0.5;
        let coeffs = coeffs_all(&model, 1.0);
        assert!(matches!(
            apply_surgery(&mut model, &basis, &coeffs),
            Err(DampError::InvalidState(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut model = build_model(Arch::Mlp5, 8, 4, 3).unwrap();
        let mut basis = empty_basis_for(&model);
        basis.stages[4].q = Array2::zeros((3, 1)); // head edit dim is 24
        let coeffs = coeffs_all(&model, 1.0);
        assert!(matches!(
            apply_surgery(&mut model, &basis, &coeffs),
            Err(DampError::InvalidState(_))
        ));
    }

    #[test]
    fn surgery_never_runs_a_gradient_pass() {
        let mut model = build_model(Arch::Cnn5Mini, 1, 4, 3).unwrap();
        let mut basis = empty_basis_for(&model);
        let d = crate::nn::edit_space_dim(&model, 4).unwrap();
        let mut q = Array2::zeros((d, 1));
        q[[2, 0]] = 1.0;
        basis.stages[3].q = q;
        let coeffs = coeffs_all(&model, 1.0);
        let before = crate::nn::gradient_pass_count();
        apply_surgery(&mut model, &basis, &coeffs).unwrap();
        assert_eq!(crate::nn::gradient_pass_count(), before);
    }
}
