//! One-shot projection surgery: prototypes, forget residual directions, the
//! orthonormal forget basis, probe-driven layer coefficients, and the weight
//! edit itself. Every statistic is computed once from the unedited model;
//! the edit uses no gradients.

pub mod alpha;
pub mod apply;
pub mod directions;
pub mod probe;
pub mod prototypes;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use alpha::{layer_alpha, LayerCoefficient};
pub use apply::{apply_surgery, StageEdit, SurgeryReport};
pub use directions::{build_basis, forget_directions, BasisEntry, ForgetBasis};
pub use probe::{probe_from_features, probe_separability, stage_features, ProbeConfig, ProbeOutcome};
pub use prototypes::{compute_prototypes, Prototype, PrototypeTable};

use crate::data::{fingerprint, split_retain_forget, ForgetSpec, LabeledDataset};
use crate::error::Result;
use crate::nn::{edit_space_dim, gradient_pass_count, StageModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub forget: ForgetSpec,
    /// Residual norms below this are skipped (their class is already inside
    /// the retain span).
    pub residual_tolerance: f64,
    /// Probe train fraction.
    pub probe_split: f64,
    /// Probe L2 strength.
    pub probe_l2: f64,
    /// Additive offset applied to every stage coefficient after the clip.
    pub alpha_boost: f64,
    pub seed: u64,
}

impl UnlearnConfig {
    pub fn new(forget: ForgetSpec, seed: u64) -> Self {
        UnlearnConfig {
            forget,
            residual_tolerance: 1e-8,
            probe_split: 0.8,
            probe_l2: 1.0,
            alpha_boost: 0.0,
            seed,
        }
    }
}

/// Everything the pipeline measured and did, per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub probe_accuracy: f64,
    pub alpha_probe: f64,
    pub alpha_depth: f64,
    pub alpha: f64,
    pub applied_alpha: f64,
    pub rank: usize,
    /// `(class, residual norm)` for directions that entered the basis.
    pub residual_norms: Vec<(usize, f64)>,
    /// `(class, residual norm)` for sub-tolerance classes.
    pub skipped_classes: Vec<(usize, f64)>,
    pub frobenius_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DampTrace {
    pub forget_classes: Vec<usize>,
    pub retain_classes: Vec<usize>,
    pub stages: Vec<StageTrace>,
    /// `(class, sample count)` used for prototype estimation.
    pub prototype_samples: Vec<(usize, usize)>,
    pub fingerprint_at_statistics: String,
    pub fingerprint_at_surgery: String,
    pub fingerprint_after_edit: String,
    pub statistics_seconds: f64,
    pub surgery_seconds: f64,
    /// Backward passes observed during the weight edit (must stay zero).
    pub gradient_passes_during_surgery: u64,
    pub residual_tolerance: f64,
    pub probe_split: f64,
    pub alpha_boost: f64,
    pub seed: u64,
}

/// Full pipeline: prototypes -> residual directions -> forget basis ->
/// probes -> layer coefficients -> projection edit, deep to shallow.
///
/// Returns the edited model and the complete trace. The input model is left
/// untouched.
pub fn unlearn(
    model: &StageModel,
    train_data: &LabeledDataset,
    cfg: &UnlearnConfig,
) -> Result<(StageModel, DampTrace)> {
    cfg.forget.validate(model.class_count)?;
    let (retain_data, forget_data) = split_retain_forget(train_data, &cfg.forget)?;
    let retain_classes = retain_data.present_classes();
    let forget_classes = cfg.forget.classes.clone();

    // Statistics phase: everything is measured on the unedited model.
    let stats_start = Instant::now();
    let fingerprint_at_statistics = fingerprint(model);
    let mut all_classes = retain_classes.clone();
    all_classes.extend(forget_classes.iter().copied());
    let table = compute_prototypes(model, train_data, &all_classes)?;

    let stage_count = model.stage_count();
    let mut basis_entries = Vec::with_capacity(stage_count);
    let mut coefficients = Vec::with_capacity(stage_count);
    for stage in 1..=stage_count {
        let probe_cfg = ProbeConfig {
            split_fraction: cfg.probe_split,
            l2: cfg.probe_l2,
            max_iter: 1000,
            seed: cfg.seed.wrapping_add(stage as u64),
        };
        let outcome = probe_separability(model, stage, &forget_data, &retain_data, &probe_cfg)?;
        coefficients.push(layer_alpha(
            outcome.accuracy,
            stage,
            stage_count,
            cfg.alpha_boost,
        )?);

        let (dirs, skipped) = forget_directions(
            &table,
            &retain_classes,
            &forget_classes,
            stage,
            cfg.residual_tolerance,
        )?;
        basis_entries.push(build_basis(
            &dirs,
            skipped,
            stage,
            cfg.residual_tolerance,
            edit_space_dim(model, stage)?,
        )?);
    }
    let basis = ForgetBasis {
        stages: basis_entries,
        model_fingerprint: table.model_fingerprint.clone(),
    };
    let statistics_seconds = stats_start.elapsed().as_secs_f64();

    // Surgery phase: one gradient-free pass, deep to shallow.
    let fingerprint_at_surgery = fingerprint(model);
    let mut edited = model.clone();
    let grad_before = gradient_pass_count();
    let report = apply_surgery(&mut edited, &basis, &coefficients)?;
    let gradient_passes_during_surgery = gradient_pass_count() - grad_before;

    let mut stages = Vec::with_capacity(stage_count);
    for stage in 1..=stage_count {
        let coeff = &coefficients[stage - 1];
        let entry = &basis.stages[stage - 1];
        let edit = report
            .edits
            .iter()
            .find(|e| e.stage == stage)
            .expect("every stage reports an edit");
        stages.push(StageTrace {
            stage,
            probe_accuracy: coeff.probe_accuracy,
            alpha_probe: coeff.alpha_probe,
            alpha_depth: coeff.alpha_depth,
            alpha: coeff.alpha,
            applied_alpha: coeff.applied_alpha,
            rank: entry.rank(),
            residual_norms: entry.residual_norms.clone(),
            skipped_classes: entry.skipped.clone(),
            frobenius_delta: edit.frobenius_delta,
        });
    }
    let prototype_samples = all_classes
        .iter()
        .map(|&c| {
            (
                c,
                train_data.labels.iter().filter(|&&l| l == c).count(),
            )
        })
        .collect();
    let trace = DampTrace {
        forget_classes: forget_classes.iter().copied().collect(),
        retain_classes: retain_classes.iter().copied().collect(),
        stages,
        prototype_samples,
        fingerprint_at_statistics,
        fingerprint_at_surgery,
        fingerprint_after_edit: fingerprint(&edited),
        statistics_seconds,
        surgery_seconds: report.wall_seconds,
        gradient_passes_during_surgery,
        residual_tolerance: cfg.residual_tolerance,
        probe_split: cfg.probe_split,
        alpha_boost: cfg.alpha_boost,
        seed: cfg.seed,
    };
    Ok((edited, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs_pair, BlobShape};
    use crate::metrics::accuracy;
    use crate::nn::train::{train, TrainConfig};
    use crate::nn::{build_model, Arch};

    fn pretrained_mlp() -> (StageModel, LabeledDataset, LabeledDataset) {
        let (train_data, test_data) =
            synth_blobs_pair(10, 60, 20, BlobShape::Flat(24), 10.0, 7).unwrap();
        let mut model = build_model(Arch::Mlp5, 24, 10, 42).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 42,
            ..TrainConfig::default()
        };
        train(&mut model, &train_data, &cfg).unwrap();
        (model, train_data, test_data)
    }

    #[test]
    fn single_class_unlearn_suppresses_forget_and_keeps_retain() {
        let (model, train_data, test_data) = pretrained_mlp();
        let spec = ForgetSpec::new([3]);
        let (retain_test, forget_test) = split_retain_forget(&test_data, &spec).unwrap();
        let base_retain = accuracy(&model, &retain_test).unwrap();
        let base_forget = accuracy(&model, &forget_test).unwrap();
        assert!(base_retain >= 98.0, "pretraining should fit blobs");
        assert!(base_forget >= 98.0);

        let cfg = UnlearnConfig::new(spec, 11);
        let (edited, trace) = unlearn(&model, &train_data, &cfg).unwrap();
        let after_forget = accuracy(&edited, &forget_test).unwrap();
        let after_retain = accuracy(&edited, &retain_test).unwrap();
        assert!(
            after_forget <= 1.0,
            "forget accuracy should collapse, got {after_forget}"
        );
        assert!(
            base_retain - after_retain <= 1.5,
            "retain drop too large: {base_retain} -> {after_retain}"
        );
        assert_eq!(trace.gradient_passes_during_surgery, 0);
        assert_eq!(trace.fingerprint_at_statistics, trace.fingerprint_at_surgery);
        assert_ne!(trace.fingerprint_at_surgery, trace.fingerprint_after_edit);
        assert_eq!(trace.stages.len(), 5);
        for st in &trace.stages {
            assert!(st.rank <= 1);
        }
    }

    #[test]
    fn multi_class_unlearn_bounds_rank_by_forget_count() {
        let (model, train_data, test_data) = pretrained_mlp();
        let spec = ForgetSpec::new([3, 5]);
        let (retain_test, forget_test) = split_retain_forget(&test_data, &spec).unwrap();
        let cfg = UnlearnConfig::new(spec.clone(), 13);
        let (edited, trace) = unlearn(&model, &train_data, &cfg).unwrap();
        for st in &trace.stages {
            assert!(st.rank <= 2, "rank bound violated at stage {}", st.stage);
        }
        for &f in &spec.classes {
            let class_test = forget_test.filter_class(f);
            let acc = accuracy(&edited, &class_test).unwrap();
            assert!(acc <= 1.0, "class {f} survived with {acc}%");
        }
        let retain_acc = accuracy(&edited, &retain_test).unwrap();
        assert!(retain_acc >= 97.0, "retain degraded to {retain_acc}");
    }

    #[test]
    fn unlearn_rejects_absent_forget_class() {
        let (model, train_data, _) = pretrained_mlp();
        // Drop class 9 from the data, then ask to forget it.
        let keep: std::collections::BTreeSet<usize> = (0..9).collect();
        let reduced = train_data.filter_classes(&keep);
        let cfg = UnlearnConfig::new(ForgetSpec::new([9]), 3);
        assert!(matches!(
            unlearn(&model, &reduced, &cfg),
            Err(crate::DampError::MissingClass(9))
        ));
    }

    #[test]
    fn biases_are_bit_identical_after_unlearn() {
        let (model, train_data, _) = pretrained_mlp();
        let cfg = UnlearnConfig::new(ForgetSpec::new([2]), 5);
        let (edited, _) = unlearn(&model, &train_data, &cfg).unwrap();
        for ((name_a, a), (name_b, b)) in model
            .bias_vectors()
            .iter()
            .zip(edited.bias_vectors().iter())
        {
            assert_eq!(name_a, name_b);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "bias {name_a} changed");
            }
        }
    }
}
