//! FGSM and PGD input perturbations for robustness evaluation.
//!
//! Both attacks maximize the cross-entropy of the true labels inside an
//! `epsilon` L-infinity ball, then clamp to the valid input range `[0, 1]`.
//! Gradients are taken through the inference-mode forward pass.

use ndarray::Array4;

use super::layers::softmax_cross_entropy;
use super::{ForwardMode, StageModel};
use crate::error::{DampError, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Attack {
    Fgsm,
    Pgd,
}

impl Attack {
    pub fn tag(&self) -> &'static str {
        match self {
            Attack::Fgsm => "fgsm",
            Attack::Pgd => "pgd",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "fgsm" => Ok(Attack::Fgsm),
            "pgd" => Ok(Attack::Pgd),
            other => Err(DampError::InvalidArgument(format!(
                "unknown attack '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub attack: Attack,
    pub epsilon: f64,
    /// PGD iterations (ignored by FGSM).
    pub steps: usize,
    /// PGD step size; 0 selects the epsilon/4 default.
    pub step_size: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            attack: Attack::Fgsm,
            epsilon,
            steps: 1,
            step_size: 0.0,
        }
    }

    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            attack: Attack::Pgd,
            epsilon,
            steps: 10,
            step_size: 0.0,
        }
    }

    fn effective_step(&self) -> f64 {
        if self.step_size > 0.0 {
            self.step_size
        } else {
            self.epsilon / 4.0
        }
    }
}

fn input_gradient(model: &StageModel, x: &Array4<f64>, labels: &[usize]) -> Result<Array4<f64>> {
    let mut work = model.clone();
    let tape = work.forward_tape(x, ForwardMode::Eval)?;
    let (_, dlogits) = softmax_cross_entropy(&tape.logits, labels);
    let (_, dx) = work.backward(&tape, &dlogits, true);
    Ok(dx.expect("input gradient requested"))
}

/// Generate an adversarially perturbed copy of `batch`.
pub fn adversarial_batch(
    model: &StageModel,
    batch: &Array4<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<f64>> {
    if cfg.epsilon < 0.0 {
        return Err(DampError::InvalidArgument(
            "epsilon must be non-negative".into(),
        ));
    }
    if cfg.epsilon == 0.0 {
        return Ok(batch.clone());
    }
    match cfg.attack {
        Attack::Fgsm => {
            let grad = input_gradient(model, batch, labels)?;
            let mut out = batch.clone();
            ndarray::Zip::from(&mut out).and(&grad).for_each(|x, &g| {
                *x = (*x + cfg.epsilon * g.signum()).clamp(0.0, 1.0);
            });
            Ok(out)
        }
        Attack::Pgd => {
            if cfg.steps == 0 {
                return Err(DampError::InvalidArgument("pgd needs steps >= 1".into()));
            }
            let step = cfg.effective_step();
            let mut x = batch.clone();
            for _ in 0..cfg.steps {
                let grad = input_gradient(model, &x, labels)?;
                ndarray::Zip::from(&mut x)
                    .and(batch)
                    .and(&grad)
                    .for_each(|xi, &x0, &g| {
                        let moved = *xi + step * g.signum();
                        // Project to the epsilon ball around the clean input,
                        // then to the valid range.
                        *xi = moved
                            .clamp(x0 - cfg.epsilon, x0 + cfg.epsilon)
                            .clamp(0.0, 1.0);
                    });
            }
            Ok(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobShape};
    use crate::nn::train::{train, TrainConfig};
    use crate::nn::{build_model, Arch};

    fn argmax_accuracy(model: &StageModel, x: &Array4<f64>, y: &[usize]) -> f64 {
        let logits = model.forward(x, false).unwrap().logits;
        let mut ok = 0;
        for (i, &label) in y.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best == label {
                ok += 1;
            }
        }
        ok as f64 / y.len() as f64
    }

    #[test]
    fn zero_epsilon_returns_batch_unchanged() {
        let model = build_model(Arch::Mlp5, 8, 3, 1).unwrap();
        let data = synth_blobs(3, 5, BlobShape::Flat(8), 6.0, 2).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x, y) = data.gather(&idx);
        for cfg in [AttackConfig::fgsm(0.0), AttackConfig::pgd(0.0)] {
            let adv = adversarial_batch(&model, &x, &y, &cfg).unwrap();
            assert_eq!(adv, x);
        }
    }

    #[test]
    fn perturbation_respects_infinity_ball() {
        let model = build_model(Arch::Mlp5, 8, 3, 1).unwrap();
        let data = synth_blobs(3, 10, BlobShape::Flat(8), 6.0, 3).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x, y) = data.gather(&idx);
        for cfg in [AttackConfig::fgsm(0.07), AttackConfig::pgd(0.07)] {
            let adv = adversarial_batch(&model, &x, &y, &cfg).unwrap();
            let max_delta = ndarray::Zip::from(&adv)
                .and(&x)
                .fold(0.0_f64, |acc, &a, &b| acc.max((a - b).abs()));
            assert!(max_delta <= 0.07 + 1e-9);
            assert!(adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn fgsm_lowers_accuracy_on_trained_model() {
        let data = synth_blobs(4, 40, BlobShape::Flat(12), 6.0, 4).unwrap();
        let mut model = build_model(Arch::Mlp5, 12, 4, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 32,
            seed: 6,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x, y) = data.gather(&idx);
        let clean = argmax_accuracy(&model, &x, &y);
        let adv = adversarial_batch(&model, &x, &y, &AttackConfig::fgsm(0.25)).unwrap();
        let attacked = argmax_accuracy(&model, &adv, &y);
        assert!(
            attacked < clean,
            "attack should lower accuracy: clean {clean} vs attacked {attacked}"
        );
    }
}
