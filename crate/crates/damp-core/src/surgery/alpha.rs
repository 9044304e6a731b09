//! Depth-aware edit strength.
//!
//! The per-stage coefficient combines a probe term, zero at chance accuracy
//! and one at perfect separability, with a deterministic depth ramp `l / L`.
//! Neither term introduces a tunable hyperparameter. An optional additive
//! boost (disabled by default) can push the edit past the clip range.

use serde::{Deserialize, Serialize};

use crate::error::{DampError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCoefficient {
    /// 1-based stage index.
    pub stage: usize,
    /// Held-out probe accuracy `a` in `[0, 1]`.
    pub probe_accuracy: f64,
    /// `clip(2a - 1, 0, 1)`.
    pub alpha_probe: f64,
    /// `stage / L`.
    pub alpha_depth: f64,
    /// `alpha_probe * alpha_depth`.
    pub alpha: f64,
    /// `alpha + boost`, the value surgery actually applies.
    pub applied_alpha: f64,
}

/// Compute the stage coefficient from probe accuracy and depth.
pub fn layer_alpha(
    probe_accuracy: f64,
    stage: usize,
    stage_count: usize,
    boost: f64,
) -> Result<LayerCoefficient> {
    if !(0.0..=1.0).contains(&probe_accuracy) {
        return Err(DampError::InvalidArgument(format!(
            "probe accuracy must lie in [0, 1], got {probe_accuracy}"
        )));
    }
    if stage < 1 || stage > stage_count {
        return Err(DampError::InvalidArgument(format!(
            "stage {stage} out of range 1..={stage_count}"
        )));
    }
    let alpha_probe = (2.0 * probe_accuracy - 1.0).clamp(0.0, 1.0);
    let alpha_depth = stage as f64 / stage_count as f64;
    let alpha = alpha_probe * alpha_depth;
    Ok(LayerCoefficient {
        stage,
        probe_accuracy,
        alpha_probe,
        alpha_depth,
        alpha,
        applied_alpha: alpha + boost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chance_accuracy_gives_zero_strength() {
        for stage in 1..=5 {
            let c = layer_alpha(0.5, stage, 5, 0.0).unwrap();
            assert_eq!(c.alpha, 0.0);
        }
    }

    #[test]
    fn perfect_probe_at_deepest_stage_gives_one() {
        let c = layer_alpha(1.0, 5, 5, 0.0).unwrap();
        assert_eq!(c.alpha, 1.0);
    }

    #[test]
    fn stated_arithmetic_example() {
        let c = layer_alpha(0.75, 3, 5, 0.0).unwrap();
        assert_eq!(c.alpha_probe, 0.5);
        assert_eq!(c.alpha_depth, 0.6);
        assert_eq!(c.alpha, 0.3);
    }

    #[test]
    fn below_chance_clips_to_zero() {
        let c = layer_alpha(0.2, 4, 5, 0.0).unwrap();
        assert_eq!(c.alpha_probe, 0.0);
        assert_eq!(c.alpha, 0.0);
    }

    #[test]
    fn boost_is_additive_after_the_clip() {
        let c = layer_alpha(1.0, 2, 5, 3.0).unwrap();
        assert_eq!(c.alpha, 0.4);
        assert_eq!(c.applied_alpha, 3.4);
    }

    #[test]
    fn monotone_in_accuracy_and_depth() {
        let mut prev = -1.0;
        for a in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let c = layer_alpha(a, 3, 5, 0.0).unwrap();
            assert!(c.alpha >= prev);
            prev = c.alpha;
        }
        let mut prev = -1.0;
        for stage in 1..=5 {
            let c = layer_alpha(0.9, stage, 5, 0.0).unwrap();
            assert!(c.alpha >= prev);
            prev = c.alpha;
        }
    }
}
