//! Evaluation stack: accuracies, probe-AUC selectivity, representational
//! dissimilarity matrices, head-bias analysis, adversarial accuracy, and
//! continual-unlearning scoring.

pub mod report;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{DampError, Result};
use crate::nn::adversarial::{adversarial_batch, AttackConfig};
use crate::nn::{gap_forward, StageModel};
use crate::surgery::{probe_from_features, stage_features, ProbeConfig};

/// Anything that maps input batches to logits. Implemented by models and by
/// the weightless masked evaluator.
pub trait Classifier {
    fn logits_batch(&self, inputs: &Array4<f64>) -> Result<Array2<f64>>;
    fn class_count(&self) -> usize;
}

impl Classifier for StageModel {
    fn logits_batch(&self, inputs: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(inputs, false)?.logits)
    }

    fn class_count(&self) -> usize {
        self.class_count
    }
}

/// Argmax with ties broken toward the lowest class index, so accuracy is
/// deterministic even for constant logits.
pub fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

/// Top-1 accuracy as a percentage.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(DampError::InvalidArgument(
            "accuracy over an empty dataset is undefined".into(),
        ));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = data.gather(chunk);
        let logits = model.logits_batch(&x)?;
        for (i, &label) in y.iter().enumerate() {
            if argmax_row(logits.row(i)) == label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Area under the ROC curve by the rank-statistic formulation, ties handled
/// by midranks. Invariant under strictly monotone score transforms.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DampError::InvalidArgument(
            "scores and labels must have equal length".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DampError::InvalidArgument(
            "roc_auc needs both label values present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks over tied score groups.
    let mut ranks = vec![0.0_f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(ranks.iter())
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
    Ok(auc)
}

/// Probe statistics of one model at one stage, the ingredients of
/// selectivity. AUC and retain accuracy are in percentage points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeStats {
    pub stage: usize,
    pub forget_auc_pp: f64,
    pub retain_acc_pp: f64,
}

/// Measure the forget-probe AUC (held-out) and retain-class accuracy of a
/// model, with the shared probe recipe and seed.
pub fn probe_stats(
    model: &StageModel,
    stage: usize,
    forget_data: &LabeledDataset,
    retain_data: &LabeledDataset,
    retain_test: &LabeledDataset,
    probe_cfg: &ProbeConfig,
) -> Result<ProbeStats> {
    let xf = stage_features(model, forget_data, stage)?;
    let xr = stage_features(model, retain_data, stage)?;
    let outcome = probe_from_features(&xf, &xr, probe_cfg)?;
    let auc = roc_auc(&outcome.held_out_scores, &outcome.held_out_labels)?;
    let retain_acc = accuracy(model, retain_test)?;
    Ok(ProbeStats {
        stage,
        forget_auc_pp: auc * 100.0,
        retain_acc_pp: retain_acc,
    })
}

/// Like [`probe_stats`] but with the retain accuracy supplied by the caller
/// (weightless evaluators share features with their base model but score
/// accuracy through the mask).
pub fn probe_stats_with_accuracy(
    model: &StageModel,
    stage: usize,
    forget_data: &LabeledDataset,
    retain_data: &LabeledDataset,
    retain_acc_pp: f64,
    probe_cfg: &ProbeConfig,
) -> Result<ProbeStats> {
    let xf = stage_features(model, forget_data, stage)?;
    let xr = stage_features(model, retain_data, stage)?;
    let outcome = probe_from_features(&xf, &xr, probe_cfg)?;
    let auc = roc_auc(&outcome.held_out_scores, &outcome.held_out_labels)?;
    Ok(ProbeStats {
        stage,
        forget_auc_pp: auc * 100.0,
        retain_acc_pp,
    })
}

/// Selectivity in percentage points: forget-probe AUC removal minus retain
/// accuracy damage, both relative to the baseline model.
pub fn selectivity(baseline: &ProbeStats, method: &ProbeStats) -> Result<f64> {
    if baseline.stage != method.stage {
        return Err(DampError::InvalidArgument(format!(
            "selectivity stages differ: {} vs {}",
            baseline.stage, method.stage
        )));
    }
    Ok((baseline.forget_auc_pp - method.forget_auc_pp)
        - (baseline.retain_acc_pp - method.retain_acc_pp))
}

/// Representational dissimilarity matrix at one stage: entry `(i, j)` is
/// `1 - Pearson correlation` between the class-mean GAP features of classes
/// `i` and `j` from the given list.
pub fn rdm(
    model: &StageModel,
    classes: &[usize],
    stage: usize,
    samples_per_class: usize,
    data: &LabeledDataset,
) -> Result<Array2<f64>> {
    if classes.len() < 2 {
        return Err(DampError::InvalidArgument(
            "rdm needs at least two classes".into(),
        ));
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes.len());
    for &c in classes {
        let class_data = data.filter_class(c);
        if class_data.is_empty() {
            return Err(DampError::MissingClass(c));
        }
        let take = class_data.len().min(samples_per_class.max(1));
        let idx: Vec<usize> = (0..take).collect();
        let (x, _) = class_data.gather(&idx);
        let trace = model.forward(&x, true)?;
        let feats = gap_forward(&trace.stage_outputs[stage - 1]);
        let d = feats.ncols();
        let mean: Vec<f64> = (0..d)
            .map(|j| feats.column(j).sum() / take as f64)
            .collect();
        means.push(mean);
    }
    let k = classes.len();
    let mut out = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in (i + 1)..k {
            let r = pearson(&means[i], &means[j])?;
            out[[i, j]] = 1.0 - r;
            out[[j, i]] = 1.0 - r;
        }
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(DampError::DegenerateFeature(
            "constant feature vector has no correlation".into(),
        ));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Elementwise difference to a reference RDM plus its mean absolute value.
pub fn rdm_diff(rdm: &Array2<f64>, reference: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    if rdm.dim() != reference.dim() {
        return Err(DampError::InvalidArgument(
            "rdm shapes differ".into(),
        ));
    }
    let diff = rdm - reference;
    let mean_abs = diff.iter().map(|v| v.abs()).sum::<f64>() / diff.len() as f64;
    Ok((diff, mean_abs))
}

/// Per-class head-bias difference `b_method - b_baseline`.
pub fn bias_shift(method: &StageModel, baseline: &StageModel) -> Result<Vec<f64>> {
    if method.head.bias.len() != baseline.head.bias.len() {
        return Err(DampError::InvalidArgument(
            "head dimensions differ".into(),
        ));
    }
    Ok(method
        .head
        .bias
        .iter()
        .zip(baseline.head.bias.iter())
        .map(|(m, b)| m - b)
        .collect())
}

/// Accuracy (percent) on adversarially perturbed inputs.
pub fn adversarial_accuracy(
    model: &StageModel,
    data: &LabeledDataset,
    attack: &AttackConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(DampError::InvalidArgument(
            "accuracy over an empty dataset is undefined".into(),
        ));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = data.gather(chunk);
        let adv = adversarial_batch(model, &x, &y, attack)?;
        let logits = model.logits_batch(&adv)?;
        for (i, &label) in y.iter().enumerate() {
            if argmax_row(logits.row(i)) == label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Continual unlearning
// ---------------------------------------------------------------------------

/// Continual-unlearning score: retain accuracy discounted by how much of the
/// newly forgotten class survives.
pub fn cus(r_pct: f64, nf_pct: f64) -> f64 {
    r_pct * (1.0 - nf_pct / 100.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinualRound {
    pub forgotten_class: usize,
    /// Retain accuracy over never-forgotten classes.
    pub r_pct: f64,
    /// Accuracy on this round's class.
    pub nf_pct: f64,
    /// Mean accuracy over all classes forgotten so far (class-mean).
    pub af_pct: f64,
    pub cus: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ContinualLog {
    pub rounds: Vec<ContinualRound>,
}

impl ContinualLog {
    pub fn forgotten(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.forgotten_class).collect()
    }
}

/// Score one round: the model after forgetting `class`, evaluated on the
/// test split. Retain classes are all classes never forgotten.
pub fn continual_round<C: Classifier + ?Sized>(
    log: &mut ContinualLog,
    model: &C,
    test_data: &LabeledDataset,
    class: usize,
) -> Result<()> {
    if log.rounds.iter().any(|r| r.forgotten_class == class) {
        return Err(DampError::InvalidArgument(format!(
            "class {class} was already forgotten in an earlier round"
        )));
    }
    let mut forgotten = log.forgotten();
    forgotten.push(class);
    let retain_classes: std::collections::BTreeSet<usize> = test_data
        .present_classes()
        .into_iter()
        .filter(|c| !forgotten.contains(c))
        .collect();
    if retain_classes.is_empty() {
        return Err(DampError::InvalidArgument(
            "continual protocol must leave at least one retain class".into(),
        ));
    }
    let retain_test = test_data.filter_classes(&retain_classes);
    let r_pct = accuracy(model, &retain_test)?;
    let nf_pct = accuracy(model, &test_data.filter_class(class))?;
    let mut af_sum = 0.0;
    for &f in &forgotten {
        af_sum += accuracy(model, &test_data.filter_class(f))?;
    }
    let af_pct = af_sum / forgotten.len() as f64;
    log.rounds.push(ContinualRound {
        forgotten_class: class,
        r_pct,
        nf_pct,
        af_pct,
        cus: cus(r_pct, nf_pct),
    });
    Ok(())
}

/// One method's evaluation payload. Optional blocks stay `None` when the
/// corresponding analysis was not requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub retain_acc_pct: f64,
    pub forget_acc_pct: f64,
    /// Selectivity per stage, percentage points (1-based stages).
    pub selectivity_pp: Option<Vec<f64>>,
    /// Head-bias delta per class against the baseline model.
    pub bias_shift: Option<Vec<f64>>,
    /// Mean absolute RDM difference to the retrained reference, deepest stage.
    pub rdm_diff_to_retrained: Option<f64>,
    /// `(retain, forget)` accuracy under FGSM.
    pub fgsm: Option<(f64, f64)>,
    /// `(retain, forget)` accuracy under PGD.
    pub pgd: Option<(f64, f64)>,
    pub wall_seconds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledDataset, SplitTag};
    use ndarray::{array, Array4};

    struct FixedLogits(Array2<f64>);

    impl Classifier for FixedLogits {
        fn logits_batch(&self, inputs: &Array4<f64>) -> Result<Array2<f64>> {
            let n = inputs.dim().0;
            let mut out = Array2::zeros((n, self.0.ncols()));
            for i in 0..n {
                out.row_mut(i).assign(&self.0.row(i % self.0.nrows()));
            }
            Ok(out)
        }

        fn class_count(&self) -> usize {
            self.0.ncols()
        }
    }

    fn dataset(labels: Vec<usize>, classes: usize) -> LabeledDataset {
        let n = labels.len();
        LabeledDataset::new(
            Array4::from_elem((n, 1, 1, 1), 0.5),
            labels,
            classes,
            SplitTag::Test,
        )
        .unwrap()
    }

    #[test]
    fn constant_logits_predict_class_zero_share() {
        let model = FixedLogits(Array2::zeros((1, 10)));
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let data = dataset(labels, 10);
        let acc = accuracy(&model, &data).unwrap();
        assert_eq!(acc, 10.0); // ties break to class 0, which is 10% of labels
    }

    #[test]
    fn hand_built_three_of_four_is_75_percent() {
        let logits = array![
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 0.0] // wrong: label 1
        ];
        let model = FixedLogits(logits);
        let data = dataset(vec![0, 0, 1, 1], 2);
        assert_eq!(accuracy(&model, &data).unwrap(), 75.0);
    }

    #[test]
    fn empty_dataset_accuracy_is_rejected() {
        let model = FixedLogits(Array2::zeros((1, 2)));
        let data = dataset(vec![], 2);
        assert!(accuracy(&model, &data).is_err());
    }

    #[test]
    fn auc_perfectly_separated_is_one() {
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_identical_scores_is_half() {
        let auc = roc_auc(&[0.4, 0.4, 0.4, 0.4], &[0, 1, 0, 1]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn auc_pair_enumeration_example() {
        // Positive-negative pairs won: (0.35, 0.8) vs (0.1, 0.4) -> 3 of 4.
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = [0.1, 0.7, 0.3, 0.9, 0.5];
        let labels = [0u8, 1, 0, 1, 1];
        let a = roc_auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp()).collect();
        let b = roc_auc(&transformed, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auc_single_class_is_rejected() {
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn selectivity_of_baseline_against_itself_is_zero() {
        let s = ProbeStats {
            stage: 5,
            forget_auc_pp: 93.0,
            retain_acc_pp: 88.0,
        };
        assert_eq!(selectivity(&s, &s.clone()).unwrap(), 0.0);
    }

    #[test]
    fn selectivity_arithmetic() {
        let base = ProbeStats {
            stage: 5,
            forget_auc_pp: 95.0,
            retain_acc_pp: 90.0,
        };
        let method = ProbeStats {
            stage: 5,
            forget_auc_pp: 75.0,
            retain_acc_pp: 85.0,
        };
        assert_eq!(selectivity(&base, &method).unwrap(), 15.0);
    }

    #[test]
    fn selectivity_stage_mismatch_is_rejected() {
        let a = ProbeStats {
            stage: 4,
            forget_auc_pp: 0.0,
            retain_acc_pp: 0.0,
        };
        let b = ProbeStats {
            stage: 5,
            forget_auc_pp: 0.0,
            retain_acc_pp: 0.0,
        };
        assert!(selectivity(&a, &b).is_err());
    }

    #[test]
    fn pearson_anticorrelated_one_hots_give_two() {
        // 1 - (-1) = 2 for perfectly anti-correlated mean vectors.
        let r = pearson(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((r - (-1.0)).abs() <= 1e-12);
    }

    #[test]
    fn pearson_constant_vector_is_degenerate() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 0.0]),
            Err(DampError::DegenerateFeature(_))
        ));
    }

    #[test]
    fn cus_formula_edge_cases() {
        assert_eq!(cus(87.6, 0.0), 87.6);
        assert_eq!(cus(0.0, 31.0), 0.0);
        assert!((cus(87.6, 52.3) - 41.7852).abs() <= 1e-9);
        // Monotone decreasing in NF.
        assert!(cus(80.0, 10.0) > cus(80.0, 20.0));
    }

    #[test]
    fn continual_round_perfect_unlearner() {
        let logits = array![[0.0, 1.0, 0.0]]; // always predicts class 1
        let model = FixedLogits(logits);
        let data = dataset(vec![0, 0, 1, 1, 2, 2], 3);
        let mut log = ContinualLog::default();
        continual_round(&mut log, &model, &data, 0).unwrap();
        let round = &log.rounds[0];
        assert_eq!(round.nf_pct, 0.0);
        assert_eq!(round.af_pct, 0.0);
        assert_eq!(round.r_pct, 50.0); // class 1 right, class 2 wrong
        assert_eq!(round.cus, round.r_pct);
    }

    #[test]
    fn continual_round_rejects_duplicates() {
        let model = FixedLogits(array![[0.0, 1.0, 0.0]]);
        let data = dataset(vec![0, 1, 1, 2], 3);
        let mut log = ContinualLog::default();
        continual_round(&mut log, &model, &data, 0).unwrap();
        assert!(continual_round(&mut log, &model, &data, 0).is_err());
    }
}
