//! Comparison unlearning methods sharing one pretrained starting point:
//! retraining from scratch on retain data, inference-time logit masking,
//! gradient-ascent unlearning, distillation unlearning, head-reinit
//! fine-tuning, random relabeling, and the head-bias sweep diagnostic.

use std::collections::BTreeSet;

use ndarray::{Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{ForgetSpec, LabeledDataset};
use crate::error::{DampError, Result};
use crate::metrics::{accuracy, Classifier};
use crate::nn::train::{epoch_order, step_two_batches, train, train_step, Optimizer, TrainConfig};
use crate::nn::{build_model, softmax_rows, Arch, StageModel, StageOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MethodTag {
    Damp,
    Retrain,
    Lm,
    Gau,
    Kdu,
    Ddft,
    RandRelabel,
}

impl MethodTag {
    pub fn tag(&self) -> &'static str {
        match self {
            MethodTag::Damp => "damp",
            MethodTag::Retrain => "retrain",
            MethodTag::Lm => "lm",
            MethodTag::Gau => "gau",
            MethodTag::Kdu => "kdu",
            MethodTag::Ddft => "ddft",
            MethodTag::RandRelabel => "randrelabel",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "damp" => MethodTag::Damp,
            "retrain" => MethodTag::Retrain,
            "lm" => MethodTag::Lm,
            "gau" => MethodTag::Gau,
            "kdu" => MethodTag::Kdu,
            "ddft" => MethodTag::Ddft,
            "randrelabel" => MethodTag::RandRelabel,
            other => {
                return Err(DampError::Config(format!("unknown method tag '{other}'")));
            }
        })
    }

    /// Methods that produce no new weights (evaluator wrappers only).
    pub fn is_weightless(&self) -> bool {
        matches!(self, MethodTag::Lm)
    }
}

/// Hyperparameters for the fine-tuning baselines. Defaults follow the
/// shared recipe: 10 epochs of Adam at 1e-4 (5e-4 for the head-reinit
/// fine-tune), ascent weight 0.1, distillation weight 0.5 at temperature 4.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_gau: f64,
    pub lambda_kdu: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 10,
            learning_rate: 1e-4,
            batch_size: 128,
            lambda_gau: 0.1,
            lambda_kdu: 0.5,
            temperature: 4.0,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    fn adam(&self, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs: self.epochs.max(1),
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::adam(lr, self.epochs.max(1), self.seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Retrain
// ---------------------------------------------------------------------------

/// Retrain from scratch on retain-only data with a retain-classes-only head,
/// then embed the head back into the full label space with forget logits
/// structurally at negative infinity.
pub fn retrain(
    arch: Arch,
    input_channels: usize,
    class_count: usize,
    retain_data: &LabeledDataset,
    cfg: &TrainConfig,
    forget: &ForgetSpec,
) -> Result<StageModel> {
    if let Some(&bad) = retain_data
        .labels
        .iter()
        .find(|l| forget.classes.contains(l))
    {
        return Err(DampError::Contamination(format!(
            "retain data contains forget-class sample (class {bad})"
        )));
    }
    let retain_classes: Vec<usize> = retain_data.present_classes().into_iter().collect();
    if retain_classes.is_empty() {
        return Err(DampError::InvalidArgument(
            "retrain needs at least one retain class".into(),
        ));
    }
    // Compact label space; a single retain class still gets a 2-unit head so
    // cross-entropy stays defined, and only row 0 is embedded back.
    let compact = retain_classes.len().max(2);
    let remap: std::collections::BTreeMap<usize, usize> = retain_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let labels: Vec<usize> = retain_data.labels.iter().map(|l| remap[l]).collect();
    let compact_data = LabeledDataset::new(
        retain_data.inputs.clone(),
        labels,
        compact,
        retain_data.split,
    )?;
    let mut compact_model = build_model(arch, input_channels, compact, cfg.seed)?;
    train(&mut compact_model, &compact_data, cfg)?;

    // Embed into the full label space.
    let mut full = compact_model.clone();
    let feat = compact_model.head.in_features();
    let mut weight = Array2::<f64>::zeros((class_count, feat));
    let mut bias = ndarray::Array1::<f64>::from_elem(class_count, f64::NEG_INFINITY);
    for (&orig, &idx) in &remap {
        weight.row_mut(orig).assign(&compact_model.head.weight.row(idx));
        bias[orig] = compact_model.head.bias[idx];
    }
    full.head.weight = weight;
    full.head.bias = bias;
    full.class_count = class_count;
    Ok(full)
}

// ---------------------------------------------------------------------------
// Logit masking
// ---------------------------------------------------------------------------

/// Weightless evaluator that pins forget-class logits to negative infinity.
pub struct MaskedClassifier<'a> {
    pub model: &'a StageModel,
    pub forget: BTreeSet<usize>,
}

/// Inference-time logit masking; the underlying weights are untouched.
pub fn logit_mask<'a>(model: &'a StageModel, forget: &ForgetSpec) -> MaskedClassifier<'a> {
    MaskedClassifier {
        model,
        forget: forget.classes.clone(),
    }
}

impl Classifier for MaskedClassifier<'_> {
    fn logits_batch(&self, inputs: &Array4<f64>) -> Result<Array2<f64>> {
        let mut logits = self.model.logits_batch(inputs)?;
        for mut row in logits.rows_mut() {
            for &f in &self.forget {
                row[f] = f64::NEG_INFINITY;
            }
        }
        Ok(logits)
    }

    fn class_count(&self) -> usize {
        self.model.class_count
    }
}

// ---------------------------------------------------------------------------
// Gradient-ascent unlearning
// ---------------------------------------------------------------------------

/// Fine-tune with descent on retain cross-entropy and ascent (weight
/// `lambda_gau`) on forget cross-entropy.
pub fn gau(
    model: &StageModel,
    retain_data: &LabeledDataset,
    forget_data: &LabeledDataset,
    cfg: &BaselineConfig,
) -> Result<StageModel> {
    if cfg.lambda_gau < 0.0 {
        return Err(DampError::InvalidArgument(
            "gau lambda must be non-negative".into(),
        ));
    }
    if retain_data.is_empty() || forget_data.is_empty() {
        return Err(DampError::InvalidArgument(
            "gau needs nonempty retain and forget pools".into(),
        ));
    }
    let mut student = model.clone();
    let tc = cfg.adam(cfg.learning_rate);
    let mut opt = Optimizer::new(&tc);
    for epoch in 0..cfg.epochs {
        let r_order = epoch_order(retain_data.len(), cfg.seed, epoch);
        let f_order = epoch_order(forget_data.len(), cfg.seed ^ 0x5f5f, epoch);
        let mut f_cursor = 0usize;
        for r_chunk in r_order.chunks(cfg.batch_size) {
            let f_chunk: Vec<usize> = (0..r_chunk.len().min(forget_data.len()))
                .map(|i| f_order[(f_cursor + i) % f_order.len()])
                .collect();
            f_cursor += f_chunk.len();
            let (xr, yr) = retain_data.gather(r_chunk);
            let (xf, yf) = forget_data.gather(&f_chunk);
            step_two_batches(
                &mut student,
                &mut opt,
                &xr,
                &yr,
                1.0,
                &xf,
                &yf,
                -cfg.lambda_gau,
                cfg.learning_rate,
            )?;
        }
    }
    Ok(student)
}

// ---------------------------------------------------------------------------
// Knowledge-distillation unlearning
// ---------------------------------------------------------------------------

/// Gradient of `KL(student || target)` with both distributions softened at
/// temperature `t`, mean-reduced over the batch.
fn kl_to_target_dlogits(
    student_logits: &Array2<f64>,
    target_probs: &Array2<f64>,
    t: f64,
    weight: f64,
) -> Array2<f64> {
    let n = student_logits.nrows();
    let scaled = student_logits.mapv(|v| v / t);
    let s = softmax_rows(&scaled);
    let mut out = Array2::<f64>::zeros(student_logits.dim());
    for i in 0..n {
        // d_k = ln(s_k / t_k); dL/dz_k = (s_k / T) (d_k - sum_j s_j d_j)
        let mut inner = 0.0;
        let mut d = vec![0.0; s.ncols()];
        for k in 0..s.ncols() {
            let sk = s[[i, k]].max(1e-300);
            let tk = target_probs[[i, k]].max(1e-300);
            d[k] = sk.ln() - tk.ln();
            inner += s[[i, k]] * d[k];
        }
        for k in 0..s.ncols() {
            out[[i, k]] = weight * s[[i, k]] / t * (d[k] - inner) / n as f64;
        }
    }
    out
}

/// `KL(student || target)` value itself (loss reporting and tests).
fn kl_to_target_loss(student_logits: &Array2<f64>, target_probs: &Array2<f64>, t: f64) -> f64 {
    let scaled = student_logits.mapv(|v| v / t);
    let s = softmax_rows(&scaled);
    let n = s.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..s.ncols() {
            let sk = s[[i, k]];
            if sk > 0.0 {
                total += sk * (sk.ln() - target_probs[[i, k]].max(1e-300).ln());
            }
        }
    }
    total / n as f64
}

/// Distillation unlearning: match the frozen teacher on retain batches,
/// push forget batches toward the uniform distribution (weight
/// `lambda_kdu`, temperature `temperature`).
pub fn kdu(
    model: &StageModel,
    retain_data: &LabeledDataset,
    forget_data: &LabeledDataset,
    cfg: &BaselineConfig,
) -> Result<StageModel> {
    if retain_data.is_empty() || forget_data.is_empty() {
        return Err(DampError::InvalidArgument(
            "kdu needs nonempty retain and forget pools".into(),
        ));
    }
    if cfg.temperature <= 0.0 || cfg.lambda_kdu < 0.0 {
        return Err(DampError::InvalidArgument(
            "kdu needs temperature > 0 and lambda >= 0".into(),
        ));
    }
    let teacher = model.clone();
    let mut student = model.clone();
    let tc = cfg.adam(cfg.learning_rate);
    let mut opt = Optimizer::new(&tc);
    let k = model.class_count;
    for epoch in 0..cfg.epochs {
        let r_order = epoch_order(retain_data.len(), cfg.seed, epoch);
        let f_order = epoch_order(forget_data.len(), cfg.seed ^ 0xa1a1, epoch);
        let mut f_cursor = 0usize;
        for r_chunk in r_order.chunks(cfg.batch_size) {
            let f_chunk: Vec<usize> = (0..r_chunk.len().min(forget_data.len()))
                .map(|i| f_order[(f_cursor + i) % f_order.len()])
                .collect();
            f_cursor += f_chunk.len();
            let (xr, _) = retain_data.gather(r_chunk);
            let (xf, _) = forget_data.gather(&f_chunk);

            // Teacher targets are inference-mode and frozen.
            let t_logits = teacher.forward(&xr, false)?.logits;
            let t_probs = softmax_rows(&t_logits.mapv(|v| v / cfg.temperature));
            let uniform = Array2::from_elem((xf.dim().0, k), 1.0 / k as f64);

            let tape_r = student.forward_tape(
                &xr,
                crate::nn::ForwardMode::Train {
                    update_running: true,
                },
            )?;
            let dl_r = kl_to_target_dlogits(&tape_r.logits, &t_probs, cfg.temperature, 1.0);
            let (grads_r, _) = student.backward(&tape_r, &dl_r, false);
            let tape_f = student.forward_tape(
                &xf,
                crate::nn::ForwardMode::Train {
                    update_running: true,
                },
            )?;
            let dl_f =
                kl_to_target_dlogits(&tape_f.logits, &uniform, cfg.temperature, cfg.lambda_kdu);
            let (grads_f, _) = student.backward(&tape_f, &dl_f, false);
            let combined = crate::nn::Grads {
                tensors: grads_r
                    .tensors
                    .into_iter()
                    .zip(grads_f.tensors)
                    .map(|(a, b)| a + b)
                    .collect(),
            };
            opt.step(&mut student, &combined, cfg.learning_rate);
        }
    }
    Ok(student)
}

// ---------------------------------------------------------------------------
// Head-reinit fine-tuning
// ---------------------------------------------------------------------------

/// Reinitialize the classifier head, then fine-tune the whole network on
/// retain-only data.
pub fn ddft(
    model: &StageModel,
    retain_data: &LabeledDataset,
    cfg: &BaselineConfig,
) -> Result<StageModel> {
    let mut student = model.clone();
    crate::nn::reinit_head(&mut student, cfg.seed ^ 0xddf7);
    if cfg.epochs == 0 {
        return Ok(student);
    }
    let tc = cfg.adam(cfg.learning_rate);
    train(&mut student, retain_data, &tc)?;
    Ok(student)
}

// ---------------------------------------------------------------------------
// Random relabeling
// ---------------------------------------------------------------------------

/// Reassign forget-class labels to seeded uniform retain labels. Used per
/// epoch so each pass sees fresh labels.
pub fn relabel(
    labels: &[usize],
    forget: &BTreeSet<usize>,
    retain_classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| {
            if forget.contains(&l) {
                retain_classes[rng.random_range(0..retain_classes.len())]
            } else {
                l
            }
        })
        .collect()
}

/// Fine-tune on the full dataset with forget-class labels independently
/// resampled to retain classes every epoch.
pub fn rand_relabel(
    model: &StageModel,
    full_data: &LabeledDataset,
    forget: &ForgetSpec,
    cfg: &BaselineConfig,
) -> Result<StageModel> {
    forget.validate(full_data.class_count)?;
    let retain_classes: Vec<usize> = full_data
        .present_classes()
        .into_iter()
        .filter(|c| !forget.classes.contains(c))
        .collect();
    if retain_classes.is_empty() {
        return Err(DampError::InvalidArgument(
            "random relabeling needs at least one retain class".into(),
        ));
    }
    let mut student = model.clone();
    let tc = cfg.adam(cfg.learning_rate);
    let mut opt = Optimizer::new(&tc);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e1a);
    for epoch in 0..cfg.epochs {
        let labels = relabel(&full_data.labels, &forget.classes, &retain_classes, &mut rng);
        let order = epoch_order(full_data.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, _) = full_data.gather(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            train_step(&mut student, &mut opt, &x, &y, cfg.learning_rate)?;
        }
    }
    Ok(student)
}

// ---------------------------------------------------------------------------
// Bias sweep
// ---------------------------------------------------------------------------

/// Evaluate copies of the model with the forget-class head bias shifted by
/// each offset. Returns `(offset, retain_acc, forget_acc)` per point.
pub fn bias_sweep(
    model: &StageModel,
    forget_class: usize,
    offsets: &[f64],
    retain_test: &LabeledDataset,
    forget_test: &LabeledDataset,
) -> Result<Vec<(f64, f64, f64)>> {
    if forget_class >= model.class_count {
        return Err(DampError::InvalidArgument(format!(
            "forget class {forget_class} outside [0, {})",
            model.class_count
        )));
    }
    let mut curve = Vec::with_capacity(offsets.len());
    for &delta in offsets {
        let mut probe = model.clone();
        probe.head.bias[forget_class] += delta;
        let r = accuracy(&probe, retain_test)?;
        let f = accuracy(&probe, forget_test)?;
        curve.push((delta, r, f));
    }
    Ok(curve)
}
