//! Stage-abstracted neural network engine.
//!
//! Every model is a fixed sequence of `L = 5` stages followed by a linear
//! classifier head fed by global average pooling. A stage owns one learnable
//! operator (convolution or linear map), optional batch normalization, a ReLU,
//! and an optional 2x2 max pool. The "edit space" of stage `l` is the input of
//! the next learnable operator: convolution patches when that operator is a
//! convolution, GAP features when it is linear.

pub mod adversarial;
pub mod gradcheck;
pub mod layers;
pub mod train;

use std::cell::Cell;

use ndarray::{Array1, Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DampError, Result};
pub use layers::{gap_forward, im2col, softmax_cross_entropy, softmax_rows, ForwardMode};
use layers::{BatchNorm, BnCache, Conv2d, ConvCache, Linear, LinearCache, PoolCache};

/// Number of stages in the unified abstraction.
pub const STAGE_COUNT: usize = 5;

thread_local! {
    /// Counts backward passes on this thread, so gradient-free claims can be
    /// asserted by instrumentation rather than by reading the code.
    static GRADIENT_PASSES: Cell<u64> = const { Cell::new(0) };
}

pub fn gradient_pass_count() -> u64 {
    GRADIENT_PASSES.with(|c| c.get())
}

pub(crate) fn record_gradient_pass() {
    GRADIENT_PASSES.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Arch {
    Cnn5Mini,
    Mlp5,
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Cnn5Mini => "cnn5-mini",
            Arch::Mlp5 => "mlp5",
        }
    }

    pub fn parse(tag: &str) -> Result<Arch> {
        match tag {
            "cnn5-mini" => Ok(Arch::Cnn5Mini),
            "mlp5" => Ok(Arch::Mlp5),
            other => Err(DampError::InvalidArgument(format!(
                "unknown architecture '{other}' (expected cnn5-mini or mlp5)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone)]
pub enum StageOp {
    Conv(Conv2d),
    Linear(Linear),
}

impl StageOp {
    pub fn out_channels(&self) -> usize {
        match self {
            StageOp::Conv(c) => c.out_channels(),
            StageOp::Linear(l) => l.out_features(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub op: StageOp,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
    pub pool: bool,
}

/// An `L = 5` stage network with a GAP + linear classifier head.
#[derive(Debug, Clone)]
pub struct StageModel {
    pub stages: Vec<Stage>,
    pub head: Linear,
    pub arch: Arch,
    /// Channels for `cnn5-mini`; flattened input dimension for `mlp5`.
    pub input_channels: usize,
    pub class_count: usize,
}

/// Per-stage activations captured during a forward pass.
pub struct ActivationTrace {
    /// Stage outputs `a^l` (after pooling when present), one per stage.
    pub stage_outputs: Vec<Array4<f64>>,
    /// GAP summaries `h^l` of each stage output, `(batch, channels)`.
    pub pooled: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

enum OpCache {
    Conv(ConvCache),
    Linear(LinearCache),
}

struct StageTape {
    op_cache: OpCache,
    bn_cache: Option<BnCache>,
    relu_mask: Option<Array4<f64>>,
    pool_cache: Option<PoolCache>,
}

/// Forward-pass record consumed by [`StageModel::backward`].
pub struct Tape {
    input_dim: (usize, usize, usize, usize),
    stages: Vec<StageTape>,
    stage_outputs: Vec<Array4<f64>>,
    head_cache: LinearCache,
    gap_input_dim: (usize, usize, usize, usize),
    pub logits: Array2<f64>,
}

/// Gradients in the same order as [`StageModel::named_params`].
pub struct Grads {
    pub tensors: Vec<ndarray::ArrayD<f64>>,
}

/// Borrowed views over parameter or buffer tensors.
pub enum TensorRef<'a> {
    A1(&'a Array1<f64>),
    A2(&'a Array2<f64>),
    A4(&'a Array4<f64>),
}

pub enum TensorMut<'a> {
    A1(&'a mut Array1<f64>),
    A2(&'a mut Array2<f64>),
    A4(&'a mut Array4<f64>),
}

impl TensorRef<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::A1(a) => a.shape().to_vec(),
            TensorRef::A2(a) => a.shape().to_vec(),
            TensorRef::A4(a) => a.shape().to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            TensorRef::A1(a) => a.as_slice().expect("standard layout"),
            TensorRef::A2(a) => a.as_slice().expect("standard layout"),
            TensorRef::A4(a) => a.as_slice().expect("standard layout"),
        }
    }
}

impl TensorMut<'_> {
    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        match self {
            TensorMut::A1(a) => a.as_slice_mut().expect("standard layout"),
            TensorMut::A2(a) => a.as_slice_mut().expect("standard layout"),
            TensorMut::A4(a) => a.as_slice_mut().expect("standard layout"),
        }
    }
}

fn he_normal_conv(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let fan_in = (dim.1 * dim.2 * dim.3) as f64;
    let std = (2.0 / fan_in).sqrt();
    Array4::from_shape_fn(dim, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

fn he_normal_linear(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
    let fan_in = dim.1 as f64;
    let std = (2.0 / fan_in).sqrt();
    Array2::from_shape_fn(dim, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Build a deterministically initialized model.
///
/// `input_channels` is the image channel count for `cnn5-mini` and the
/// flattened input dimension for `mlp5`.
pub fn build_model(
    arch: Arch,
    input_channels: usize,
    class_count: usize,
    seed: u64,
) -> Result<StageModel> {
    match arch {
        Arch::Cnn5Mini => build_cnn5(input_channels, [8, 16, 32, 32, 16], class_count, seed),
        Arch::Mlp5 => build_mlp5(input_channels, [48, 40, 40, 32, 24], class_count, seed),
    }
}

/// `cnn5-mini` with custom channel widths (tests use narrower variants).
pub fn build_cnn5(
    input_channels: usize,
    widths: [usize; STAGE_COUNT],
    class_count: usize,
    seed: u64,
) -> Result<StageModel> {
    check_build_args(input_channels, class_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(STAGE_COUNT);
    let mut in_ch = input_channels;
    for (i, &out_ch) in widths.iter().enumerate() {
        let conv = Conv2d {
            weight: he_normal_conv(&mut rng, (out_ch, in_ch, 3, 3)),
            bias: Array1::zeros(out_ch),
            padding: 1,
        };
        stages.push(Stage {
            op: StageOp::Conv(conv),
            norm: Some(BatchNorm::new(out_ch)),
            activation: Activation::Relu,
            pool: i < 3,
        });
        in_ch = out_ch;
    }
    let head = Linear {
        weight: he_normal_linear(&mut rng, (class_count, widths[4])),
        bias: Array1::zeros(class_count),
    };
    Ok(StageModel {
        stages,
        head,
        arch: Arch::Cnn5Mini,
        input_channels,
        class_count,
    })
}

/// `mlp5` with custom layer widths.
///
/// Stages are linear -> batch norm -> ReLU, mirroring the convolutional
/// blocks. Normalization keeps class-mean directions from collapsing with
/// depth, which the projection edit depends on.
pub fn build_mlp5_custom(
    input_dim: usize,
    widths: [usize; STAGE_COUNT],
    class_count: usize,
    seed: u64,
) -> Result<StageModel> {
    check_build_args(input_dim, class_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(STAGE_COUNT);
    let mut in_dim = input_dim;
    for &out_dim in widths.iter() {
        let linear = Linear {
            weight: he_normal_linear(&mut rng, (out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        };
        stages.push(Stage {
            op: StageOp::Linear(linear),
            norm: Some(BatchNorm::new(out_dim)),
            activation: Activation::Relu,
            pool: false,
        });
        in_dim = out_dim;
    }
    let head = Linear {
        weight: he_normal_linear(&mut rng, (class_count, widths[4])),
        bias: Array1::zeros(class_count),
    };
    Ok(StageModel {
        stages,
        head,
        arch: Arch::Mlp5,
        input_channels: input_dim,
        class_count,
    })
}

fn build_mlp5(
    input_dim: usize,
    widths: [usize; STAGE_COUNT],
    class_count: usize,
    seed: u64,
) -> Result<StageModel> {
    build_mlp5_custom(input_dim, widths, class_count, seed)
}

/// Replace the classifier head with a fresh seeded initialization.
pub fn reinit_head(model: &mut StageModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = (model.head.out_features(), model.head.in_features());
    model.head.weight = he_normal_linear(&mut rng, dim);
    model.head.bias = Array1::zeros(dim.0);
}

fn check_build_args(input_channels: usize, class_count: usize) -> Result<()> {
    if input_channels == 0 {
        return Err(DampError::InvalidArgument(
            "input dimension must be positive".into(),
        ));
    }
    if class_count < 2 {
        return Err(DampError::InvalidArgument(format!(
            "class_count must be >= 2, got {class_count}"
        )));
    }
    Ok(())
}

impl StageModel {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    fn check_input(&self, batch: &Array4<f64>) -> Result<()> {
        let (_n, c, h, w) = batch.dim();
        match self.arch {
            Arch::Cnn5Mini => {
                if c != self.input_channels {
                    return Err(DampError::InvalidArgument(format!(
                        "expected {} input channels, got {c}",
                        self.input_channels
                    )));
                }
            }
            Arch::Mlp5 => {
                if c != self.input_channels || h != 1 || w != 1 {
                    return Err(DampError::InvalidArgument(format!(
                        "mlp5 expects ({}, 1, 1) inputs, got ({c}, {h}, {w})",
                        self.input_channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward_tape(&mut self, batch: &Array4<f64>, mode: ForwardMode) -> Result<Tape> {
        self.check_input(batch)?;
        let mut stage_tapes = Vec::with_capacity(self.stages.len());
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let mut x = batch.clone();
        for stage in self.stages.iter_mut() {
            let (y, op_cache) = match &stage.op {
                StageOp::Conv(conv) => {
                    let (_n, c, h, w) = x.dim();
                    let (_o, ci, kh, kw) = conv.weight.dim();
                    if c != ci || h + 2 * conv.padding < kh || w + 2 * conv.padding < kw {
                        return Err(DampError::InvalidArgument(format!(
                            "conv input ({c}, {h}, {w}) incompatible with kernel ({ci}, {kh}, {kw})"
                        )));
                    }
                    let (y, cache) = conv.forward(&x);
                    (y, OpCache::Conv(cache))
                }
                StageOp::Linear(linear) => {
                    let (n, c, _h, _w) = x.dim();
                    if c != linear.in_features() {
                        return Err(DampError::InvalidArgument(format!(
                            "linear input dim {c} != expected {}",
                            linear.in_features()
                        )));
                    }
                    let x2 = x
                        .to_shape((n, c))
                        .expect("vector activations are 1x1 spatial")
                        .to_owned();
                    let (y2, cache) = linear.forward(&x2);
                    let o = y2.dim().1;
                    let y = y2
                        .into_shape_with_order((n, o, 1, 1))
                        .expect("shape product matches");
                    (y, OpCache::Linear(cache))
                }
            };
            let (y, bn_cache) = match stage.norm.as_mut() {
                Some(bn) => {
                    let (y, cache) = bn.forward(&y, mode);
                    (y, Some(cache))
                }
                None => (y, None),
            };
            let (y, relu_mask) = match stage.activation {
                Activation::Relu => {
                    let (y, mask) = layers::relu_forward(&y);
                    (y, Some(mask))
                }
                Activation::Identity => (y, None),
            };
            let (y, pool_cache) = if stage.pool {
                let (y, cache) = layers::maxpool2_forward(&y);
                (y, Some(cache))
            } else {
                (y, None)
            };
            stage_tapes.push(StageTape {
                op_cache,
                bn_cache,
                relu_mask,
                pool_cache,
            });
            stage_outputs.push(y.clone());
            x = y;
        }
        let gap_input_dim = x.dim();
        let pooled = layers::gap_forward(&x);
        if pooled.dim().1 != self.head.in_features() {
            return Err(DampError::InvalidArgument(format!(
                "head expects {} features, got {}",
                self.head.in_features(),
                pooled.dim().1
            )));
        }
        let (logits, head_cache) = self.head.forward(&pooled);
        Ok(Tape {
            input_dim: batch.dim(),
            stages: stage_tapes,
            stage_outputs,
            head_cache,
            gap_input_dim,
            logits,
        })
    }

    /// Inference forward pass. With `capture`, all stage outputs and their
    /// GAP summaries are retained in the trace.
    pub fn forward(&self, batch: &Array4<f64>, capture: bool) -> Result<ActivationTrace> {
        // Inference never mutates normalization buffers; the tape is simply
        // dropped (desk-scale batches make the extra caches cheap).
        let mut model = self.clone();
        let tape = model.forward_tape(batch, ForwardMode::Eval)?;
        let (stage_outputs, pooled) = if capture {
            let pooled = tape.stage_outputs.iter().map(layers::gap_forward).collect();
            (tape.stage_outputs, pooled)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(ActivationTrace {
            stage_outputs,
            pooled,
            logits: tape.logits,
        })
    }

    /// Reverse-mode pass from a logits gradient. Returns parameter gradients
    /// (ordered as [`Self::named_params`]) and, when requested, the gradient
    /// with respect to the input batch.
    pub fn backward(
        &self,
        tape: &Tape,
        dlogits: &Array2<f64>,
        need_input_grad: bool,
    ) -> (Grads, Option<Array4<f64>>) {
        record_gradient_pass();
        let (dpooled, dhead_w, dhead_b) = self.head.backward(&tape.head_cache, dlogits, true);
        let mut dx = layers::gap_backward(&dpooled.expect("requested"), tape.gap_input_dim);

        // Gradients are collected per stage in reverse, then emitted in
        // canonical (forward) order.
        let mut per_stage: Vec<Vec<ndarray::ArrayD<f64>>> = Vec::with_capacity(self.stages.len());
        let mut dinput = None;
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let st = &tape.stages[i];
            let mut dy = dx;
            if let Some(cache) = &st.pool_cache {
                dy = layers::maxpool2_backward(cache, &dy);
            }
            if let Some(mask) = &st.relu_mask {
                dy = layers::relu_backward(mask, &dy);
            }
            let mut stage_grads: Vec<ndarray::ArrayD<f64>> = Vec::new();
            let mut bn_grads: Option<(Array1<f64>, Array1<f64>)> = None;
            if let (Some(bn), Some(cache)) = (&stage.norm, &st.bn_cache) {
                let (dxn, dgamma, dbeta) = bn.backward(cache, &dy);
                dy = dxn;
                bn_grads = Some((dgamma, dbeta));
            }
            let need_dx = i > 0 || need_input_grad;
            match (&stage.op, &st.op_cache) {
                (StageOp::Conv(conv), OpCache::Conv(cache)) => {
                    let (dxo, dw, db) = conv.backward(cache, &dy, need_dx);
                    stage_grads.push(dw.into_dyn());
                    stage_grads.push(db.into_dyn());
                    if let Some(d) = dxo {
                        dx = d;
                    } else {
                        dx = Array4::zeros(tape.input_dim);
                    }
                }
                (StageOp::Linear(linear), OpCache::Linear(cache)) => {
                    let (n, c, _h, _w) = dy.dim();
                    let dy2 = dy
                        .into_shape_with_order((n, c))
                        .expect("vector activations are 1x1 spatial");
                    let (dxo, dw, db) = linear.backward(cache, &dy2, need_dx);
                    stage_grads.push(dw.into_dyn());
                    stage_grads.push(db.into_dyn());
                    if let Some(d) = dxo {
                        let din = d.dim().1;
                        dx = d
                            .into_shape_with_order((n, din, 1, 1))
                            .expect("shape product matches");
                    } else {
                        dx = Array4::zeros(tape.input_dim);
                    }
                }
                _ => unreachable!("tape kind always matches op kind"),
            }
            if let Some((dgamma, dbeta)) = bn_grads {
                stage_grads.push(dgamma.into_dyn());
                stage_grads.push(dbeta.into_dyn());
            }
            per_stage.push(stage_grads);
            if i == 0 && need_input_grad {
                dinput = Some(dx.clone());
            }
        }
        per_stage.reverse();
        let mut tensors: Vec<ndarray::ArrayD<f64>> = per_stage.into_iter().flatten().collect();
        tensors.push(dhead_w.into_dyn());
        tensors.push(dhead_b.into_dyn());
        (Grads { tensors }, dinput)
    }

    /// Learnable parameters in canonical order: per stage the operator weight
    /// and bias, then gamma/beta when normalized, then the head.
    pub fn named_params(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let s = i + 1;
            match &stage.op {
                StageOp::Conv(c) => {
                    out.push((format!("stage{s}.conv.weight"), TensorRef::A4(&c.weight)));
                    out.push((format!("stage{s}.conv.bias"), TensorRef::A1(&c.bias)));
                }
                StageOp::Linear(l) => {
                    out.push((format!("stage{s}.linear.weight"), TensorRef::A2(&l.weight)));
                    out.push((format!("stage{s}.linear.bias"), TensorRef::A1(&l.bias)));
                }
            }
            if let Some(bn) = &stage.norm {
                out.push((format!("stage{s}.bn.gamma"), TensorRef::A1(&bn.gamma)));
                out.push((format!("stage{s}.bn.beta"), TensorRef::A1(&bn.beta)));
            }
        }
        out.push(("head.weight".into(), TensorRef::A2(&self.head.weight)));
        out.push(("head.bias".into(), TensorRef::A1(&self.head.bias)));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let s = i + 1;
            match &mut stage.op {
                StageOp::Conv(c) => {
                    out.push((format!("stage{s}.conv.weight"), TensorMut::A4(&mut c.weight)));
                    out.push((format!("stage{s}.conv.bias"), TensorMut::A1(&mut c.bias)));
                }
                StageOp::Linear(l) => {
                    out.push((
                        format!("stage{s}.linear.weight"),
                        TensorMut::A2(&mut l.weight),
                    ));
                    out.push((format!("stage{s}.linear.bias"), TensorMut::A1(&mut l.bias)));
                }
            }
            if let Some(bn) = &mut stage.norm {
                out.push((format!("stage{s}.bn.gamma"), TensorMut::A1(&mut bn.gamma)));
                out.push((format!("stage{s}.bn.beta"), TensorMut::A1(&mut bn.beta)));
            }
        }
        out.push(("head.weight".into(), TensorMut::A2(&mut self.head.weight)));
        out.push(("head.bias".into(), TensorMut::A1(&mut self.head.bias)));
        out
    }

    /// Non-learnable buffers (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(bn) = &stage.norm {
                let s = i + 1;
                out.push((
                    format!("stage{s}.bn.running_mean"),
                    TensorRef::A1(&bn.running_mean),
                ));
                out.push((
                    format!("stage{s}.bn.running_var"),
                    TensorRef::A1(&bn.running_var),
                ));
            }
        }
        out
    }

    /// All persisted tensors: parameters followed by buffers.
    pub fn named_tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = self.named_params();
        out.extend(self.named_buffers());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, t)| t.as_slice().len())
            .sum()
    }

    /// Bias vectors only (operator and head), used by bias-invariance checks.
    pub fn bias_vectors(&self) -> Vec<(String, Array1<f64>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let s = i + 1;
            match &stage.op {
                StageOp::Conv(c) => out.push((format!("stage{s}.conv.bias"), c.bias.clone())),
                StageOp::Linear(l) => out.push((format!("stage{s}.linear.bias"), l.bias.clone())),
            }
            if let Some(bn) = &stage.norm {
                out.push((format!("stage{s}.bn.beta"), bn.beta.clone()));
            }
        }
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }
}

/// Edit-space rows of stage `stage` (1-based) for a batch: one row per sample
/// and spatial location, plus the location count per sample.
///
/// When the next operator is a convolution, rows are unfolded patches matched
/// to its kernel; when it is linear (stage `L` feeding the head, or any
/// `mlp5` stage), rows are GAP features and the location count is 1.
pub fn edit_space_vectors(
    model: &StageModel,
    batch: &Array4<f64>,
    stage: usize,
) -> Result<(Array2<f64>, usize)> {
    let trace = model.forward(batch, true)?;
    edit_rows_from_outputs(model, &trace.stage_outputs, stage)
}

/// Same as [`edit_space_vectors`] but reusing already captured stage outputs.
pub fn edit_rows_from_outputs(
    model: &StageModel,
    stage_outputs: &[Array4<f64>],
    stage: usize,
) -> Result<(Array2<f64>, usize)> {
    let l = model.stage_count();
    if stage < 1 || stage > l {
        return Err(DampError::InvalidArgument(format!(
            "stage index {stage} out of range 1..={l}"
        )));
    }
    let out = &stage_outputs[stage - 1];
    if stage == l {
        return Ok((layers::gap_forward(out), 1));
    }
    match &model.stages[stage].op {
        StageOp::Linear(_) => Ok((layers::gap_forward(out), 1)),
        StageOp::Conv(conv) => {
            let (_n, _c, h, w) = out.dim();
            let (_o, _ci, kh, kw) = conv.weight.dim();
            let pad = conv.padding;
            let oh = h + 2 * pad + 1 - kh;
            let ow = w + 2 * pad + 1 - kw;
            Ok((im2col(out, kh, kw, pad), oh * ow))
        }
    }
}

/// Dimension of the edit space at each stage, i.e. the column count of the
/// next operator's flattened weight matrix.
pub fn edit_space_dim(model: &StageModel, stage: usize) -> Result<usize> {
    let l = model.stage_count();
    if stage < 1 || stage > l {
        return Err(DampError::InvalidArgument(format!(
            "stage index {stage} out of range 1..={l}"
        )));
    }
    if stage == l {
        return Ok(model.head.in_features());
    }
    Ok(match &model.stages[stage].op {
        StageOp::Conv(conv) => conv.patch_len(),
        StageOp::Linear(lin) => lin.in_features(),
    })
}
