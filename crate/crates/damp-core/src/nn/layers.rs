//! Layer kernels: convolution via im2col, linear maps, batch normalization,
//! ReLU, 2x2 max pooling, global average pooling, and the softmax
//! cross-entropy head. Each kernel provides a forward pass that records the
//! cache its backward pass needs.
//!
//! Activations are `Array4<f64>` shaped `(batch, channels, height, width)`;
//! purely vector-valued stages use a trailing `1x1` spatial extent.

use ndarray::{Array1, Array2, Array4, Axis};

/// Whether batch normalization uses batch statistics (training) or frozen
/// running statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Batch statistics; `update_running` controls whether running
    /// mean/variance buffers are advanced (gradient checking wants them
    /// untouched).
    Train { update_running: bool },
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

/// Unfold `x` into convolution patches for a `kh x kw` kernel with the given
/// zero padding and stride 1.
///
/// Output row `((n * oh + oy) * ow + ox)` holds the patch feeding output
/// location `(oy, ox)` of sample `n`; within a row the layout is
/// channel-major then kernel-row then kernel-column, matching a row of the
/// flattened weight tensor `(out, c*kh*kw)`.
pub fn im2col(x: &Array4<f64>, kh: usize, kw: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let patch = c * kh * kw;
    let mut cols = Array2::<f64>::zeros((n * oh * ow, patch));
    let xs = x.as_slice().expect("activations are standard layout");
    let cs = cols.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row_base = ((ni * oh + oy) * ow + ox) * patch;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue; // zero padding, cols already zeroed
                        }
                        let src_base = ((ni * c + ci) * h + iy as usize) * w;
                        let dst_base = row_base + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[dst_base + kx] = xs[src_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the adjoint of [`im2col`]: fold patch gradients back onto the
/// input grid.
pub fn col2im(
    dcols: &Array2<f64>,
    input_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let patch = c * kh * kw;
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row_base = ((ni * oh + oy) * ow + ox) * patch;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_base = ((ni * c + ci) * h + iy as usize) * w;
                        let src_base = row_base + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[dst_base + ix as usize] += ds[src_base + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out_channels, in_channels, kh, kw)`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub padding: usize,
}

pub struct ConvCache {
    pub cols: Array2<f64>,
    pub input_dim: (usize, usize, usize, usize),
    pub out_hw: (usize, usize),
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn patch_len(&self) -> usize {
        let (_, c, kh, kw) = self.weight.dim();
        c * kh * kw
    }

    /// Flattened `(out, in*kh*kw)` view of the weight tensor.
    pub fn weight_matrix(&self) -> Array2<f64> {
        let (o, c, kh, kw) = self.weight.dim();
        self.weight
            .to_shape((o, c * kh * kw))
            .expect("weights are standard layout")
            .to_owned()
    }

    pub fn set_weight_matrix(&mut self, flat: &Array2<f64>) {
        let (o, c, kh, kw) = self.weight.dim();
        assert_eq!(flat.dim(), (o, c * kh * kw));
        self.weight = flat
            .to_shape((o, c, kh, kw))
            .expect("standard layout")
            .to_owned();
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, _c, h, w) = x.dim();
        let (o, _ci, kh, kw) = self.weight.dim();
        let pad = self.padding;
        let oh = h + 2 * pad + 1 - kh;
        let ow = w + 2 * pad + 1 - kw;
        let cols = im2col(x, kh, kw, pad);
        let wf = self.weight_matrix();
        let mut y_mat = cols.dot(&wf.t()); // (n*oh*ow, o)
        y_mat += &self.bias.view().insert_axis(Axis(0));
        let y = y_mat
            .into_shape_with_order((n, oh, ow, o))
            .expect("shape product matches")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                cols,
                input_dim: x.dim(),
                out_hw: (oh, ow),
            },
        )
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array4<f64>,
        need_dx: bool,
    ) -> (Option<Array4<f64>>, Array4<f64>, Array1<f64>) {
        let (n, _, _, _) = cache.input_dim;
        let (o, c, kh, kw) = self.weight.dim();
        let (oh, ow) = cache.out_hw;
        let dy_mat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n * oh * ow, o))
            .expect("shape product matches");
        let dw_flat = dy_mat.t().dot(&cache.cols); // (o, c*kh*kw)
        let dw = dw_flat
            .into_shape_with_order((o, c, kh, kw))
            .expect("shape product matches");
        let db = dy_mat.sum_axis(Axis(0));
        let dx = if need_dx {
            let wf = self.weight_matrix();
            let dcols = dy_mat.dot(&wf);
            Some(col2im(&dcols, cache.input_dim, kh, kw, self.padding))
        } else {
            None
        };
        (dx, dw, db)
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out_features, in_features)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct LinearCache {
    pub input: Array2<f64>,
}

impl Linear {
    pub fn out_features(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim().1
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias.view().insert_axis(Axis(0));
        (y, LinearCache { input: x.clone() })
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(
        &self,
        cache: &LinearCache,
        dy: &Array2<f64>,
        need_dx: bool,
    ) -> (Option<Array2<f64>>, Array2<f64>, Array1<f64>) {
        let dw = dy.t().dot(&cache.input);
        let db = dy.sum_axis(Axis(0));
        let dx = need_dx.then(|| dy.dot(&self.weight));
        (dx, dw, db)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BnCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
    pub used_batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: ForwardMode) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let (mean, var, used_batch_stats) = match mode {
            ForwardMode::Eval => (self.running_mean.clone(), self.running_var.clone(), false),
            ForwardMode::Train { update_running } => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let plane = x.index_axis(Axis(1), ci);
                    let mu = plane.sum() / m;
                    let v = plane.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                if update_running {
                    // Running variance uses the unbiased estimate.
                    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    for ci in 0..c {
                        self.running_mean[ci] =
                            (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                        self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci]
                            + self.momentum * var[ci] * unbias;
                    }
                }
                (mean, var, true)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            xhat.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|a| (a - mu) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|a| g * a + b);
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                used_batch_stats,
            },
        )
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            dbeta[ci] = dyc.sum();
            dgamma[ci] = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        }
        let mut dx = Array4::<f64>::zeros(dy.dim());
        for ci in 0..c {
            let g = self.gamma[ci];
            let is = cache.inv_std[ci];
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            if cache.used_batch_stats {
                let sum_dy = dbeta[ci];
                let sum_dy_xhat = dgamma[ci];
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .and(&xh)
                    .for_each(|d, &dyv, &xhv| {
                        *d = g * is * (dyv - sum_dy / m - xhv * sum_dy_xhat / m);
                    });
            } else {
                // Frozen statistics: the map is a per-channel affine function.
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|d, &dyv| {
                    *d = g * is * dyv;
                });
            }
        }
        (dx, dgamma, dbeta)
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let mask = x.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
    let y = x.mapv(|a| a.max(0.0));
    (y, mask)
}

pub fn relu_backward(mask: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    dy * mask
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2 (floor semantics: odd trailing rows/cols ignored)
// ---------------------------------------------------------------------------

pub struct PoolCache {
    /// Flat input index of each pooled maximum.
    pub argmax: Vec<usize>,
    pub input_dim: (usize, usize, usize, usize),
}

pub fn maxpool2_forward(x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
    let (n, c, h, w) = x.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = plane + (2 * oy) * w + 2 * ox;
                    let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = candidates[0];
                    for &cand in &candidates[1..] {
                        if xs[cand] > xs[best] {
                            best = cand;
                        }
                    }
                    let out_idx = ((ni * c + ci) * oh + oy) * ow + ox;
                    ys[out_idx] = xs[best];
                    argmax[out_idx] = best;
                }
            }
        }
    }
    (
        y,
        PoolCache {
            argmax,
            input_dim: (n, c, h, w),
        },
    )
}

pub fn maxpool2_backward(cache: &PoolCache, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(cache.input_dim);
    let ds = dx.as_slice_mut().expect("fresh array");
    for (out_idx, &dyv) in dy.as_slice().expect("standard layout").iter().enumerate() {
        ds[cache.argmax[out_idx]] += dyv;
    }
    dx
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

/// Channel-wise spatial mean: `(n, c, h, w) -> (n, c)`.
pub fn gap_forward(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[[ni, ci]] = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() * scale;
        }
    }
    y
}

pub fn gap_backward(dy: &Array2<f64>, input_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Array4::<f64>::zeros(input_dim);
    for ni in 0..n {
        for ci in 0..c {
            let g = dy[[ni, ci]] * scale;
            dx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch plus its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, _k) = logits.dim();
    assert_eq!(n, labels.len());
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        dlogits[[i, y]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n as f64);
    (loss / n as f64, dlogits)
}

/// Numerically stable row softmax. Rows may contain `-inf` entries (masked
/// logits), which map to probability zero.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
