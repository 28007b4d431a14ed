//! Forward and backward passes for the fixed layer set: convolution, max
//! pooling, cross-channel local response normalization, fully-connected
//! maps, ReLU, sigmoid and the logistic cross-entropy loss.
//!
//! Feature maps are `[channels, height, width]` tensors. Convolution weights
//! are `[filters, channels, kh, kw]`; fully-connected weights are
//! `[in, out]` so that the map is `out = Wᵀ·in + b`.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn chw(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape(format!(
            "{what} must be [channels, height, width], got {:?}",
            t.shape()
        ))),
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, axis: &'static str) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "kernel and stride must be at least 1".to_string(),
        ));
    }
    if kernel > input {
        return Err(Error::ShapeMismatch {
            axis,
            expected: kernel,
            actual: input,
        });
    }
    Ok((input - kernel) / stride + 1)
}

/// Geometry of a convolution, validated against its operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Self> {
        let (channels, height, width) = chw(input, "convolution input")?;
        let [filters, wc, kh, kw] = *weights.shape() else {
            return Err(Error::InvalidShape(format!(
                "convolution weights must be [filters, channels, kh, kw], got {:?}",
                weights.shape()
            )));
        };
        if wc != channels {
            return Err(Error::ShapeMismatch {
                axis: "channels",
                expected: channels,
                actual: wc,
            });
        }
        if bias.len() != filters {
            return Err(Error::ShapeMismatch {
                axis: "bias",
                expected: filters,
                actual: bias.len(),
            });
        }
        let out_h = out_extent(height, kh, stride, "height")?;
        let out_w = out_extent(width, kw, stride, "width")?;
        Ok(Self {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            out_h,
            out_w,
        })
    }
}

/// Valid (unpadded) strided convolution.
pub fn conv_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights, bias, stride)?;
    let patches = im2col(input.data(), &g);
    let w = weights.data();
    let plane = g.out_h * g.out_w;
    let taps = g.channels * g.kh * g.kw;
    let mut out = vec![0.0; g.filters * plane];
    for f in 0..g.filters {
        let acc = &mut out[f * plane..(f + 1) * plane];
        for (t, &wv) in w[f * taps..(f + 1) * taps].iter().enumerate() {
            for (d, xv) in acc.iter_mut().zip(&patches[t * plane..(t + 1) * plane]) {
                *d += wv * xv;
            }
        }
        let b = bias.data()[f];
        acc.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(vec![g.filters, g.out_h, g.out_w], out)
}

/// Rows of the `[taps, out_h * out_w]` patch matrix, taps ordered
/// `(channel, ki, kj)` like the weight layout.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut patches = Vec::with_capacity(g.channels * g.kh * g.kw * plane);
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                for oy in 0..g.out_h {
                    let row = &xc[(oy * g.stride + ki) * g.width + kj..];
                    if g.stride == 1 {
                        patches.extend_from_slice(&row[..g.out_w]);
                    } else {
                        patches.extend((0..g.out_w).map(|ox| row[ox * g.stride]));
                    }
                }
            }
        }
    }
    patches
}

/// Dot product with four interleaved partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Forward context retained for [`conv_backward`].
#[derive(Debug, Clone)]
pub struct ConvCtx {
    pub input: Tensor,
    pub weights: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_backward(ctx: Option<&ConvCtx>, upstream: &Tensor) -> Result<ConvGrads> {
    let ctx = ctx.ok_or_else(|| Error::MissingContext("conv_backward called without a forward context".to_string()))?;
    let mut grads = ConvGrads {
        input: vec![0.0; ctx.input.len()],
        weights: vec![0.0; ctx.weights.len()],
        bias: vec![0.0; ctx.weights.dim(0)?],
    };
    conv_backward_into(
        &ctx.input,
        &ctx.weights,
        ctx.stride,
        upstream,
        Some(&mut grads.input),
        &mut grads.weights,
        &mut grads.bias,
    )?;
    Ok(grads)
}

/// Accumulates (`+=`) convolution gradients into caller-owned buffers.
/// The input gradient is skipped when `input_grad` is `None`.
pub fn conv_backward_into(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    upstream: &Tensor,
    input_grad: Option<&mut [f64]>,
    weight_grad: &mut [f64],
    bias_grad: &mut [f64],
) -> Result<()> {
    let bias_shape = Tensor::zeros(&[weights.dim(0)?]);
    let g = ConvGeometry::new(input, weights, &bias_shape, stride)?;
    if upstream.shape() != [g.filters, g.out_h, g.out_w] {
        return Err(Error::InvalidShape(format!(
            "upstream gradient {:?} does not match convolution output [{}, {}, {}]",
            upstream.shape(),
            g.filters,
            g.out_h,
            g.out_w
        )));
    }
    if weight_grad.len() != weights.len() || bias_grad.len() != g.filters {
        return Err(Error::InvalidArgument("gradient buffer length mismatch".to_string()));
    }
    let w = weights.data();
    let up = upstream.data();
    let plane = g.out_h * g.out_w;
    let taps = g.channels * g.kh * g.kw;
    let patches = im2col(input.data(), &g);
    for f in 0..g.filters {
        let gf = &up[f * plane..(f + 1) * plane];
        bias_grad[f] += gf.iter().sum::<f64>();
        for (t, dw) in weight_grad[f * taps..(f + 1) * taps].iter_mut().enumerate() {
            *dw += dot(gf, &patches[t * plane..(t + 1) * plane]);
        }
    }
    if let Some(dx) = input_grad {
        if dx.len() != input.len() {
            return Err(Error::InvalidArgument("input gradient buffer length mismatch".to_string()));
        }
        // gradient of the patch matrix, then scattered back (col2im)
        let mut dpatch = vec![0.0; taps * plane];
        for f in 0..g.filters {
            let gf = &up[f * plane..(f + 1) * plane];
            for (t, &wv) in w[f * taps..(f + 1) * taps].iter().enumerate() {
                for (d, gv) in dpatch[t * plane..(t + 1) * plane].iter_mut().zip(gf) {
                    *d += wv * gv;
                }
            }
        }
        let hw = g.height * g.width;
        let mut rows = dpatch.chunks_exact(g.out_w);
        for c in 0..g.channels {
            let dxc = &mut dx[c * hw..(c + 1) * hw];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    for oy in 0..g.out_h {
                        let base = (oy * g.stride + ki) * g.width + kj;
                        let src = rows.next().expect("patch rows match geometry");
                        for (ox, v) in src.iter().enumerate() {
                            dxc[base + ox * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Max pooling over each channel. Returns the pooled map and, per output
/// element, the flat input index of the window maximum. Ties resolve to the
/// lowest flat index.
pub fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = chw(input, "max-pool input")?;
    let oh = out_extent(h, kernel, stride, "height")?;
    let ow = out_extent(w, kernel, stride, "width")?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

/// Routes each upstream value to its recorded argmax position.
pub fn maxpool_backward(argmax: &[usize], upstream: &[f64], input_len: usize) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; input_len];
    maxpool_backward_into(argmax, upstream, &mut grad)?;
    Ok(grad)
}

pub fn maxpool_backward_into(argmax: &[usize], upstream: &[f64], grad: &mut [f64]) -> Result<()> {
    if argmax.len() != upstream.len() {
        return Err(Error::ShapeMismatch {
            axis: "pooled elements",
            expected: argmax.len(),
            actual: upstream.len(),
        });
    }
    for (&i, &g) in argmax.iter().zip(upstream) {
        let len = grad.len();
        *grad.get_mut(i).ok_or(Error::IndexOutOfRange { index: i, len })? += g;
    }
    Ok(())
}

/// Cross-channel local response normalization parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrnParams {
    pub n: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            n: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    /// Channel range `[lo, hi]` normalizing channel `c` among `channels`.
    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let pre = (self.n - 1) / 2;
        let lo = c.saturating_sub(pre);
        let hi = (c + self.n - 1 - pre).min(channels - 1);
        (lo, hi)
    }
}

/// `d^beta`, with a square-root path for the common `beta = 0.75`.
fn pow_beta(d: f64, beta: f64) -> f64 {
    if beta == 0.75 {
        let r = libm::sqrt(d);
        r * libm::sqrt(r)
    } else {
        libm::pow(d, beta)
    }
}

/// `out_c = in_c / (k + alpha * sum_{c' in window(c)} in_c'^2)^beta`.
///
/// Also returns the denominators base `k + alpha * sum` needed by the
/// backward pass.
pub fn lrn_forward(input: &Tensor, p: &LrnParams) -> Result<(Tensor, Vec<f64>)> {
    if p.n == 0 {
        return Err(Error::InvalidArgument("LRN depth n must be at least 1".to_string()));
    }
    let (c, h, w) = chw(input, "LRN input")?;
    let hw = h * w;
    let x = input.data();
    let mut scale = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let (lo, hi) = p.window(ch, c);
        for pos in 0..hw {
            let mut s = 0.0;
            for cc in lo..=hi {
                let v = x[cc * hw + pos];
                s += v * v;
            }
            let d = p.k + p.alpha * s;
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical(format!(
                    "LRN denominator {d} is not positive at channel {ch}, position {pos}"
                )));
            }
            let i = ch * hw + pos;
            scale[i] = d;
            out[i] = x[i] / pow_beta(d, p.beta);
        }
    }
    Ok((Tensor::new(vec![c, h, w], out)?, scale))
}

/// Accumulates the LRN input gradient.
pub fn lrn_backward_into(
    input: &Tensor,
    scale: &[f64],
    p: &LrnParams,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let (c, h, w) = chw(input, "LRN input")?;
    let n = input.len();
    if scale.len() != n || upstream.len() != n || grad.len() != n {
        return Err(Error::ShapeMismatch {
            axis: "LRN elements",
            expected: n,
            actual: upstream.len(),
        });
    }
    let hw = h * w;
    let x = input.data();
    // t_c = g_c * x_c * d_c^(-beta-1), shared by every channel whose window contains c.
    let t: Vec<f64> = (0..n)
        .map(|i| upstream[i] * x[i] / (scale[i] * pow_beta(scale[i], p.beta)))
        .collect();
    for ch in 0..c {
        for pos in 0..hw {
            let i = ch * hw + pos;
            let mut cross = 0.0;
            for other in 0..c {
                let (lo, hi) = p.window(other, c);
                if (lo..=hi).contains(&ch) {
                    cross += t[other * hw + pos];
                }
            }
            grad[i] += upstream[i] / pow_beta(scale[i], p.beta)
                - 2.0 * p.alpha * p.beta * x[i] * cross;
        }
    }
    Ok(())
}

pub fn lrn_backward(input: &Tensor, scale: &[f64], p: &LrnParams, upstream: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; input.len()];
    lrn_backward_into(input, scale, p, upstream, &mut grad)?;
    Ok(grad)
}

fn fc_dims(input: &[f64], weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let [n_in, n_out] = *weights.shape() else {
        return Err(Error::InvalidShape(format!(
            "fully-connected weights must be [in, out], got {:?}",
            weights.shape()
        )));
    };
    if n_in != input.len() {
        return Err(Error::ShapeMismatch {
            axis: "fc input",
            expected: n_in,
            actual: input.len(),
        });
    }
    if bias.len() != n_out {
        return Err(Error::ShapeMismatch {
            axis: "fc bias",
            expected: n_out,
            actual: bias.len(),
        });
    }
    Ok((n_in, n_out))
}

/// `out = Wᵀ·in + b` with `W` stored `[in, out]`.
pub fn fc_forward(input: &[f64], weights: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let (_, n_out) = fc_dims(input, weights, bias)?;
    let w = weights.data();
    let mut out = vec![0.0; n_out];
    for (i, &xi) in input.iter().enumerate() {
        // exact: skipping a zero term leaves every partial sum unchanged
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
            *o += xi * wv;
        }
    }
    for (o, b) in out.iter_mut().zip(bias.data()) {
        *o += b;
    }
    Ok(out)
}

/// Accumulates `dW += in ⊗ g`, `db += g` and, optionally, `d_in += W·g`.
pub fn fc_backward_into(
    input: &[f64],
    weights: &Tensor,
    upstream: &[f64],
    input_grad: Option<&mut [f64]>,
    weight_grad: &mut [f64],
    bias_grad: &mut [f64],
) -> Result<()> {
    let [n_in, n_out] = *weights.shape() else {
        return Err(Error::InvalidShape("fully-connected weights must be [in, out]".to_string()));
    };
    if input.len() != n_in || upstream.len() != n_out {
        return Err(Error::ShapeMismatch {
            axis: "fc backward",
            expected: n_out,
            actual: upstream.len(),
        });
    }
    for (b, g) in bias_grad.iter_mut().zip(upstream) {
        *b += g;
    }
    for (i, &xi) in input.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (d, g) in weight_grad[i * n_out..(i + 1) * n_out].iter_mut().zip(upstream) {
            *d += xi * g;
        }
    }
    if let Some(dx) = input_grad {
        let w = weights.data();
        for (i, d) in dx.iter_mut().enumerate() {
            let row = &w[i * n_out..(i + 1) * n_out];
            *d += dot(row, upstream);
        }
    }
    Ok(())
}

pub fn relu(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Gradient mask of ReLU evaluated at the pre-activation `input`.
pub fn relu_backward_into(input: &[f64], upstream: &[f64], grad: &mut [f64]) {
    for ((d, &x), &g) in grad.iter_mut().zip(input).zip(upstream) {
        if x > 0.0 {
            *d += g;
        }
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn sigmoid_all(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| sigmoid(v)).collect()
}

fn check_label(y: f64) -> Result<()> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("binary label must be 0 or 1, got {y}")))
    }
}

/// Cross-entropy of a Bernoulli prediction `p` against label `y`.
pub fn bce_loss(p: f64, y: f64) -> Result<f64> {
    check_label(y)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("probability must lie in (0, 1), got {p}")));
    }
    Ok(if y == 1.0 { -libm::log(p) } else { -libm::log1p(-p) })
}

/// Cross-entropy evaluated from the pre-sigmoid logit `z`; returns the loss
/// and `d loss / dz = sigmoid(z) - y`.
pub fn bce_with_logit(z: f64, y: f64) -> Result<(f64, f64)> {
    check_label(y)?;
    let loss = z.max(0.0) - z * y + libm::log1p(libm::exp(-z.abs()));
    Ok((loss, sigmoid(z) - y))
}
