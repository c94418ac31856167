//! Tape-free numeric kernels. The tape calls these for its forward values, and
//! tests use them directly as building blocks for compositional references.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 1-D cross-correlation over `[batch, channels, length]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dGeometry {
    /// Padding that keeps `ceil(L / stride)` outputs for odd kernels.
    pub fn same_padding(kernel: usize, dilation: usize) -> usize {
        dilation * (kernel.saturating_sub(1)) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(Error::Config(format!(
                "conv channels and kernel must be positive: {self:?}"
            )));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "conv stride and dilation must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Span of one kernel application, `d·(k−1) + 1`.
    pub fn receptive_span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Smallest input length that yields one output.
    pub fn min_input_len(&self) -> usize {
        self.receptive_span().saturating_sub(2 * self.padding).max(1)
    }

    /// `floor((L + 2p − d·(k−1) − 1) / s) + 1`
    pub fn out_len(&self, in_len: usize) -> Result<usize> {
        let padded = in_len + 2 * self.padding;
        let span = self.receptive_span();
        if in_len == 0 || padded < span {
            return Err(Error::InputTooShort {
                required: self.min_input_len(),
                got: in_len,
            });
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel]
    }

    /// Output positions `o` for which tap `j` reads inside the input, plus
    /// the signed input offset of that tap (`input index = o·s + offset`).
    #[inline]
    pub fn tap_range(&self, j: usize, in_len: usize, out_len: usize) -> (usize, usize, isize) {
        let offset = (j * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let last = in_len as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
        let lo = lo.min(hi);
        (lo as usize, hi as usize, offset)
    }
}

fn expect_rank3<S: Real>(x: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[b, c, l] => Ok((b, c, l)),
        s => Err(Error::dim(op, s, &[0, 0, 0])),
    }
}

pub fn conv1d_forward<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    g: &Conv1dGeometry,
) -> Result<Tensor<S>> {
    let (batch, c_in, l_in) = expect_rank3(x, "conv1d")?;
    if c_in != g.in_channels {
        return Err(Error::dim("conv1d", x.shape(), &g.weight_shape()));
    }
    if weight.shape() != g.weight_shape() {
        return Err(Error::dim("conv1d weight", weight.shape(), &g.weight_shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::dim("conv1d bias", b.shape(), &[g.out_channels]));
        }
    }
    let l_out = g.out_len(l_in)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(batch * g.out_channels * l_out);
    let mut acc = vec![0f64; l_out];
    let s = g.stride;
    for b in 0..batch {
        for co in 0..g.out_channels {
            let init = bias.map_or(0.0, |t| t.data()[co].as_f64());
            acc.iter_mut().for_each(|a| *a = init);
            for ci in 0..c_in {
                let row = &xd[(b * c_in + ci) * l_in..(b * c_in + ci + 1) * l_in];
                let wrow = &wd[(co * c_in + ci) * g.kernel..(co * c_in + ci + 1) * g.kernel];
                for (j, &w) in wrow.iter().enumerate() {
                    let w = w.as_f64();
                    let (lo, hi, off) = g.tap_range(j, l_in, l_out);
                    for (o, a) in acc.iter_mut().enumerate().take(hi).skip(lo) {
                        let idx = (o * s) as isize + off;
                        *a += w * row[idx as usize].as_f64();
                    }
                }
            }
            out.extend(acc.iter().map(|&v| S::of_f64(v)));
        }
    }
    Tensor::new(&[batch, g.out_channels, l_out], out)
}

/// Gradients of a 1-D convolution. Returns `(grad_x, grad_w, grad_bias)`, each
/// computed only when requested.
#[allow(clippy::type_complexity)]
pub fn conv1d_backward<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &[S],
    g: &Conv1dGeometry,
    need_x: bool,
    need_w: bool,
    need_bias: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let [batch, c_in, l_in] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let l_out = grad_out.len() / (batch * g.out_channels);
    let (xd, wd) = (x.data(), weight.data());
    let s = g.stride;
    let mut gx = if need_x { vec![0f64; xd.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0f64; wd.len()] } else { Vec::new() };
    let mut gb = if need_bias { vec![0f64; g.out_channels] } else { Vec::new() };
    for b in 0..batch {
        for co in 0..g.out_channels {
            let gy = &grad_out[(b * g.out_channels + co) * l_out..(b * g.out_channels + co + 1) * l_out];
            if need_bias {
                gb[co] += gy.iter().map(|v| v.as_f64()).sum::<f64>();
            }
            for ci in 0..c_in {
                let base = (b * c_in + ci) * l_in;
                let row = &xd[base..base + l_in];
                for j in 0..g.kernel {
                    let widx = (co * c_in + ci) * g.kernel + j;
                    let (lo, hi, off) = g.tap_range(j, l_in, l_out);
                    if need_w {
                        let mut acc = 0f64;
                        for (o, gv) in gy.iter().enumerate().take(hi).skip(lo) {
                            let idx = ((o * s) as isize + off) as usize;
                            acc += gv.as_f64() * row[idx].as_f64();
                        }
                        gw[widx] += acc;
                    }
                    if need_x {
                        let w = wd[widx].as_f64();
                        let gxr = &mut gx[base..base + l_in];
                        for (o, gv) in gy.iter().enumerate().take(hi).skip(lo) {
                            let idx = ((o * s) as isize + off) as usize;
                            gxr[idx] += w * gv.as_f64();
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>, on: bool| on.then(|| v.into_iter().map(S::of_f64).collect());
    (cast(gx, need_x), cast(gw, need_w), cast(gb, need_bias))
}

/// Splits a rank-2 or rank-3 tensor into `(outer, channels, inner)` around axis 1.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, l] => Ok((n, c, l)),
        _ => Err(Error::dim("batchnorm", shape, &[0, 0, 0])),
    }
}

/// Batch statistics of one train-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over all non-channel positions.
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance, as used for running estimates.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let n = self.count as f64;
        let corr = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * corr).collect()
    }
}

pub struct BatchNormTrainOut<S> {
    pub y: Tensor<S>,
    pub xhat: Vec<S>,
    pub inv_std: Vec<f64>,
    pub stats: BatchStats,
}

pub fn batchnorm_train<S: Real>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    eps: f64,
) -> Result<BatchNormTrainOut<S>> {
    let (outer, c, inner) = channel_layout(x.shape())?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim("batchnorm", x.shape(), &[gamma.len()]));
    }
    let count = outer * inner;
    if count == 0 {
        return Err(Error::Contract("batchnorm over an empty batch".into()));
    }
    let xd = x.data();
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for n in 0..outer {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (n * c + ch) * inner;
            *m += xd[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for n in 0..outer {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            let m = mean[ch];
            var[ch] += xd[base..base + inner]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xd.len());
    let mut y = Vec::with_capacity(xd.len());
    for n in 0..outer {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch].as_f64(), beta[ch].as_f64());
            for v in &xd[base..base + inner] {
                let h = (v.as_f64() - m) * is;
                xhat.push(S::of_f64(h));
                y.push(S::of_f64(ga * h + be));
            }
        }
    }
    Ok(BatchNormTrainOut {
        y: Tensor::new(x.shape(), y)?,
        xhat,
        inv_std,
        stats: BatchStats { mean, var, count },
    })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_train_backward<S: Real>(
    shape: &[usize],
    grad_out: &[S],
    xhat: &[S],
    inv_std: &[f64],
    gamma: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (outer, c, inner) = channel_layout(shape).expect("shape validated in forward");
    let m = (outer * inner) as f64;
    let mut sum_g = vec![0f64; c];
    let mut sum_gx = vec![0f64; c];
    for n in 0..outer {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            for i in base..base + inner {
                let g = grad_out[i].as_f64();
                sum_g[ch] += g;
                sum_gx[ch] += g * xhat[i].as_f64();
            }
        }
    }
    let mut gx = Vec::with_capacity(grad_out.len());
    for n in 0..outer {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            let scale = gamma[ch].as_f64() * inv_std[ch];
            let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
            for i in base..base + inner {
                gx.push(S::of_f64(
                    scale * (grad_out[i].as_f64() - mg - xhat[i].as_f64() * mgx),
                ));
            }
        }
    }
    let to_s = |v: Vec<f64>| v.into_iter().map(S::of_f64).collect();
    (gx, to_s(sum_gx), to_s(sum_g))
}

/// Per-channel affine map `y = x·scale + shift` (eval-mode normalization).
pub fn channel_affine<S: Real>(x: &Tensor<S>, scale: &[f64], shift: &[f64]) -> Result<Tensor<S>> {
    let (outer, c, inner) = channel_layout(x.shape())?;
    if scale.len() != c {
        return Err(Error::dim("batchnorm", x.shape(), &[scale.len()]));
    }
    let xd = x.data();
    let mut y = Vec::with_capacity(xd.len());
    for n in 0..outer {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            y.extend(
                xd[base..base + inner]
                    .iter()
                    .map(|v| S::of_f64(v.as_f64() * scale[ch] + shift[ch])),
            );
        }
    }
    Tensor::new(x.shape(), y)
}

/// Eval-mode normalization from running statistics.
pub fn batchnorm_eval<S: Real>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: f64,
) -> Result<Tensor<S>> {
    let (scale, shift) = eval_affine(gamma, beta, running_mean, running_var, eps);
    channel_affine(x, &scale, &shift)
}

pub(crate) fn eval_affine<S: Real>(
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gamma
        .iter()
        .zip(running_var)
        .map(|(g, v)| g.as_f64() / (v.as_f64() + eps).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(running_mean)
        .zip(&scale)
        .map(|((b, m), s)| b.as_f64() - m.as_f64() * s)
        .collect();
    (scale, shift)
}

pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => return Err(Error::dim("matmul", a.shape(), b.shape())),
    };
    let n = match *b.shape() {
        [k2, n] if k2 == k => n,
        _ => return Err(Error::dim("matmul", a.shape(), b.shape())),
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = ad[i * k + p].as_f64();
            for (j, a) in acc.iter_mut().enumerate() {
                *a += av * bd[p * n + j].as_f64();
            }
        }
        out.extend(acc.iter().map(|&v| S::of_f64(v)));
    }
    Tensor::new(&[m, n], out)
}

/// `y = x·Wᵀ + b` with `x: [batch, in]`, `W: [out, in]`.
pub fn linear_forward<S: Real>(x: &Tensor<S>, weight: &Tensor<S>, bias: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let (batch, fin) = match *x.shape() {
        [b, f] => (b, f),
        _ => return Err(Error::dim("linear", x.shape(), weight.shape())),
    };
    let fout = match *weight.shape() {
        [o, f] if f == fin => o,
        _ => return Err(Error::dim("linear", x.shape(), weight.shape())),
    };
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(Error::dim("linear bias", b.shape(), &[fout]));
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(batch * fout);
    for r in 0..batch {
        let xr = &xd[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let wr = &wd[o * fin..(o + 1) * fin];
            let mut acc = bias.map_or(0.0, |b| b.data()[o].as_f64());
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv.as_f64() * wv.as_f64();
            }
            out.push(S::of_f64(acc));
        }
    }
    Tensor::new(&[batch, fout], out)
}

/// Row-wise softmax probabilities (in f64) and the mean negative log-likelihood.
pub fn softmax_cross_entropy<S: Real>(logits: &Tensor<S>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (batch, classes) = match *logits.shape() {
        [b, c] => (b, c),
        _ => return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len(), 0])),
    };
    if labels.len() != batch {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if batch == 0 {
        return Err(Error::Contract("cross_entropy over an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let ld = logits.data();
    let mut probs = Vec::with_capacity(ld.len());
    let mut loss = 0f64;
    for (r, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = ld[r * classes..(r + 1) * classes].iter().map(|v| v.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        probs.extend(row.iter().map(|v| (v - lse).exp()));
    }
    Ok((loss / batch as f64, probs))
}
