//! Forward kernels and backward rules for the tape ops.
//!
//! Convolution runs as im2col + matmul; the im2col buffer is kept on the
//! record so the backward pass reuses it. The brute-force nested-loop
//! convolution lives only in test oracles, never here.

use super::{BnCtx, BnMode, BnStats, Element, Record, Tape, TensorId};
use crate::error::{Error, Result};

/// `out[m,n] += a[m,k] * b[k,n]`, all row-major.
pub(crate) fn mm_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,n] += transpose(a)[m,k] * b[k,n]` with `a` stored as `[k,m]`.
fn mm_ta_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * transpose(b)[k,n]` with `b` stored as `[n,k]`.
fn mm_tb_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc + av * bv;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// Unfolds one `[C,H,W]` item into `[C*kh*kw, oh*ow]` columns, zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    item: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    for ch in 0..c {
        let plane = &item[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters column gradients back onto one `[C,H,W]` input item.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<E: Element>(
    dcols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    ditem: &mut [E],
) {
    for ch in 0..c {
        let plane = &mut ditem[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &dcols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> Tape<E> {
    /// 2-D convolution of `input [B,C,H,W]` with `kernels [F,C,kh,kw]`,
    /// zero padding, no bias.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernels).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects 4-d input and kernels, got {ishape:?} and {kshape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input has {c} channels, kernels expect {kc}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let ohw = oh * ow;

        let mut cols = vec![E::zero(); b * ckk * ohw];
        let mut out = vec![E::zero(); b * f * ohw];
        {
            let idata = self.data(input);
            let kdata = self.data(kernels);
            for bi in 0..b {
                let item = &idata[bi * c * h * w..(bi + 1) * c * h * w];
                let cols_b = &mut cols[bi * ckk * ohw..(bi + 1) * ckk * ohw];
                im2col(item, c, h, w, kh, kw, stride, pad, oh, ow, cols_b);
                mm_acc(kdata, cols_b, &mut out[bi * f * ohw..(bi + 1) * f * ohw], f, ckk, ohw);
            }
        }

        let requires = self.requires_grad(input) || self.requires_grad(kernels);
        let output = self.push_output(vec![b, f, oh, ow], out, requires)?;
        if requires {
            self.record(Record::Conv2d { input, kernels, output, stride, pad, cols });
        }
        Ok(output)
    }

    /// Max pooling over `window`x`window` with the given stride; floor
    /// semantics for the output extent.
    pub fn maxpool2d(&mut self, input: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::ShapeMismatch(format!("maxpool2d expects 4-d input, got {ishape:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument("maxpool2d window and stride must be positive".into()));
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if window > h || window > w {
            return Err(Error::ShapeMismatch(format!(
                "maxpool2d window {window} larger than spatial extent {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = vec![E::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        {
            let idata = self.data(input);
            let mut oi = 0;
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = E::neg_infinity();
                            let mut best_idx = 0usize;
                            for ky in 0..window {
                                let iy = oy * stride + ky;
                                let row = base + iy * w + ox * stride;
                                for kx in 0..window {
                                    let v = idata[row + kx];
                                    // Strict compare keeps the first (row-major)
                                    // maximum on ties.
                                    if v > best {
                                        best = v;
                                        best_idx = row + kx;
                                    }
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let requires = self.requires_grad(input);
        let output = self.push_output(vec![b, c, oh, ow], out, requires)?;
        if requires {
            self.record(Record::MaxPool2d { input, output, argmax });
        }
        Ok(output)
    }

    /// Batch normalization over `[B,C,H,W]` with per-channel `gamma`/`beta`.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// `stats` by exponential moving average (`momentum` weight on the fresh
    /// batch); infer mode applies the stored statistics as a fixed affine
    /// map. `eps` sits inside the square root as the variance floor.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        mode: BnMode,
        momentum: f32,
        eps: f32,
    ) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::ShapeMismatch(format!("batchnorm expects 4-d input, got {ishape:?}")));
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm gamma/beta must have shape [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if stats.mean.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm running stats cover {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let m = b * h * w;
        if mode == BnMode::Train && m < 2 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm train mode needs at least 2 elements per channel, got {m}"
            )));
        }

        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            BnMode::Train => {
                let idata = self.data(input);
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for bi in 0..b {
                        let s = (bi * c + ch) * plane;
                        for &v in &idata[s..s + plane] {
                            acc += v.as_f64();
                        }
                    }
                    mean[ch] = acc / m as f64;
                    let mut vacc = 0.0f64;
                    for bi in 0..b {
                        let s = (bi * c + ch) * plane;
                        for &v in &idata[s..s + plane] {
                            let d = v.as_f64() - mean[ch];
                            vacc += d * d;
                        }
                    }
                    var[ch] = vacc / m as f64;
                }
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch] as f32;
                    stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch] as f32;
                }
            }
            BnMode::Infer => {
                for ch in 0..c {
                    mean[ch] = stats.mean[ch] as f64;
                    var[ch] = stats.var[ch] as f64;
                }
            }
        }

        let inv_std: Vec<E> =
            var.iter().map(|&v| E::from_f64(1.0 / (v + eps as f64).sqrt())).collect();
        let numel = b * c * plane;
        let mut xhat = vec![E::zero(); numel];
        let mut out = vec![E::zero(); numel];
        {
            let idata = self.data(input);
            let gdata = self.data(gamma);
            let bdata = self.data(beta);
            for bi in 0..b {
                for ch in 0..c {
                    let s = (bi * c + ch) * plane;
                    let mu = E::from_f64(mean[ch]);
                    let is = inv_std[ch];
                    let (g, be) = (gdata[ch], bdata[ch]);
                    for i in s..s + plane {
                        let xh = (idata[i] - mu) * is;
                        xhat[i] = xh;
                        out[i] = g * xh + be;
                    }
                }
            }
        }

        let requires =
            self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        let output = self.push_output(ishape, out, requires)?;
        if requires {
            let ctx = BnCtx { train: mode == BnMode::Train, inv_std, xhat };
            self.record(Record::BatchNorm { input, gamma, beta, output, ctx });
        }
        Ok(output)
    }

    /// Affine layer: `input [B,D] * weights [D,M] + bias [M]`.
    pub fn dense(&mut self, input: TensorId, weights: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weights).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 || bshape.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "dense expects input [B,D], weights [D,M], bias [M]; got {ishape:?}, {wshape:?}, {bshape:?}"
            )));
        }
        let (b, d) = (ishape[0], ishape[1]);
        let (wd, m) = (wshape[0], wshape[1]);
        if d != wd || bshape[0] != m {
            return Err(Error::ShapeMismatch(format!(
                "dense dimension mismatch: input [B={b},D={d}], weights [D={wd},M={m}], bias [{}]",
                bshape[0]
            )));
        }
        let mut out = vec![E::zero(); b * m];
        {
            let idata = self.data(input);
            let wdata = self.data(weights);
            let bdata = self.data(bias);
            for bi in 0..b {
                out[bi * m..(bi + 1) * m].copy_from_slice(bdata);
            }
            mm_acc(idata, wdata, &mut out, b, d, m);
        }
        let requires = self.requires_grad(input)
            || self.requires_grad(weights)
            || self.requires_grad(bias);
        let output = self.push_output(vec![b, m], out, requires)?;
        if requires {
            self.record(Record::Dense { input, weights, bias, output });
        }
        Ok(output)
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        let out: Vec<E> = self.data(input).iter().map(|&v| v.max(E::zero())).collect();
        let requires = self.requires_grad(input);
        let output = self.push_output(shape, out, requires)?;
        if requires {
            self.record(Record::Relu { input, output });
        }
        Ok(output)
    }

    /// Elementwise square.
    pub fn square(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        let out: Vec<E> = self.data(input).iter().map(|&v| v * v).collect();
        let requires = self.requires_grad(input);
        let output = self.push_output(shape, out, requires)?;
        if requires {
            self.record(Record::Square { input, output });
        }
        Ok(output)
    }

    /// Collapses `[B, rest..]` to `[B, prod(rest)]`.
    pub fn flatten(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!("flatten expects at least 2 dims, got {shape:?}")));
        }
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        let out = self.data(input).to_vec();
        let requires = self.requires_grad(input);
        let output = self.push_output(vec![b, rest], out, requires)?;
        if requires {
            self.record(Record::Flatten { input, output });
        }
        Ok(output)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let mut acc = E::zero();
        for &v in self.data(input) {
            acc = acc + v;
        }
        let requires = self.requires_grad(input);
        let output = self.push_output(vec![1], vec![acc], requires)?;
        if requires {
            self.record(Record::Sum { input, output });
        }
        Ok(output)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// per-row max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy expects logits [B,C], got {shape:?}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy got {} labels for batch {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![E::zero(); b * c];
        let mut loss = 0.0f64;
        {
            let ldata = self.data(logits);
            for bi in 0..b {
                let row = &ldata[bi * c..(bi + 1) * c];
                let mx = row.iter().cloned().fold(E::neg_infinity(), E::max);
                let mut denom = E::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    probs[bi * c + j] = e;
                    denom = denom + e;
                }
                for p in &mut probs[bi * c..(bi + 1) * c] {
                    *p = *p / denom;
                }
                // log softmax via the stabilized form; avoids log(0) as long
                // as the true-class logit is finite.
                let label = labels[bi];
                let logp = (ldata[bi * c + label] - mx).as_f64() - denom.as_f64().ln();
                loss -= logp;
            }
        }
        loss /= b as f64;
        let requires = self.requires_grad(logits);
        let output = self.push_output(vec![1], vec![E::from_f64(loss)], requires)?;
        if requires {
            self.record(Record::SoftmaxCrossEntropy {
                logits,
                output,
                labels: labels.to_vec(),
                probs,
            });
        }
        Ok(output)
    }

    pub(crate) fn backward_record(&mut self, rec: &Record<E>) {
        match rec {
            Record::Conv2d { input, kernels, output, stride, pad, cols } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let ishape = self.shape(*input).to_vec();
                let kshape = self.shape(*kernels).to_vec();
                let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (f, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                let oshape = self.shape(*output).to_vec();
                let (oh, ow) = (oshape[2], oshape[3]);
                let (ckk, ohw) = (c * kh * kw, oh * ow);

                if self.requires_grad(*kernels) {
                    let mut dk = self.steal_grad(*kernels);
                    for bi in 0..b {
                        mm_tb_acc(
                            &gout[bi * f * ohw..(bi + 1) * f * ohw],
                            &cols[bi * ckk * ohw..(bi + 1) * ckk * ohw],
                            &mut dk,
                            f,
                            ohw,
                            ckk,
                        );
                    }
                    self.restore_steal(*kernels, dk);
                }
                if self.requires_grad(*input) {
                    let mut din = self.steal_grad(*input);
                    let kdata = self.data(*kernels).to_vec();
                    let mut dcols = vec![E::zero(); ckk * ohw];
                    for bi in 0..b {
                        dcols.iter_mut().for_each(|v| *v = E::zero());
                        mm_ta_acc(
                            &kdata,
                            &gout[bi * f * ohw..(bi + 1) * f * ohw],
                            &mut dcols,
                            ckk,
                            f,
                            ohw,
                        );
                        col2im_acc(
                            &dcols,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            oh,
                            ow,
                            &mut din[bi * c * h * w..(bi + 1) * c * h * w],
                        );
                    }
                    self.restore_steal(*input, din);
                }
                self.restore_grad(*output, gout);
            }
            Record::MaxPool2d { input, output, argmax } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let mut din = self.steal_grad(*input);
                for (i, &g) in gout.iter().enumerate() {
                    let idx = argmax[i] as usize;
                    din[idx] = din[idx] + g;
                }
                self.restore_steal(*input, din);
                self.restore_grad(*output, gout);
            }
            Record::BatchNorm { input, gamma, beta, output, ctx } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let ishape = self.shape(*input).to_vec();
                let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let plane = h * w;
                let m = (b * plane) as f64;
                let gdata = self.data(*gamma).to_vec();

                if self.requires_grad(*gamma) {
                    let mut dg = self.steal_grad(*gamma);
                    for ch in 0..c {
                        let mut acc = E::zero();
                        for bi in 0..b {
                            let s = (bi * c + ch) * plane;
                            for i in s..s + plane {
                                acc = acc + gout[i] * ctx.xhat[i];
                            }
                        }
                        dg[ch] = dg[ch] + acc;
                    }
                    self.restore_steal(*gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let mut db = self.steal_grad(*beta);
                    for ch in 0..c {
                        let mut acc = E::zero();
                        for bi in 0..b {
                            let s = (bi * c + ch) * plane;
                            for i in s..s + plane {
                                acc = acc + gout[i];
                            }
                        }
                        db[ch] = db[ch] + acc;
                    }
                    self.restore_steal(*beta, db);
                }
                if self.requires_grad(*input) {
                    let mut din = self.steal_grad(*input);
                    for ch in 0..c {
                        let g = gdata[ch];
                        let is = ctx.inv_std[ch];
                        if ctx.train {
                            let mut sum_dy = E::zero();
                            let mut sum_dy_xhat = E::zero();
                            for bi in 0..b {
                                let s = (bi * c + ch) * plane;
                                for i in s..s + plane {
                                    sum_dy = sum_dy + gout[i];
                                    sum_dy_xhat = sum_dy_xhat + gout[i] * ctx.xhat[i];
                                }
                            }
                            let inv_m = E::from_f64(1.0 / m);
                            let mean_dy = sum_dy * inv_m;
                            let mean_dy_xhat = sum_dy_xhat * inv_m;
                            for bi in 0..b {
                                let s = (bi * c + ch) * plane;
                                for i in s..s + plane {
                                    let t = gout[i] - mean_dy - ctx.xhat[i] * mean_dy_xhat;
                                    din[i] = din[i] + g * is * t;
                                }
                            }
                        } else {
                            for bi in 0..b {
                                let s = (bi * c + ch) * plane;
                                for i in s..s + plane {
                                    din[i] = din[i] + gout[i] * g * is;
                                }
                            }
                        }
                    }
                    self.restore_steal(*input, din);
                }
                self.restore_grad(*output, gout);
            }
            Record::Dense { input, weights, bias, output } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let (b, d) = {
                    let s = self.shape(*input);
                    (s[0], s[1])
                };
                let m = self.shape(*output)[1];
                if self.requires_grad(*weights) {
                    let idata = self.data(*input).to_vec();
                    let mut dw = self.steal_grad(*weights);
                    mm_ta_acc(&idata, &gout, &mut dw, d, b, m);
                    self.restore_steal(*weights, dw);
                }
                if self.requires_grad(*bias) {
                    let mut db = self.steal_grad(*bias);
                    for bi in 0..b {
                        for j in 0..m {
                            db[j] = db[j] + gout[bi * m + j];
                        }
                    }
                    self.restore_steal(*bias, db);
                }
                if self.requires_grad(*input) {
                    let wdata = self.data(*weights).to_vec();
                    let mut din = self.steal_grad(*input);
                    mm_tb_acc(&gout, &wdata, &mut din, b, m, d);
                    self.restore_steal(*input, din);
                }
                self.restore_grad(*output, gout);
            }
            Record::Relu { input, output } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let mut din = self.steal_grad(*input);
                let idata = &self.tensors[input.0].data;
                for (i, &g) in gout.iter().enumerate() {
                    if idata[i] > E::zero() {
                        din[i] = din[i] + g;
                    }
                }
                self.restore_steal(*input, din);
                self.restore_grad(*output, gout);
            }
            Record::Square { input, output } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let mut din = self.steal_grad(*input);
                let two = E::from_f64(2.0);
                let idata = &self.tensors[input.0].data;
                for (i, &g) in gout.iter().enumerate() {
                    din[i] = din[i] + two * idata[i] * g;
                }
                self.restore_steal(*input, din);
                self.restore_grad(*output, gout);
            }
            Record::Flatten { input, output } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let mut din = self.steal_grad(*input);
                for (dv, &g) in din.iter_mut().zip(gout.iter()) {
                    *dv = *dv + g;
                }
                self.restore_steal(*input, din);
                self.restore_grad(*output, gout);
            }
            Record::Sum { input, output } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let g = gout[0];
                let mut din = self.steal_grad(*input);
                for dv in din.iter_mut() {
                    *dv = *dv + g;
                }
                self.restore_steal(*input, din);
                self.restore_grad(*output, gout);
            }
            Record::SoftmaxCrossEntropy { logits, output, labels, probs } => {
                let Some(gout) = self.take_grad_checked(*output) else { return };
                let g = gout[0];
                let (b, c) = {
                    let s = self.shape(*logits);
                    (s[0], s[1])
                };
                let scale = g * E::from_f64(1.0 / b as f64);
                let mut dl = self.steal_grad(*logits);
                for bi in 0..b {
                    for j in 0..c {
                        let onehot = if labels[bi] == j { E::one() } else { E::zero() };
                        dl[bi * c + j] = dl[bi * c + j] + scale * (probs[bi * c + j] - onehot);
                    }
                }
                self.restore_steal(*logits, dl);
                self.restore_grad(*output, gout);
            }
        }
    }

    /// Output gradient if the output lies on the loss path.
    fn take_grad_checked(&mut self, id: TensorId) -> Option<Vec<E>> {
        self.take_grad(id)
    }

    /// Takes an input's gradient buffer for accumulation (allocating it
    /// zeroed on first touch); pair with [`Self::restore_steal`].
    fn steal_grad(&mut self, id: TensorId) -> Vec<E> {
        let numel = self.tensors[id.0].data.len();
        self.tensors[id.0].grad.take().unwrap_or_else(|| vec![E::zero(); numel])
    }

    fn restore_steal(&mut self, id: TensorId, grad: Vec<E>) {
        self.tensors[id.0].grad = Some(grad);
    }
}
