//! Fused neural-network ops with hand-written backward rules.

use std::sync::Arc;

use super::gemm::{matmul_into, Transpose};
use super::ops::split_axis;
use super::tape::Var;
use crate::error::{Error, Result};

/// Geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn new(
        op: &'static str,
        input: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim(op, input, &[0, 0, 0, 0]));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::contract(op, "kernel and stride must be >= 1"));
        }
        let (c, h, w) = (input[1], input[2], input[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::contract(
                op,
                format!("input {h}x{w} (pad {pad}) smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one image `[c, h, w]` into `[c·kh·kw, oh·ow]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.oh * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * ohw;
                    for oy in 0..self.oh {
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        match self.src(oy, ki, self.h) {
                            None => dst.fill(0.0),
                            Some(iy) => {
                                let src_row = &x[(ci * self.h + iy) * self.w..];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = self.src(ox, kj, self.w).map_or(0.0, |ix| src_row[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters columns back, accumulating.
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let ohw = self.oh * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * ohw;
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ki, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                x[(ci * self.h + iy) * self.w + ix] +=
                                    cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_finite(op: &'static str, x: &[f64]) -> Result<()> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric(op, "NaN input"));
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation (no kernel flip) with symmetric zero padding.
    ///
    /// `self`: `[b, c, h, w]`; `weight`: `[o, c, kh, kw]`; `bias`: `[o]`.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let op = "conv2d";
        let xs = self.shape();
        let ws = weight.shape();
        if ws.len() != 4 || xs.len() != 4 || xs[1] != ws[1] {
            return Err(Error::dim(op, &xs, &ws));
        }
        let win = Window::new(op, &xs, ws[2], ws[3], stride, pad)?;
        let (b, o) = (xs[0], ws[0]);
        let ckk = win.c * win.kh * win.kw;
        let ohw = win.oh * win.ow;
        let chw = win.c * win.h * win.w;
        let (x, w) = (self.data(), weight.data());

        let mut out = vec![0.0; b * o * ohw];
        let mut cols = if win.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; ckk * ohw]
        };
        for bi in 0..b {
            let xb = &x[bi * chw..(bi + 1) * chw];
            let src: &[f64] = if win.is_pointwise() {
                xb
            } else {
                win.im2col(xb, &mut cols);
                &cols
            };
            matmul_into(
                o,
                ckk,
                ohw,
                &w,
                Transpose::No,
                src,
                Transpose::No,
                &mut out[bi * o * ohw..(bi + 1) * o * ohw],
                false,
            );
        }
        let conv = self.tape.push(
            vec![b, o, win.oh, win.ow],
            out,
            &[self, weight],
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = needs[1].then(|| vec![0.0; w.len()]);
                let mut cols = vec![0.0; if win.is_pointwise() { 0 } else { ckk * ohw }];
                let mut dcols = vec![0.0; if win.is_pointwise() { 0 } else { ckk * ohw }];
                for bi in 0..b {
                    let gb = &g[bi * o * ohw..(bi + 1) * o * ohw];
                    if let Some(gw) = gw.as_mut() {
                        let xb = &x[bi * chw..(bi + 1) * chw];
                        let src: &[f64] = if win.is_pointwise() {
                            xb
                        } else {
                            win.im2col(xb, &mut cols);
                            &cols
                        };
                        matmul_into(
                            o,
                            ohw,
                            ckk,
                            gb,
                            Transpose::No,
                            src,
                            Transpose::Yes,
                            gw,
                            true,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[bi * chw..(bi + 1) * chw];
                        if win.is_pointwise() {
                            matmul_into(
                                ckk,
                                o,
                                ohw,
                                &w,
                                Transpose::Yes,
                                gb,
                                Transpose::No,
                                dst,
                                false,
                            );
                        } else {
                            matmul_into(
                                ckk,
                                o,
                                ohw,
                                &w,
                                Transpose::Yes,
                                gb,
                                Transpose::No,
                                &mut dcols,
                                false,
                            );
                            win.col2im(&dcols, dst);
                        }
                    }
                }
                vec![gx, gw]
            },
        );
        match bias {
            Some(bias) => conv.add_bias(bias, 1),
            None => Ok(conv),
        }
    }

    /// One `kh×kw` filter per channel. `weight`: `[c, 1, kh, kw]`.
    pub fn depthwise_conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let op = "depthwise_conv2d";
        let xs = self.shape();
        let ws = weight.shape();
        if ws.len() != 4 || xs.len() != 4 || ws[0] != xs[1] || ws[1] != 1 {
            return Err(Error::dim(op, &xs, &ws));
        }
        let win = Window::new(op, &xs, ws[2], ws[3], stride, pad)?;
        let b = xs[0];
        let (c, h, wd, kh, kw, oh, ow) = (win.c, win.h, win.w, win.kh, win.kw, win.oh, win.ow);
        let (x, w) = (self.data(), weight.data());
        let mut out = vec![0.0; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let xp = &x[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                let wp = &w[ci * kh * kw..(ci + 1) * kh * kw];
                let op_ = &mut out[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wp[ki * kw + kj];
                        for oy in 0..oh {
                            let Some(iy) = win.src(oy, ki, h) else {
                                continue;
                            };
                            for ox in 0..ow {
                                if let Some(ix) = win.src(ox, kj, wd) {
                                    op_[oy * ow + ox] += wv * xp[iy * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self
            .tape
            .push(vec![b, c, oh, ow], out, &[self, weight], move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = needs[1].then(|| vec![0.0; w.len()]);
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * wd;
                        let gp = &g[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let widx = ci * kh * kw + ki * kw + kj;
                                let wv = w[widx];
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let Some(iy) = win.src(oy, ki, h) else {
                                        continue;
                                    };
                                    for ox in 0..ow {
                                        if let Some(ix) = win.src(ox, kj, wd) {
                                            let gv = gp[oy * ow + ox];
                                            acc += gv * x[plane + iy * wd + ix];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[plane + iy * wd + ix] += gv * wv;
                                            }
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                vec![gx, gw]
            }))
    }

    /// Average pooling with a square window, no padding.
    pub fn avg_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>> {
        let xs = self.shape();
        let win = Window::new("avg_pool2d", &xs, k, k, stride, 0)?;
        let b = xs[0];
        let (c, h, w, oh, ow) = (win.c, win.h, win.w, win.oh, win.ow);
        let x = self.data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            s += x[p * h * w + (oy * stride + ki) * w + ox * stride + kj];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = s * inv;
                }
            }
        }
        let n = x.len();
        Ok(self
            .tape
            .push(vec![b, c, oh, ow], out, &[self], move |g, _| {
                let mut gx = vec![0.0; n];
                for p in 0..b * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(p * oh + oy) * ow + ox] * inv;
                            for ki in 0..k {
                                for kj in 0..k {
                                    gx[p * h * w + (oy * stride + ki) * w + ox * stride + kj] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let x = self.data();
        check_finite("softmax", &x)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    y[idx(j)] /= z;
                }
            }
        }
        let ys = Arc::new(y.clone());
        Ok(self.tape.push(shape, y, &[self], move |g, _| {
            let mut gx = vec![0.0; ys.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| g[idx(j)] * ys[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = ys[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean categorical cross-entropy `−Σ y·log p` of probabilities `self`
    /// (`[b, k]`) against one-hot `targets`.
    pub fn cross_entropy(self, targets: &[f64]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (b, _) = check_one_hot("cross_entropy", &shape, targets)?;
        let p = self.data();
        let targets = Arc::new(targets.to_vec());
        let mut loss = 0.0;
        for (pi, yi) in p.iter().zip(targets.iter()) {
            if *yi != 0.0 {
                loss -= yi * pi.ln();
            }
        }
        let inv_b = 1.0 / b as f64;
        Ok(self
            .tape
            .push(Vec::new(), vec![loss * inv_b], &[self], move |g, _| {
                vec![Some(
                    p.iter()
                        .zip(targets.iter())
                        .map(|(pi, yi)| {
                            if *yi != 0.0 {
                                -g[0] * yi / pi * inv_b
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )]
            }))
    }

    /// Softmax followed by cross-entropy, fused through log-sum-exp.
    ///
    /// `self` holds logits `[b, k]`. Each sample's loss is multiplied by the
    /// weight of its class when `class_weights` is given; the result is the
    /// mean over the batch. Gradient w.r.t. logits is `w·(p − y)/b`.
    pub fn softmax_cross_entropy(
        self,
        targets: &[f64],
        class_weights: Option<&[f64]>,
    ) -> Result<Var<'t>> {
        let op = "softmax_cross_entropy";
        let shape = self.shape();
        let (b, k) = check_one_hot(op, &shape, targets)?;
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::dim(op, &shape, &[w.len()]));
            }
        }
        let z = self.data();
        check_finite(op, &z)?;
        let mut probs = vec![0.0; b * k];
        let mut sample_w = vec![1.0; b];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let y = &targets[i * k..(i + 1) * k];
            let cls = y.iter().position(|&v| v == 1.0).expect("validated one-hot");
            sample_w[i] = class_weights.map_or(1.0, |w| w[cls]);
            loss += sample_w[i] * (lse - row[cls]);
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let inv_b = 1.0 / b as f64;
        let targets = targets.to_vec();
        Ok(self
            .tape
            .push(Vec::new(), vec![loss * inv_b], &[self], move |g, _| {
                let mut gz = vec![0.0; b * k];
                for i in 0..b {
                    let s = g[0] * sample_w[i] * inv_b;
                    for j in 0..k {
                        gz[i * k + j] = s * (probs[i * k + j] - targets[i * k + j]);
                    }
                }
                vec![Some(gz)]
            }))
    }

    /// Batch normalization with batch statistics over every axis except 1.
    ///
    /// Returns the normalized output together with the per-channel batch mean
    /// and biased batch variance.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let op = "batch_norm";
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::dim(op, &shape, &gamma.shape()));
        }
        if shape[0] < 2 {
            return Err(Error::contract(op, "train mode needs batch size >= 2"));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(op, &shape, &gamma.shape()));
        }
        let x = self.data();
        let count = (outer * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += x[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += x[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let y = self
            .tape
            .push(shape, out, &[self, gamma, beta], move |g, needs| {
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; xhat.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gm[ch] * inv_std[ch] / count;
                            for i in base..base + inner {
                                gx[i] = k * (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    needs[1].then(|| sum_gx.clone()),
                    needs[2].then(|| sum_g.clone()),
                ]
            });
        Ok((y, mean, var))
    }

    /// Per-channel affine normalization with fixed statistics:
    /// `gamma·(x − mean)/√(var + eps) + beta`.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let op = "batch_norm";
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::dim(op, &shape, &gamma.shape()));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::dim(op, &shape, &gamma.shape()));
        }
        let x = self.data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = gm[ch] * (x[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        Ok(self
            .tape
            .push(shape, out, &[self, gamma, beta], move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            gg[ch] += g[i] * (x[i] - mean[ch]) * inv_std[ch];
                            gb[ch] += g[i];
                            if let Some(gx) = gx.as_mut() {
                                gx[i] = g[i] * gm[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            }))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let op = "layer_norm";
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::dim(op, &shape, &[]))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(op, &shape, &gamma.shape()));
        }
        let x = self.data();
        let rows = x.len() / d.max(1);
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            inv_std[r] = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (x[i] - mean) * inv_std[r];
                out[i] = gm[j] * xhat[i] + bt[j];
            }
        }
        Ok(self
            .tape
            .push(shape, out, &[self, gamma, beta], move |g, needs| {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = needs[0].then(|| vec![0.0; xhat.len()]);
                let n = d as f64;
                for r in 0..rows {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let i = r * d + j;
                        gg[j] += g[i] * xhat[i];
                        gb[j] += g[i];
                        let dxh = g[i] * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[i];
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..d {
                            let i = r * d + j;
                            let dxh = g[i] * gm[j];
                            gx[i] = inv_std[r] / n * (n * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                        }
                    }
                }
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            }))
    }
}

fn check_one_hot(op: &'static str, shape: &[usize], targets: &[f64]) -> Result<(usize, usize)> {
    if shape.len() != 2 || targets.len() != shape[0] * shape[1] {
        return Err(Error::dim(op, shape, &[targets.len()]));
    }
    let (b, k) = (shape[0], shape[1]);
    for row in targets.chunks(k.max(1)) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::contract(
                op,
                format!("label row {row:?} is not one-hot"),
            ));
        }
    }
    Ok((b, k))
}
