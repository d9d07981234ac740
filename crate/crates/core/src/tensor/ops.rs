//! Elementwise, linear-algebra, reduction and shape ops on [`Var`].

use std::sync::Arc;

use super::gemm::{matmul_into, Transpose};
use super::tape::Var;
use super::{strides, Tensor};
use crate::error::{Error, Result};

fn is_scalar(shape: &[usize]) -> bool {
    shape.is_empty()
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// fallible, so the std operator traits do not fit
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn zip_with(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        df_da: fn(f64, f64) -> f64,
        df_db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let shape = if sa == sb || is_scalar(&sb) {
            sa.clone()
        } else if is_scalar(&sa) {
            sb.clone()
        } else {
            return Err(Error::dim(op, &sa, &sb));
        };
        let (a, b) = (self.data(), other.data());
        let n: usize = shape.iter().product();
        let a_bcast = a.len() == 1 && n != 1;
        let b_bcast = b.len() == 1 && n != 1;
        let ia = move |i: usize| if a_bcast { 0 } else { i };
        let ib = move |i: usize| if b_bcast { 0 } else { i };
        let out = (0..n).map(|i| f(a[ia(i)], b[ib(i)])).collect();
        Ok(self.tape.push(shape, out, &[self, other], move |g, needs| {
            let grad_for = |which_a: bool| {
                let mut acc = vec![0.0; if which_a { a.len() } else { b.len() }];
                for (i, gi) in g.iter().enumerate() {
                    let (x, y) = (a[ia(i)], b[ib(i)]);
                    if which_a {
                        acc[ia(i)] += gi * df_da(x, y);
                    } else {
                        acc[ib(i)] += gi * df_db(x, y);
                    }
                }
                acc
            };
            vec![
                needs[0].then(|| grad_for(true)),
                needs[1].then(|| grad_for(false)),
            ]
        }))
    }

    /// Elementwise sum; a rank-0 operand broadcasts.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    fn map(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y = Arc::new(out.clone());
        self.tape.push(self.shape(), out, &[self], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.map(move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.map(move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, |_, y| y)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `min(max(x, 0), 6)`.
    pub fn relu6(self) -> Var<'t> {
        self.map(
            |v| v.clamp(0.0, 6.0),
            |x, _| if x > 0.0 && x < 6.0 { 1.0 } else { 0.0 },
        )
    }

    /// Tanh-approximated GELU:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.map(
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let t = (C * (x + A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    /// Multiplies by a fixed (non-differentiable) tensor of the same size.
    pub fn mul_const(self, mask: Arc<Vec<f64>>) -> Result<Var<'t>> {
        let x = self.data();
        if mask.len() != x.len() {
            return Err(Error::dim("mul_const", &self.shape(), &[mask.len()]));
        }
        let out = x.iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        Ok(self.tape.push(self.shape(), out, &[self], move |g, _| {
            vec![Some(
                g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect(),
            )]
        }))
    }

    /// Adds a bias vector along `axis` (e.g. the channel axis of NCHW, or
    /// the last axis of a feature matrix).
    pub fn add_bias(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let bshape = bias.shape();
        if axis >= shape.len() || bshape != [shape[axis]] {
            return Err(Error::dim("add_bias", &shape, &bshape));
        }
        let (outer, c, inner) = split_axis(&shape, axis);
        let b = bias.data();
        let mut out = self.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        Ok(self.tape.push(shape, out, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; c];
                for o in 0..outer {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *acc += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }))
    }

    fn matmul_impl(self, other: Var<'t>, tb: Transpose) -> Result<Var<'t>> {
        let op = "matmul";
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim(op, &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = match tb {
            Transpose::No => (sb[r - 2], sb[r - 1]),
            Transpose::Yes => (sb[r - 1], sb[r - 2]),
        };
        if k != kb {
            return Err(Error::dim(op, &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            matmul_into(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                Transpose::No,
                &b[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.tape.push(shape, out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                // dA = dC · op(B)ᵀ
                let mut ga = vec![0.0; a.len()];
                let tb_back = match tb {
                    Transpose::No => Transpose::Yes,
                    Transpose::Yes => Transpose::No,
                };
                for i in 0..batch {
                    matmul_into(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        Transpose::No,
                        &b[i * k * n..(i + 1) * k * n],
                        tb_back,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; b.len()];
                for i in 0..batch {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let as_ = &a[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    match tb {
                        // dB = Aᵀ · dC
                        Transpose::No => {
                            matmul_into(k, m, n, as_, Transpose::Yes, gs, Transpose::No, dst, false)
                        }
                        // B stored n×k: dB = dCᵀ · A
                        Transpose::Yes => {
                            matmul_into(n, m, k, gs, Transpose::Yes, as_, Transpose::No, dst, false)
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Matrix product over the last two axes; leading axes must match.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, Transpose::No)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_transposed(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, Transpose::Yes)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let old = self.shape();
        if shape.iter().product::<usize>() != old.iter().product::<usize>() {
            return Err(Error::dim("reshape", &old, &shape));
        }
        let data = self.data().to_vec();
        Ok(self
            .tape
            .push(shape, data, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        // stride in the input for each output axis
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src_index = Arc::new(permuted_indices(&out_shape, &gather));
        let x = self.data();
        let out = src_index.iter().map(|&i| x[i]).collect();
        let n = x.len();
        Ok(self.tape.push(out_shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for (gi, &src) in g.iter().zip(src_index.iter()) {
                gx[src] += gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose_last2", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::contract(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let n = x.len();
        Ok(self.tape.push(out_shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Joins values along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let tape = first.tape;
        let base_shape = first.shape();
        if axis >= base_shape.len() {
            return Err(Error::dim("concat", &base_shape, &[axis]));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            let same_rank = s.len() == base_shape.len();
            if !same_rank
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &base_shape, s));
            }
        }
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = widths.iter().sum();
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let datas: Vec<Arc<Vec<f64>>> = parts.iter().map(|p| p.data()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (d, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        Ok(tape.push(out_shape, out, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&widths)
                .map(|(&need, &w)| need.then(|| Vec::with_capacity(outer * w * inner)))
                .collect();
            for o in 0..outer {
                let mut offset = o * total * inner;
                for (slot, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(buf) = slot {
                        buf.extend_from_slice(&g[offset..offset + w * inner]);
                    }
                    offset += w * inner;
                }
            }
            grads
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let n = self.numel();
        let s = self.data().iter().sum();
        self.tape.push(Vec::new(), vec![s], &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Arithmetic mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::contract(
                "mean_axis",
                format!("empty or missing axis {axis} in {shape:?}"),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let x = self.data();
        let inv = 1.0 / extent as f64;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &x[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let n = x.len();
        Ok(self.tape.push(out_shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                for e in 0..extent {
                    gx[(o * extent + e) * inner..(o * extent + e + 1) * inner]
                        .iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(a, b)| *a = b * inv);
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Flat source index for every output position of a strided gather.
fn permuted_indices(out_shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            src += gather[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= gather[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

impl Tensor {
    /// Non-recorded matrix product, used by oracles and cached inference.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let tape = super::Tape::new();
        let out = tape.constant(self).matmul(tape.constant(other))?;
        Ok(out.value())
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_identity_and_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2], &[1.0, 2.0]));
        let z = tape.constant(&t(&[2], &[0.0, 0.0]));
        assert_eq!(*a.add(z).unwrap().data(), vec![1.0, 2.0]);
        let c = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let err = a.add(c).unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn mul_elementwise_values() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2], &[2.0, 3.0]));
        let b = tape.constant(&t(&[2], &[4.0, 5.0]));
        assert_eq!(*a.mul(b).unwrap().data(), vec![8.0, 15.0]);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let s = tape.leaf(&Tensor::scalar(2.0).with_requires_grad(true));
        let loss = x.mul(s).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_values_and_errors() {
        let tape = Tape::new();
        let eye = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        assert_eq!(*eye.matmul(m).unwrap().data(), vec![3.0, 4.0, 5.0, 6.0]);
        let row = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(&t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(*row.matmul(col).unwrap().data(), vec![11.0]);
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(a.matmul(a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_transposed_matches_explicit_transpose() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::from_fn(vec![2, 3, 4], |i| (i as f64 * 0.37).sin()));
        let b = tape.constant(&Tensor::from_fn(vec![2, 5, 4], |i| (i as f64 * 0.11).cos()));
        let direct = a.matmul_transposed(b).unwrap();
        let explicit = a.matmul(b.transpose_last2().unwrap()).unwrap();
        assert_eq!(direct.shape(), vec![2, 3, 5]);
        assert!(direct.value().max_abs_diff(&explicit.value()) < 1e-14);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::from_fn(vec![2, 1280], |i| i as f64));
        let b = tape.constant(&Tensor::from_fn(vec![2, 1664], |i| -(i as f64)));
        let c = tape.constant(&Tensor::from_fn(vec![2, 768], |i| i as f64 * 0.5));
        let fused = Var::concat(&[a, b, c], 1).unwrap();
        assert_eq!(fused.shape(), vec![2, 3712]);
        assert_eq!(fused.slice(1, 0, 1280).unwrap().data(), a.data());
        assert_eq!(fused.slice(1, 1280, 1664).unwrap().data(), b.data());
        assert_eq!(fused.slice(1, 2944, 768).unwrap().data(), c.data());
        assert_eq!(Var::concat(&[a], 1).unwrap().data(), a.data());
        let bad = tape.constant(&Tensor::zeros(vec![3, 4]));
        assert!(matches!(
            Var::concat(&[a, bad], 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mean_axis_averages() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 4], &[1.0, 3.0, 5.0, 7.0]));
        assert_eq!(*x.mean_axis(2).unwrap().data(), vec![4.0]);
    }

    #[test]
    fn activations() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(*x.relu().data(), vec![0.0, 0.0, 2.0]);
        let y = tape.constant(&t(&[1], &[7.0]));
        assert_eq!(*y.relu6().data(), vec![6.0]);
        let z = tape.constant(&t(&[1], &[0.0]));
        assert_eq!(*z.gelu().data(), vec![0.0]);
    }
}
