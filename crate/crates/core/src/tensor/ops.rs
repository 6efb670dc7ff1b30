//! Differentiable operations on [`Var`].

use crate::error::{shape_err, Result};

use super::kernels::{self, ConvGeometry};
use super::tape::GradSink;
use super::{Tensor, Var};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let out = self.value().map(f);
        let pid = self.id();
        self.tape().op(out, &[self], move |g, out, nodes, sink| {
            if !sink.wants(pid) {
                return;
            }
            let x = nodes[pid].value.data();
            let slot = sink.slot(pid);
            for (((s, &gv), &xv), &yv) in slot.iter_mut().zip(g).zip(x).zip(out.data()) {
                *s += gv * df(xv, yv);
            }
        })
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, op)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        };
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().op(out, &[self, other], move |g, _, nodes, sink| {
            let (a, b) = (nodes[ia].value.data(), nodes[ib].value.data());
            if sink.wants(ia) {
                let grad: Vec<f64> = (0..g.len()).map(|i| da(g[i], a[i], b[i])).collect();
                sink.add_owned(ia, grad);
            }
            if sink.wants(ib) {
                let grad: Vec<f64> = (0..g.len()).map(|i| db(g[i], a[i], b[i])).collect();
                sink.add_owned(ib, grad);
            }
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, |g, _, b| g / b, |g, a, b| -g * a / (b * b))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v * k);
        let pid = self.id();
        self.tape().op(out, &[self], move |g, _, _, sink| {
            if sink.wants(pid) {
                sink.add_owned(pid, g.iter().map(|v| v * k).collect());
            }
        })
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v + k);
        let pid = self.id();
        self.tape().op(out, &[self], move |g, _, _, sink| sink.add(pid, g))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(stable_softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `max(x, lo)`; the gradient is passed only where `x > lo`.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return shape_err(format!("matmul needs two matrices, got {:?} and {:?}", a.shape(), b.shape()));
            };
            if k != k2 {
                return shape_err(format!("matmul inner extents differ: {:?} · {:?}", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), b.data(), &mut out);
            (Tensor::new([m, n], out)?, m, k, n)
        };
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().op(out, &[self, other], move |g, _, nodes, sink| {
            if sink.wants(ia) {
                let bt = kernels::transpose(k, n, nodes[ib].value.data());
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, &bt, &mut ga);
                sink.add_owned(ia, ga);
            }
            if sink.wants(ib) {
                let at = kernels::transpose(m, k, nodes[ia].value.data());
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, &at, g, &mut gb);
                sink.add_owned(ib, gb);
            }
        }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape)?;
        let pid = self.id();
        Ok(self.tape().op(out, &[self], move |g, _, _, sink| sink.add(pid, g)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let tape = first.tape();
        let base = first.shape();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for rank {}", base.len()));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat along axis {axis}: {base:?} vs {s:?}"));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut start = 0;
        for (p, &ext) in parts.iter().zip(&extents) {
            let v = p.value();
            for o in 0..outer {
                let src = &v.data()[o * ext * inner..(o + 1) * ext * inner];
                let dst = (o * total + start) * inner;
                data[dst..dst + ext * inner].copy_from_slice(src);
            }
            start += ext;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(tape.op(Tensor::new(shape, data)?, parts, move |g, _, _, sink| {
            let mut start = 0;
            for (&pid, &ext) in ids.iter().zip(&extents) {
                if sink.wants(pid) {
                    let slot = sink.slot(pid);
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + ext) * inner];
                        for (s, v) in slot[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                }
                start += ext;
            }
        }))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (out, outer, ext, inner) = {
            let v = self.value();
            if axis >= v.rank() || start + len > v.shape()[axis] {
                return shape_err(format!(
                    "slice [{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    v.shape()
                ));
            }
            let (outer, ext, inner) = split_at_axis(v.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            (Tensor::new(shape, data)?, outer, ext, inner)
        };
        let pid = self.id();
        Ok(self.tape().op(out, &[self], move |g, _, _, sink| {
            if !sink.wants(pid) {
                return;
            }
            let slot = sink.slot(pid);
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                for (s, v) in slot[base..base + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                    *s += v;
                }
            }
        }))
    }

    /// Zero padding with `(before, after)` counts per axis.
    pub fn pad_zeros(self, pads: &[(usize, usize)]) -> Result<Var<'t>> {
        let in_shape = self.shape();
        if pads.len() != in_shape.len() {
            return shape_err(format!("pad_zeros got {} pads for rank {}", pads.len(), in_shape.len()));
        }
        let out_shape: Vec<usize> = in_shape.iter().zip(pads).map(|(s, (b, a))| s + b + a).collect();
        let map = padded_offsets(&in_shape, &out_shape, pads);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (&dst, &v) in map.iter().zip(self.value().data()) {
            data[dst] = v;
        }
        let pid = self.id();
        Ok(self.tape().op(Tensor::new(out_shape, data)?, &[self], move |g, _, _, sink| {
            if sink.wants(pid) {
                sink.add_owned(pid, map.iter().map(|&o| g[o]).collect());
            }
        }))
    }

    pub fn sum_all(self) -> Var<'t> {
        let total = self.value().sum();
        let pid = self.id();
        self.tape().op(Tensor::scalar(total), &[self], move |g, _, _, sink| {
            if sink.wants(pid) {
                let gv = g[0];
                sink.slot(pid).iter_mut().for_each(|s| *s += gv);
            }
        })
    }

    /// Sums out the listed axes (no kept dimensions). Summing every axis
    /// yields a one-element tensor.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let in_shape = self.shape();
        if axes.iter().any(|&a| a >= in_shape.len()) {
            return shape_err(format!("sum over axes {axes:?} of rank-{} tensor", in_shape.len()));
        }
        let keep: Vec<usize> = (0..in_shape.len()).filter(|d| !axes.contains(d)).collect();
        let mut out_shape: Vec<usize> = keep.iter().map(|&d| in_shape[d]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let numel: usize = in_shape.iter().product();
        let mut target = vec![0usize; numel];
        let mut index = vec![0usize; in_shape.len()];
        for t in target.iter_mut() {
            *t = keep.iter().fold(0, |acc, &d| acc * in_shape[d] + index[d]);
            for d in (0..in_shape.len()).rev() {
                index[d] += 1;
                if index[d] < in_shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        let mut data = vec![0.0; out_shape.iter().product()];
        for (&t, &v) in target.iter().zip(self.value().data()) {
            data[t] += v;
        }
        let pid = self.id();
        Ok(self.tape().op(Tensor::new(out_shape, data)?, &[self], move |g, _, _, sink| {
            if sink.wants(pid) {
                sink.add_owned(pid, target.iter().map(|&t| g[t]).collect());
            }
        }))
    }

    /// Softmax over every element. On an `m×n` map this is the spatial
    /// softmax used for normalized attention masks.
    pub fn softmax_all(self) -> Var<'t> {
        let out = {
            let v = self.value();
            let max = v.max();
            let exps: Vec<f64> = v.data().iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            Tensor::new(v.shape(), exps.into_iter().map(|e| e / z).collect()).expect("same shape")
        };
        let pid = self.id();
        self.tape().op(out, &[self], move |g, y, _, sink| {
            if !sink.wants(pid) {
                return;
            }
            let y = y.data();
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            let slot = sink.slot(pid);
            for ((s, &gv), &yv) in slot.iter_mut().zip(g).zip(y) {
                *s += yv * (gv - dot);
            }
        })
    }

    /// Spatial softmax of an `m×n` map.
    pub fn softmax_spatial(self) -> Result<Var<'t>> {
        if self.value().rank() != 2 {
            return shape_err(format!("softmax_spatial expects an m×n map, got {:?}", self.shape()));
        }
        Ok(self.softmax_all())
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(self, target: usize) -> Result<Var<'t>> {
        let (loss, probs) = {
            let v = self.value();
            if v.rank() != 1 || target >= v.numel() {
                return shape_err(format!("cross_entropy target {target} for logits {:?}", v.shape()));
            }
            let max = v.max();
            let z: f64 = v.data().iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            let probs: Vec<f64> = v.data().iter().map(|x| (x - log_z).exp()).collect();
            (log_z - v.data()[target], probs)
        };
        let pid = self.id();
        Ok(self.tape().op(Tensor::scalar(loss), &[self], move |g, _, _, sink| {
            if !sink.wants(pid) {
                return;
            }
            let slot = sink.slot(pid);
            for (k, (s, p)) in slot.iter_mut().zip(&probs).enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                *s += g[0] * (p - onehot);
            }
        }))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `c×…` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (out, c, per) = {
            let (x, b) = (self.value(), bias.value());
            let c = x.shape().first().copied().unwrap_or(0);
            if b.shape() != [c] {
                return shape_err(format!("bias {:?} for tensor {:?}", b.shape(), x.shape()));
            }
            let per = x.numel() / c.max(1);
            let mut data = x.data().to_vec();
            for (chunk, &bv) in data.chunks_exact_mut(per.max(1)).zip(b.data()) {
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            (Tensor::new(x.shape(), data)?, c, per)
        };
        let (ix, ib) = (self.id(), bias.id());
        Ok(self.tape().op(out, &[self, bias], move |g, _, _, sink| {
            sink.add(ix, g);
            if sink.wants(ib) {
                let gb: Vec<f64> = (0..c).map(|k| g[k * per..(k + 1) * per].iter().sum()).collect();
                sink.add_owned(ib, gb);
            }
        }))
    }

    /// Multiplies every channel of a `c×m×n` map by an `m×n` mask.
    pub fn mul_spatial(self, mask: Var<'t>) -> Result<Var<'t>> {
        let (out, plane) = {
            let (x, a) = (self.value(), mask.value());
            let [_, m, n] = x.shape() else {
                return shape_err(format!("mul_spatial expects a c×m×n map, got {:?}", x.shape()));
            };
            if a.shape() != [*m, *n] {
                return shape_err(format!("mask {:?} does not match map {:?}", a.shape(), x.shape()));
            }
            let plane = m * n;
            let mut data = x.data().to_vec();
            for chunk in data.chunks_exact_mut(plane) {
                chunk.iter_mut().zip(a.data()).for_each(|(v, w)| *v *= w);
            }
            (Tensor::new(x.shape(), data)?, plane)
        };
        let (ix, ia) = (self.id(), mask.id());
        Ok(self.tape().op(out, &[self, mask], move |g, _, nodes, sink| {
            let (x, a) = (nodes[ix].value.data(), nodes[ia].value.data());
            if sink.wants(ix) {
                let gx: Vec<f64> = g.iter().enumerate().map(|(k, gv)| gv * a[k % plane]).collect();
                sink.add_owned(ix, gx);
            }
            if sink.wants(ia) {
                let mut ga = vec![0.0; plane];
                for (k, (gv, xv)) in g.iter().zip(x).enumerate() {
                    ga[k % plane] += gv * xv;
                }
                sink.add_owned(ia, ga);
            }
        }))
    }

    /// Repeats a length-`d` vector over an `m×n` grid: `d×m×n`.
    pub fn tile_spatial(self, m: usize, n: usize) -> Result<Var<'t>> {
        let (out, d) = {
            let q = self.value();
            if q.rank() != 1 {
                return shape_err(format!("tile_spatial expects a vector, got {:?}", q.shape()));
            }
            let d = q.numel();
            let data = q.data().iter().flat_map(|&v| std::iter::repeat_n(v, m * n)).collect();
            (Tensor::new([d, m, n], data)?, d)
        };
        let pid = self.id();
        Ok(self.tape().op(out, &[self], move |g, _, _, sink| {
            if sink.wants(pid) {
                let plane = m * n;
                sink.add_owned(pid, (0..d).map(|k| g[k * plane..(k + 1) * plane].iter().sum()).collect());
            }
        }))
    }

    /// Zero-padded 2-D convolution, see [`super::conv2d`].
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (out, geom) = {
            let (x, k) = (self.value(), kernel.value());
            let g = ConvGeometry::for_conv(x.shape(), k.shape(), stride, padding)?;
            let cols = kernels::im2col(x.data(), &g);
            let mut out = vec![0.0; g.c_out * g.out_len()];
            kernels::gemm(g.c_out, g.patch_len(), g.out_len(), k.data(), &cols, &mut out);
            (Tensor::new([g.c_out, g.out_h, g.out_w], out)?, g)
        };
        let (ix, ik) = (self.id(), kernel.id());
        Ok(self.tape().op(out, &[self, kernel], move |g, _, nodes, sink| {
            if sink.wants(ik) {
                let cols = kernels::im2col(nodes[ix].value.data(), &geom);
                sink.add_owned(ik, kernels::conv_kernel_grad(g, &cols, &geom));
            }
            if sink.wants(ix) {
                sink.add_owned(ix, kernels::conv_input_grad(g, nodes[ik].value.data(), &geom));
            }
        }))
    }

    /// Transposed convolution, see [`super::conv_transpose2d`].
    pub fn conv_transpose2d(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let (out, geom) = {
            let (x, k) = (self.value(), kernel.value());
            let g = ConvGeometry::for_transpose(x.shape(), k.shape(), stride)?;
            let data = kernels::conv_input_grad(x.data(), k.data(), &g);
            (Tensor::new([g.c_in, g.in_h, g.in_w], data)?, g)
        };
        let (ix, ik) = (self.id(), kernel.id());
        Ok(self.tape().op(out, &[self, kernel], move |g, _, nodes, sink| {
            let cols = kernels::im2col(g, &geom);
            if sink.wants(ix) {
                let mut gx = vec![0.0; geom.c_out * geom.out_len()];
                kernels::gemm(geom.c_out, geom.patch_len(), geom.out_len(), nodes[ik].value.data(), &cols, &mut gx);
                sink.add_owned(ix, gx);
            }
            if sink.wants(ik) {
                sink.add_owned(ik, kernels::conv_kernel_grad(nodes[ix].value.data(), &cols, &geom));
            }
        }))
    }

    /// Non-overlapping `size×size` max pooling of a `c×H×W` map; trailing
    /// rows and columns that do not fill a window are dropped.
    pub fn max_pool2d(self, size: usize) -> Result<Var<'t>> {
        let (out, argmax) = {
            let x = self.value();
            let &[c, h, w] = x.shape() else {
                return shape_err(format!("max_pool2d expects c×H×W, got {:?}", x.shape()));
            };
            if size == 0 || h < size || w < size {
                return shape_err(format!("max_pool2d window {size} on {h}×{w}"));
            }
            let (oh, ow) = (h / size, w / size);
            let mut data = Vec::with_capacity(c * oh * ow);
            let mut argmax = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let first = (ch * h + oy * size) * w + ox * size;
                        let mut best = (x.data()[first], first);
                        for dy in 0..size {
                            for dx in 0..size {
                                let off = (ch * h + oy * size + dy) * w + ox * size + dx;
                                let v = x.data()[off];
                                if v > best.0 {
                                    best = (v, off);
                                }
                            }
                        }
                        data.push(best.0);
                        argmax.push(best.1);
                    }
                }
            }
            (Tensor::new([c, oh, ow], data)?, argmax)
        };
        let pid = self.id();
        Ok(self.tape().op(out, &[self], move |g, _, _, sink| {
            if !sink.wants(pid) {
                return;
            }
            let slot = sink.slot(pid);
            for (&off, &gv) in argmax.iter().zip(g) {
                slot[off] += gv;
            }
        }))
    }

    /// Applies a custom linear rearrangement: `out[k] = in[src[k]]` (or 0
    /// where `src[k]` is `None`).
    pub(crate) fn gather(self, shape: Vec<usize>, src: Vec<Option<usize>>) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            let data = src.iter().map(|s| s.map_or(0.0, |i| v.data()[i])).collect();
            Tensor::new(shape, data)?
        };
        let pid = self.id();
        Ok(self.tape().op(out, &[self], move |g, _, _, sink: &mut GradSink| {
            if !sink.wants(pid) {
                return;
            }
            let slot = sink.slot(pid);
            for (s, &gv) in src.iter().zip(g) {
                if let Some(i) = s {
                    slot[*i] += gv;
                }
            }
        }))
    }
}

/// For every input element, its flat offset inside the padded output.
fn padded_offsets(in_shape: &[usize], out_shape: &[usize], pads: &[(usize, usize)]) -> Vec<usize> {
    let numel: usize = in_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut index = vec![0usize; in_shape.len()];
    for _ in 0..numel {
        let off = index
            .iter()
            .zip(pads)
            .zip(out_shape)
            .fold(0, |acc, ((&i, &(before, _)), &ext)| acc * ext + i + before);
        offsets.push(off);
        for d in (0..in_shape.len()).rev() {
            index[d] += 1;
            if index[d] < in_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    offsets
}
