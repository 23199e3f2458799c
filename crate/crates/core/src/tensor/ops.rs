use std::sync::Arc;

use super::{adjoint_fault, numel, Tensor};
use crate::error::{Error, Result};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn index_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn pick(data: &[f64], map: &Option<Arc<Vec<usize>>>, i: usize) -> f64 {
    match map {
        Some(m) => data[m[i]],
        None => data[i],
    }
}

fn reduce_to(g: &[f64], map: &Option<Arc<Vec<usize>>>, len: usize, scale: impl Fn(usize) -> f64) -> Vec<f64> {
    match map {
        None => (0..len).map(|i| g[i] * scale(i)).collect(),
        Some(m) => {
            let mut out = vec![0.0; len];
            for (i, &j) in m.iter().enumerate() {
                out[j] += g[i] * scale(i);
            }
            out
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// C += A·B for row-major A [p,q], B [q,r].
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// dA += dC·Bᵀ for dC [p,r], B [q,r].
fn gemm_acc_bt(dc: &[f64], b: &[f64], da: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &dc[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            da[i * q + k] += s;
        }
    }
}

/// dB += Aᵀ·dC for A [p,q], dC [p,r].
fn gemm_acc_at(a: &[f64], dc: &[f64], db: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &dc[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let drow = &mut db[k * r..(k + 1) * r];
            for (d, g) in drow.iter_mut().zip(grow) {
                *d += aik * g;
            }
        }
    }
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        partials: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let shape = broadcast_shape(name, self.shape(), other.shape())?;
        let amap = (self.shape() != shape.as_slice()).then(|| Arc::new(index_map(self.shape(), &shape)));
        let bmap = (other.shape() != shape.as_slice()).then(|| Arc::new(index_map(other.shape(), &shape)));
        let (a, b) = (self.data(), other.data());
        let data: Vec<f64> = (0..numel(&shape))
            .map(|i| {
                let x = pick(a, &amap, i);
                let y = pick(b, &bmap, i);
                f(x, y)
            })
            .collect();
        let (alen, blen) = (self.numel(), other.numel());
        Tensor::from_op(name, shape, data, vec![self.clone(), other.clone()], move |ctx, bufs| {
            let a = ctx.parents[0].data();
            let b = ctx.parents[1].data();
            let pair = |i: usize| {
                let x = pick(a, &amap, i);
                let y = pick(b, &bmap, i);
                partials(x, y)
            };
            let ga = ctx.parents[0]
                .requires_grad()
                .then(|| reduce_to(ctx.grad, &amap, alen, |i| pair(i).0));
            let gb = ctx.parents[1]
                .requires_grad()
                .then(|| reduce_to(ctx.grad, &bmap, blen, |i| pair(i).1));
            add_into(&mut bufs[0], ga);
            add_into(&mut bufs[1], gb);
        })
    }

    fn unary(&self, name: &'static str, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(name, self.shape().to_vec(), data, vec![self.clone()], move |ctx, bufs| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x.iter().zip(ctx.output))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            add_into(&mut bufs[0], Some(g));
        })
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _| (1.0, -1.0))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |x, y| (y, x))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |ctx, bufs| {
            add_into(&mut bufs[0], Some(ctx.grad.iter().map(|g| g * c).collect()));
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, vec![self.clone()], |ctx, bufs| {
            add_into(&mut bufs[0], Some(ctx.grad.to_vec()));
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// x·σ(x)
    pub fn silu(&self) -> Result<Tensor> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// ln σ(x), evaluated without overflow for large |x|.
    pub fn log_sigmoid(&self) -> Result<Tensor> {
        self.unary("log_sigmoid", log_sigmoid, |x, _| sigmoid(-x))
    }

    /// ln(max(x, floor)); the gradient is zero where the floor applies.
    pub fn ln_clamped(&self, floor: f64) -> Result<Tensor> {
        if floor <= 0.0 {
            return Err(Error::contract("ln_clamped", "floor must be positive"));
        }
        let data = self.data().iter().map(|&x| x.max(floor).ln()).collect();
        Tensor::from_op("ln_clamped", self.shape().to_vec(), data, vec![self.clone()], move |ctx, bufs| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > floor { g / x } else { 0.0 })
                .collect();
            add_into(&mut bufs[0], Some(g));
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum_all", Vec::new(), vec![s], vec![self.clone()], move |ctx, bufs| {
            add_into(&mut bufs[0], Some(vec![ctx.grad[0]; n]));
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::contract("mean_all", "empty tensor"));
        }
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op("mean_all", Vec::new(), vec![s / n as f64], vec![self.clone()], move |ctx, bufs| {
            add_into(&mut bufs[0], Some(vec![ctx.grad[0] / n as f64; n]));
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |ctx, bufs| {
            add_into(&mut bufs[0], Some(ctx.grad.to_vec()));
        })
    }

    /// Batched matrix product `[…,p,q] · […,q,r] -> […,p,r]`; batch axes
    /// broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ar, br) = (self.rank(), other.rank());
        let (p, q) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (q2, r) = (other.shape()[br - 2], other.shape()[br - 1]);
        if q != q2 {
            return Err(mismatch());
        }
        let abatch = &self.shape()[..ar - 2];
        let bbatch = &other.shape()[..br - 2];
        let batch = broadcast_shape("matmul", abatch, bbatch).map_err(|_| mismatch())?;
        let amap = Arc::new(index_map(abatch, &batch));
        let bmap = Arc::new(index_map(bbatch, &batch));
        let nb = numel(&batch);
        let (a, b) = (self.data(), other.data());
        let mut data = vec![0.0; nb * p * r];
        for ob in 0..nb {
            let (ai, bi) = (amap[ob], bmap[ob]);
            gemm_acc(
                &a[ai * p * q..(ai + 1) * p * q],
                &b[bi * q * r..(bi + 1) * q * r],
                &mut data[ob * p * r..(ob + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let mut shape = batch;
        shape.extend([p, r]);
        Tensor::from_op("matmul", shape, data, vec![self.clone(), other.clone()], move |ctx, bufs| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let mut ga = ctx.parents[0].requires_grad().then(|| vec![0.0; a.len()]);
            let mut gb = ctx.parents[1].requires_grad().then(|| vec![0.0; b.len()]);
            for ob in 0..nb {
                let (ai, bi) = (amap[ob], bmap[ob]);
                let g = &ctx.grad[ob * p * r..(ob + 1) * p * r];
                if let Some(ga) = ga.as_mut() {
                    gemm_acc_bt(g, &b[bi * q * r..(bi + 1) * q * r], &mut ga[ai * p * q..(ai + 1) * p * q], p, q, r);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm_acc_at(&a[ai * p * q..(ai + 1) * p * q], g, &mut gb[bi * q * r..(bi + 1) * q * r], p, q, r);
                }
            }
            if adjoint_fault() {
                if let Some(ga) = ga.as_mut() {
                    ga.iter_mut().for_each(|v| *v += 1e-2);
                }
            }
            add_into(&mut bufs[0], ga);
            add_into(&mut bufs[1], gb);
        })
    }

    /// Depthwise causal convolution over positions of a `[T,d]` sequence:
    /// `out[t,c] = bias[c] + Σ_j kernel[j,c]·x[t-(k-1)+j, c]`, with
    /// positions before the start read as zero.
    pub fn causal_conv1d(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract("causal_conv1d", format!("input must be [T,d], got {:?}", self.shape())));
        }
        let (t_len, d) = (self.shape()[0], self.shape()[1]);
        if kernel.rank() != 2 || kernel.shape()[0] == 0 {
            return Err(Error::contract(
                "causal_conv1d",
                format!("kernel must be [k>=1, d], got {:?}", kernel.shape()),
            ));
        }
        let k = kernel.shape()[0];
        if kernel.shape()[1] != d || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let (x, w, bv) = (self.data(), kernel.data(), bias.data());
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let row = &mut out[t * d..(t + 1) * d];
            row.copy_from_slice(bv);
            for j in 0..k {
                let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                for c in 0..d {
                    row[c] += w[j * d + c] * x[s * d + c];
                }
            }
        }
        Tensor::from_op(
            "causal_conv1d",
            vec![t_len, d],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |ctx, bufs| {
                let (x, w) = (ctx.parents[0].data(), ctx.parents[1].data());
                let g = ctx.grad;
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; d];
                for t in 0..t_len {
                    for c in 0..d {
                        gb[c] += g[t * d + c];
                    }
                    for j in 0..k {
                        let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                        for c in 0..d {
                            gx[s * d + c] += g[t * d + c] * w[j * d + c];
                            gw[j * d + c] += g[t * d + c] * x[s * d + c];
                        }
                    }
                }
                add_into(&mut bufs[0], Some(gx));
                add_into(&mut bufs[1], Some(gw));
                add_into(&mut bufs[2], Some(gb));
            },
        )
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let c = self.last_dim();
        if c == 0 {
            return Err(Error::contract("softmax_lastdim", "last axis is empty"));
        }
        let mut out = self.to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Tensor::from_op("softmax_lastdim", self.shape().to_vec(), out, vec![self.clone()], move |ctx, bufs| {
            let mut gx = vec![0.0; ctx.grad.len()];
            for ((gx, g), y) in gx.chunks_mut(c).zip(ctx.grad.chunks(c)).zip(ctx.output.chunks(c)) {
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                for i in 0..c {
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
            add_into(&mut bufs[0], Some(gx));
        })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::contract("concat", "no operands"))?;
        if axis >= first.rank() {
            return Err(Error::contract("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (t, &w) in tensors.iter().zip(&widths) {
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
        Tensor::from_op("concat", shape, data, tensors.to_vec(), move |ctx, bufs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (p, &w) in ctx.parents.iter().zip(&widths) {
                if p.requires_grad() {
                    let mut g = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let base = o * total + offset;
                        g.extend_from_slice(&ctx.grad[base..base + w]);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            for (buf, g) in bufs.iter_mut().zip(grads) {
                add_into(buf, g);
            }
        })
    }

    /// Feature-axis concatenation.
    pub fn concat_lastdim(tensors: &[Tensor]) -> Result<Tensor> {
        let axis = tensors
            .first()
            .map(|t| t.rank().saturating_sub(1))
            .ok_or_else(|| Error::contract("concat_lastdim", "no operands"))?;
        Tensor::concat(tensors, axis)
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::contract(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("narrow", shape, data, vec![self.clone()], move |ctx, bufs| {
            let Some(g) = bufs[0].as_mut() else { return };
            for o in 0..outer {
                let base = o * full + start * inner;
                let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                for (a, b) in g[base..base + len * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
        })
    }

    /// Rows of the first axis picked by `indices` (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::contract("gather_rows", "scalar has no rows"));
        }
        let rows = self.shape()[0];
        let width: usize = self.shape()[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract("gather_rows", format!("row {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        Tensor::from_op("gather_rows", shape, data, vec![self.clone()], move |ctx, bufs| {
            let Some(g) = bufs[0].as_mut() else { return };
            for (o, &i) in idx.iter().enumerate() {
                for c in 0..width {
                    g[i * width + c] += ctx.grad[o * width + c];
                }
            }
        })
    }

    /// Arithmetic mean of the selected rows of a `[T,d]` tensor.
    pub fn mean_over_positions(&self, positions: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(
                "mean_over_positions",
                format!("input must be [T,d], got {:?}", self.shape()),
            ));
        }
        if positions.is_empty() {
            return Err(Error::contract("mean_over_positions", "empty position mask"));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = positions.iter().find(|&&p| p >= rows) {
            return Err(Error::contract(
                "mean_over_positions",
                format!("position {bad} out of range for {rows} rows"),
            ));
        }
        let count = positions.len() as f64;
        let mut out = vec![0.0; d];
        for &p in positions {
            for c in 0..d {
                out[c] += self.data()[p * d + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= count);
        let pos = positions.to_vec();
        Tensor::from_op("mean_over_positions", vec![d], out, vec![self.clone()], move |ctx, bufs| {
            let Some(g) = bufs[0].as_mut() else { return };
            for &p in &pos {
                for c in 0..d {
                    g[p * d + c] += ctx.grad[c] / count;
                }
            }
        })
    }
}

fn add_into(buf: &mut Option<Vec<f64>>, g: Option<Vec<f64>>) {
    if let (Some(buf), Some(g)) = (buf.as_mut(), g) {
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check, ParamId};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = numel(shape);
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += a[i * q + k] * b[k * r + j];
                }
                c[i * r + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_projector() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
        let proj = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let v = t(&[2, 1], &[5.0, 7.0]);
        assert_eq!(proj.matmul(&v).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 2], &[0.0; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (p, q, r) in [(3, 4, 2), (1, 1, 1), (8, 8, 8), (5, 2, 7)] {
            let a = random(&mut rng, &[p, q]);
            let b = random(&mut rng, &[q, r]);
            let c = a.matmul(&b).unwrap();
            let oracle = naive_matmul(a.data(), b.data(), p, q, r);
            for (x, y) in c.data().iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[3, 2, 4]);
        let b = random(&mut rng, &[4, 5]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for i in 0..3 {
            let oracle = naive_matmul(&a.data()[i * 8..(i + 1) * 8], b.data(), 2, 4, 5);
            assert_eq!(&c.data()[i * 10..(i + 1) * 10], oracle.as_slice());
        }
        let w = Tensor::param(ParamId(0), &[4, 5], b.to_vec()).unwrap();
        let err = grad_check(|w| a.matmul(w)?.tanh()?.sum_all(), &w, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.causal_conv1d(&t(&[1, 2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_sliding_sum() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let y = x.causal_conv1d(&t(&[2, 1], &[1.0, 1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_kernel_longer_than_sequence() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        let y = x.causal_conv1d(&t(&[4, 1], &[1.0, 10.0, 100.0, 1000.0]), &t(&[1], &[0.5])).unwrap();
        assert_eq!(y.data(), &[1000.5, 100.0 + 2000.0 + 0.5]);
        assert!(x.causal_conv1d(&Tensor::zeros(&[0, 1]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[7, 3]);
        let k = random(&mut rng, &[3, 3]);
        let b = random(&mut rng, &[3]);
        let y = x.causal_conv1d(&k, &b).unwrap();
        for t0 in 0..7 {
            let mut xd = x.to_vec();
            for v in xd[(t0 + 1) * 3..].iter_mut() {
                *v += 9.0;
            }
            let y2 = Tensor::new(&[7, 3], xd).unwrap().causal_conv1d(&k, &b).unwrap();
            assert_eq!(&y.data()[..(t0 + 1) * 3], &y2.data()[..(t0 + 1) * 3]);
        }
    }

    #[test]
    fn softmax_examples() {
        let u = t(&[3], &[0.0, 0.0, 0.0]).softmax_lastdim().unwrap();
        u.data().iter().for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
        let h = t(&[3], &[2f64.ln(), 0.0, 0.0]).softmax_lastdim().unwrap();
        for (x, y) in h.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((x - y).abs() < 1e-15);
        }
        let big = t(&[3], &[1000.0, 0.0, 0.0]).softmax_lastdim().unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn elementwise_examples() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).mean_over_positions(&[0, 1]).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0]);
        assert!(t(&[2, 2], &[0.0; 4]).mean_over_positions(&[]).is_err());
        let x = t(&[4, 2], &[1.0; 8]);
        let c = Tensor::concat_lastdim(&[x.clone(), x.clone(), x]).unwrap();
        assert_eq!(c.shape(), &[4, 6]);
        assert_eq!(t(&[1], &[0.0]).silu().unwrap().data(), &[0.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::param(ParamId(1), &[3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.data()[4], 5.2);
        let g = backward(&y.sum_all().unwrap()).unwrap();
        assert_eq!(g.get(ParamId(1)).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert!(x.add(&t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn gradients_of_each_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random(&mut rng, &[3, 4]);
        let other = random(&mut rng, &[3, 4]);
        let p = Tensor::param(ParamId(0), &[3, 4], x0.to_vec()).unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> = vec![
            ("add", Box::new(|x| x.add(&other)?.mul(x)?.sum_all())),
            ("sub", Box::new(|x| other.sub(x)?.tanh()?.sum_all())),
            ("mul", Box::new(|x| x.mul(&other)?.sum_all())),
            ("exp", Box::new(|x| x.exp()?.mean_all())),
            ("tanh", Box::new(|x| x.tanh()?.sum_all())),
            ("sigmoid", Box::new(|x| x.sigmoid()?.mul(&other)?.sum_all())),
            ("silu", Box::new(|x| x.silu()?.mul(&other)?.sum_all())),
            ("log_sigmoid", Box::new(|x| x.log_sigmoid()?.sum_all())),
            ("softmax", Box::new(|x| x.softmax_lastdim()?.mul(&other)?.sum_all())),
            ("ln", Box::new(|x| x.softmax_lastdim()?.ln_clamped(1e-12)?.mul(&other)?.sum_all())),
            ("concat", Box::new(|x| Tensor::concat(&[x.clone(), other.clone(), x.clone()], 1)?.tanh()?.sum_all())),
            ("narrow", Box::new(|x| x.narrow(1, 1, 2)?.mul(&x.narrow(1, 2, 2)?)?.sum_all())),
            ("gather", Box::new(|x| x.gather_rows(&[2, 0, 2])?.tanh()?.sum_all())),
            ("mean_pos", Box::new(|x| x.mean_over_positions(&[0, 2])?.exp()?.sum_all())),
            ("reshape", Box::new(|x| x.reshape(&[4, 3])?.matmul(&other)?.tanh()?.sum_all())),
            ("conv", Box::new(|x| x.causal_conv1d(&other.narrow(0, 0, 2)?, &other.narrow(0, 2, 1)?.reshape(&[4])?)?.tanh()?.sum_all())),
            ("conv_kernel", Box::new(|x| other.causal_conv1d(x, &other.narrow(0, 0, 1)?.reshape(&[4])?)?.sigmoid()?.sum_all())),
        ];
        for (name, f) in cases {
            let err = grad_check(&*f, &p, 1e-5).unwrap();
            assert!(err <= 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let y = t(&[3], &[-800.0, 0.0, 800.0]).log_sigmoid().unwrap();
        assert_eq!(y.data()[0], -800.0);
        assert!((y.data()[1] + 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 3), 1..6),
            shift in -50.0f64..50.0,
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.concat();
            let x = Tensor::new(&[n, 3], flat.clone()).unwrap();
            let y = x.softmax_lastdim().unwrap();
            for row in y.data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
            let shifted = Tensor::new(&[n, 3], flat.iter().map(|v| v + shift).collect()).unwrap();
            let y2 = shifted.softmax_lastdim().unwrap();
            for (a, b) in y.data().iter().zip(y2.data()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
