use super::kernels::{self, AttnDims};
use super::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("op produced consistent shape")
}

/// Splits a `(B, T, C)` or `(T, C)` shape.
fn seq_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, c] => Ok((1, t, c)),
        [b, t, c] => Ok((b, t, c)),
        _ => Err(Error::invalid(op, format!("expected (T, C) or (B, T, C), got {shape:?}"))),
    }
}

/// `b` broadcasts over `a` when its shape is a suffix of `a`'s shape.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn reduce_broadcast(g: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out
}

pub enum CrossEntropyTarget {
    /// Class index per row, with optional per-row weights (e.g. an answer mask).
    Indices(Vec<u32>, Option<Vec<f32>>),
    /// Full target distribution per row, same shape as the logits.
    Probs(Tensor),
}

pub struct ScanOutput {
    pub y: Var,
    /// Hidden state after the last step, `(B, channels, d_state)`.
    pub state: Tensor,
}

fn softmax_rows(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn log_softmax_rows(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Softmax over the last axis, outside any tape.
pub fn softmax_last(t: &Tensor) -> Tensor {
    tensor(t.shape(), softmax_rows(t.data(), t.last_dim()))
}

/// Log-softmax over the last axis, outside any tape.
pub fn log_softmax_last(t: &Tensor) -> Tensor {
    tensor(t.shape(), log_softmax_rows(t.data(), t.last_dim()))
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn rope_tables(t_len: usize, d_head: usize, offset: usize, base: f32) -> (Vec<f32>, Vec<f32>) {
    let half = d_head / 2;
    let mut cos = vec![0.0; t_len * half];
    let mut sin = vec![0.0; t_len * half];
    for t in 0..t_len {
        let pos = (offset + t) as f64;
        for i in 0..half {
            let freq = (base as f64).powf(-2.0 * i as f64 / d_head as f64);
            let (s, c) = (pos * freq).sin_cos();
            cos[t * half + i] = c as f32;
            sin[t * half + i] = s as f32;
        }
    }
    (cos, sin)
}

/// Rotates pairs `(i, i + d_head/2)` of every head; `sign = -1` applies the
/// inverse rotation.
#[allow(clippy::too_many_arguments)]
fn rope_apply(
    x: &[f32],
    b: usize,
    t_len: usize,
    n_heads: usize,
    d_head: usize,
    cos: &[f32],
    sin: &[f32],
    sign: f32,
) -> Vec<f32> {
    let half = d_head / 2;
    let mut out = x.to_vec();
    for bi in 0..b {
        for t in 0..t_len {
            for h in 0..n_heads {
                let base = ((bi * t_len + t) * n_heads + h) * d_head;
                for i in 0..half {
                    let c = cos[t * half + i];
                    let s = sin[t * half + i] * sign;
                    let x0 = x[base + i];
                    let x1 = x[base + half + i];
                    out[base + i] = x0 * c - x1 * s;
                    out[base + half + i] = x0 * s + x1 * c;
                }
            }
        }
    }
    out
}

/// `(B, T, G·D)` → `(B, G, T, D)`.
fn split_heads(x: &[f32], b: usize, t: usize, g: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ti in 0..t {
            for gi in 0..g {
                let src = ((bi * t + ti) * g + gi) * d;
                let dst = ((bi * g + gi) * t + ti) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// `(B, G, T, D)` → `(B, T, G·D)`.
fn merge_heads(x: &[f32], b: usize, t: usize, g: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for gi in 0..g {
            for ti in 0..t {
                let src = ((bi * g + gi) * t + ti) * d;
                let dst = ((bi * t + ti) * g + gi) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

impl Tape {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f32) -> f32,
        df: fn(f32, f32) -> f32,
    ) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = tensor(xv.shape(), data);
        self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx
                    .grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .zip(ctx.output.data())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, |x, _| 1.0 / x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let xv = self.value(x);
        let out = tensor(xv.shape(), xv.data().iter().map(|v| v * s).collect());
        self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| vec![Some(ctx.grad.iter().map(|g| g * s).collect())]),
        )
    }

    /// `a + b`, where `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let n = bv.numel();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(bv.data()).for_each(|(x, y)| *x += y);
        }
        let out = tensor(av.shape(), data);
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |ctx: &BackwardCtx| {
                let ga = ctx.needs(0).then(|| ctx.grad.to_vec());
                let gb = ctx.needs(1).then(|| reduce_broadcast(ctx.grad, n));
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise `a ⊙ b` with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let n = bv.numel();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(bv.data()).for_each(|(x, y)| *x *= y);
        }
        let out = tensor(av.shape(), data);
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |ctx: &BackwardCtx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs(0).then(|| {
                    let mut g = ctx.grad.to_vec();
                    for chunk in g.chunks_mut(n) {
                        chunk.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
                    }
                    g
                });
                let gb = ctx.needs(1).then(|| {
                    let prod: Vec<f32> = ctx.grad.iter().zip(av).map(|(g, a)| g * a).collect();
                    reduce_broadcast(&prod, n)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `(..., k) · (k, n) → (..., n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.ndim() != 2 || av.ndim() == 0 || av.last_dim() != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let k = bv.shape()[0];
        let n = bv.shape()[1];
        let m = av.numel() / k.max(1);
        let mut data = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut data, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = tensor(&shape, data);
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |ctx: &BackwardCtx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs(0).then(|| {
                    let mut g = vec![0.0; m * k];
                    kernels::gemm(m, n, k, ctx.grad, false, bv, true, &mut g, false);
                    g
                });
                let gb = ctx.needs(1).then(|| {
                    let mut g = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av, true, ctx.grad, false, &mut g, false);
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let n = xv.numel();
        self.push_op(
            Tensor::scalar(s as f32),
            &[x],
            Box::new(move |ctx: &BackwardCtx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_last(self.value(x));
        let d = out.last_dim();
        self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| {
                let y = ctx.output.data();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(ctx.grad.chunks(d)) {
                    let s: f32 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        gr[i] = yr[i] * (dr[i] - s);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = log_softmax_last(self.value(x));
        let d = out.last_dim();
        self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| {
                let y = ctx.output.data();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(ctx.grad.chunks(d)) {
                    let s: f32 = dr.iter().sum();
                    for i in 0..d {
                        gr[i] = dr[i] - yr[i].exp() * s;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// RMS normalization over the last axis with a learned per-feature gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(Error::shape("rms_norm", xv.shape(), gv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter_mut().zip(gv.data()).for_each(|(v, g)| *v *= r * g);
        }
        let out = tensor(xv.shape(), data);
        Ok(self.push_op(
            out,
            &[x, gain],
            Box::new(move |ctx: &BackwardCtx| {
                let (xv, gv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = ctx.needs(0).then(|| vec![0.0; xv.len()]);
                let mut gg = ctx.needs(1).then(|| vec![0.0; d]);
                for (row, (xr, dr)) in xv.chunks(d).zip(ctx.grad.chunks(d)).enumerate() {
                    let ms = xr.iter().map(|v| v * v).sum::<f32>() / d as f32;
                    let r = 1.0 / (ms + eps).sqrt();
                    if let Some(gg) = gg.as_mut() {
                        for i in 0..d {
                            gg[i] += dr[i] * xr[i] * r;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let s: f32 = (0..d).map(|i| dr[i] * gv[i] * xr[i]).sum();
                        let c = r * r * r * s / d as f32;
                        let out = &mut gx[row * d..(row + 1) * d];
                        for i in 0..d {
                            out[i] = r * gv[i] * dr[i] - xr[i] * c;
                        }
                    }
                }
                vec![gx, gg]
            }),
        ))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let out = xv.narrow_last(start, len)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| {
                let rows = ctx.grad.len() / len.max(1);
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    g[r * d + start..r * d + start + len]
                        .copy_from_slice(&ctx.grad[r * len..(r + 1) * len]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let out = tensor(&shape, data);
        Ok(self.push_op(
            out,
            xs,
            Box::new(move |ctx: &BackwardCtx| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if ctx.needs(i) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&ctx.grad[r * total + offset..r * total + offset + w]);
                        }
                        grads.push(Some(g));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Rows of `table` (`(V, d)`) selected by `ids`; output shape is
    /// `batch_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], batch_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::invalid("embedding", format!("table must be 2-D, got {:?}", tv.shape())));
        }
        if batch_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", batch_shape, &[ids.len()]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            data.extend_from_slice(&tv.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let mut shape = batch_shape.to_vec();
        shape.push(d);
        let out = tensor(&shape, data);
        let ids = ids.to_vec();
        Ok(self.push_op(
            out,
            &[table],
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    let row = &mut g[id as usize * d..(id as usize + 1) * d];
                    row.iter_mut()
                        .zip(&ctx.grad[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean cross-entropy between softmax(logits) and the target over rows of
    /// the last axis. Index targets are weighted by the optional row weights
    /// and normalized by their sum.
    pub fn cross_entropy(&mut self, logits: Var, target: CrossEntropyTarget) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        let logp = log_softmax_rows(lv.data(), v);
        let (loss, dlogits) = match target {
            CrossEntropyTarget::Indices(targets, weights) => {
                if targets.len() != rows {
                    return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
                }
                let weights = weights.unwrap_or_else(|| vec![1.0; rows]);
                if weights.len() != rows {
                    return Err(Error::shape("cross_entropy", lv.shape(), &[weights.len()]));
                }
                let total: f32 = weights.iter().sum();
                if total <= 0.0 {
                    return Err(Error::invalid("cross_entropy", "row weights sum to zero"));
                }
                let mut loss = 0.0f64;
                let mut d = vec![0.0; rows * v];
                for r in 0..rows {
                    let t = targets[r] as usize;
                    if t >= v {
                        return Err(Error::TokenOutOfRange { token: targets[r], vocab: v });
                    }
                    let w = weights[r] / total;
                    if w == 0.0 {
                        continue;
                    }
                    loss -= (w * logp[r * v + t]) as f64;
                    for i in 0..v {
                        d[r * v + i] = w * logp[r * v + i].exp();
                    }
                    d[r * v + t] -= w;
                }
                (loss as f32, d)
            }
            CrossEntropyTarget::Probs(q) => {
                if q.shape() != lv.shape() {
                    return Err(Error::shape("cross_entropy", lv.shape(), q.shape()));
                }
                let inv = 1.0 / rows as f32;
                let mut loss = 0.0f64;
                let mut d = vec![0.0; rows * v];
                for r in 0..rows {
                    let qr = &q.data()[r * v..(r + 1) * v];
                    let mass: f32 = qr.iter().sum();
                    for i in 0..v {
                        loss -= (inv * qr[i] * logp[r * v + i]) as f64;
                        d[r * v + i] = inv * (mass * logp[r * v + i].exp() - qr[i]);
                    }
                }
                (loss as f32, d)
            }
        };
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad[0];
                vec![Some(dlogits.iter().map(|d| d * g).collect())]
            }),
        ))
    }

    /// Rotary position embedding over `(B, T, n_heads·d_head)` (or `(T, ·)`),
    /// with the first row at absolute position `offset`.
    pub fn rope(&mut self, x: Var, n_heads: usize, d_head: usize, offset: usize, base: f32) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, c) = seq_dims("rope", xv.shape())?;
        if c != n_heads * d_head || d_head % 2 != 0 {
            return Err(Error::invalid(
                "rope",
                format!("width {c} does not split into {n_heads} heads of even size {d_head}"),
            ));
        }
        let (cos, sin) = rope_tables(t, d_head, offset, base);
        let data = rope_apply(xv.data(), b, t, n_heads, d_head, &cos, &sin, 1.0);
        let out = tensor(xv.shape(), data);
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| {
                vec![Some(rope_apply(ctx.grad, b, t, n_heads, d_head, &cos, &sin, -1.0))]
            }),
        ))
    }

    /// Causal grouped-query attention over full sequences.
    /// `q`: `(B, T, n_heads·d_head)`, `k`/`v`: `(B, T, n_kv_heads·d_head)`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let AttnDims { n_heads, n_kv_heads, d_head } = dims;
        let (b, t, cq) = seq_dims("causal_attention", self.shape(q))?;
        let (bk, tk, ck) = seq_dims("causal_attention", self.shape(k))?;
        if cq != n_heads * d_head || ck != n_kv_heads * d_head || bk != b || tk != t {
            return Err(Error::shape("causal_attention", self.shape(q), self.shape(k)));
        }
        if self.shape(v) != self.shape(k) {
            return Err(Error::shape("causal_attention", self.shape(k), self.shape(v)));
        }
        let recording = self.any_requires_grad(&[q, k, v]);
        let kh = split_heads(self.value(k).data(), b, t, n_kv_heads, d_head);
        let vh = split_heads(self.value(v).data(), b, t, n_kv_heads, d_head);
        let qd = self.value(q).data();
        let mut out = vec![0.0; b * t * cq];
        let mut probs = if recording { vec![0.0; b * n_heads * t * t] } else { Vec::new() };
        let head_len = t * d_head;
        for bi in 0..b {
            let keys: Vec<&[f32]> = (0..n_kv_heads)
                .map(|g| &kh[(bi * n_kv_heads + g) * head_len..][..head_len])
                .collect();
            let values: Vec<&[f32]> = (0..n_kv_heads)
                .map(|g| &vh[(bi * n_kv_heads + g) * head_len..][..head_len])
                .collect();
            let p = recording.then(|| &mut probs[bi * n_heads * t * t..(bi + 1) * n_heads * t * t]);
            kernels::causal_attention(
                dims,
                &qd[bi * t * cq..(bi + 1) * t * cq],
                t,
                &keys,
                &values,
                t,
                0,
                &mut out[bi * t * cq..(bi + 1) * t * cq],
                p,
            );
        }
        let shape = self.shape(q).to_vec();
        let out = tensor(&shape, out);
        if !recording {
            return Ok(self.push_op(out, &[q, k, v], Box::new(|_| unreachable!())));
        }
        Ok(self.push_op(
            out,
            &[q, k, v],
            Box::new(move |ctx: &BackwardCtx| {
                let qd = ctx.inputs[0].data();
                let scale = 1.0 / (d_head as f32).sqrt();
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kh.len()];
                let mut gv = vec![0.0; vh.len()];
                let mut dp = vec![0.0; t];
                for bi in 0..b {
                    for h in 0..n_heads {
                        let g = dims.kv_head(h);
                        let kv_base = (bi * n_kv_heads + g) * head_len;
                        for i in 0..t {
                            let prow = &probs[((bi * n_heads + h) * t + i) * t..][..i + 1];
                            let qo = (bi * t + i) * cq + h * d_head;
                            let dout = &ctx.grad[qo..qo + d_head];
                            for j in 0..=i {
                                let vj = &vh[kv_base + j * d_head..][..d_head];
                                dp[j] = kernels::dot(dout, vj);
                                let gvj = &mut gv[kv_base + j * d_head..][..d_head];
                                for (a, o) in gvj.iter_mut().zip(dout) {
                                    *a += prow[j] * o;
                                }
                            }
                            let s: f32 = (0..=i).map(|j| prow[j] * dp[j]).sum();
                            let qi = &qd[qo..qo + d_head];
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kh[kv_base + j * d_head..][..d_head];
                                for d in 0..d_head {
                                    gq[qo + d] += ds * kj[d];
                                }
                                let gkj = &mut gk[kv_base + j * d_head..][..d_head];
                                for d in 0..d_head {
                                    gkj[d] += ds * qi[d];
                                }
                            }
                        }
                    }
                }
                vec![
                    ctx.needs(0).then_some(gq),
                    ctx.needs(1).then(|| merge_heads(&gk, b, t, n_kv_heads, d_head)),
                    ctx.needs(2).then(|| merge_heads(&gv, b, t, n_kv_heads, d_head)),
                ]
            }),
        ))
    }

    /// Depthwise causal 1-D convolution of `(B, T, C)` inputs with kernel
    /// `w` (`(C, K)`) and `bias` (`(C)`), continuing from `prefix`
    /// (`(B, K-1, C)`, zeros when absent). Returns the output and the last
    /// `K-1` input rows, which continue the sequence in a later call.
    pub fn causal_conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        prefix: Option<&Tensor>,
    ) -> Result<(Var, Tensor)> {
        let (b, t, c) = seq_dims("causal_conv1d", self.shape(x))?;
        let wv = self.value(w);
        if wv.ndim() != 2 || wv.shape()[0] != c || wv.shape()[1] == 0 {
            return Err(Error::shape("causal_conv1d", self.shape(x), wv.shape()));
        }
        let width = wv.shape()[1];
        if self.shape(bias) != [c] {
            return Err(Error::shape("causal_conv1d", self.shape(x), self.shape(bias)));
        }
        let p = width - 1;
        let prefix = match prefix {
            Some(pre) => {
                if pre.shape() != [b, p, c] {
                    return Err(Error::shape("causal_conv1d", &[b, p, c], pre.shape()));
                }
                pre.clone()
            }
            None => Tensor::zeros(vec![b, p, c]),
        };
        let xd = self.value(x).data();
        let mut y = vec![0.0; b * t * c];
        let mut tail = Vec::with_capacity(b * p * c);
        for bi in 0..b {
            let xs = &xd[bi * t * c..(bi + 1) * t * c];
            let pre = &prefix.data()[bi * p * c..(bi + 1) * p * c];
            kernels::causal_conv(
                xs,
                pre,
                self.value(w).data(),
                self.value(bias).data(),
                t,
                c,
                width,
                &mut y[bi * t * c..(bi + 1) * t * c],
            );
            // Last p rows of prefix ++ x.
            for s in t..t + p {
                if s < p {
                    tail.extend_from_slice(&pre[s * c..(s + 1) * c]);
                } else {
                    tail.extend_from_slice(&xs[(s - p) * c..(s - p + 1) * c]);
                }
            }
        }
        let tail = Tensor::new(vec![b, p, c], tail)?;
        let shape = self.shape(x).to_vec();
        let out = tensor(&shape, y);
        let var = self.push_op(
            out,
            &[x, w, bias],
            Box::new(move |ctx: &BackwardCtx| {
                let xd = ctx.inputs[0].data();
                let wd = ctx.inputs[1].data();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; c * width];
                let mut gb = vec![0.0; c];
                for bi in 0..b {
                    let pre = &prefix.data()[bi * p * c..(bi + 1) * p * c];
                    for ti in 0..t {
                        for ch in 0..c {
                            let g = ctx.grad[(bi * t + ti) * c + ch];
                            gb[ch] += g;
                            for k in 0..width {
                                let s = ti as isize + k as isize - p as isize;
                                let xval = if s < 0 {
                                    pre[((p as isize + s) as usize) * c + ch]
                                } else {
                                    gx[(bi * t + s as usize) * c + ch] += g * wd[ch * width + k];
                                    xd[(bi * t + s as usize) * c + ch]
                                };
                                gw[ch * width + k] += g * xval;
                            }
                        }
                    }
                }
                vec![
                    ctx.needs(0).then_some(gx),
                    ctx.needs(1).then_some(gw),
                    ctx.needs(2).then_some(gb),
                ]
            }),
        );
        Ok((var, tail))
    }

    /// Selective state-space scan.
    ///
    /// `x`, `delta`: `(B, T, C)`; `a`: `(C, N)` continuous decay rates
    /// (negative); `b`, `c`: `(B, T, H·N)`, one `N`-vector per head, where
    /// channel `ch` belongs to head `ch / (C / H)`. `h0` is the starting state
    /// `(B, C, N)` (zeros when absent) and is treated as a constant.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        n_heads: usize,
        h0: Option<&Tensor>,
    ) -> Result<ScanOutput> {
        let (bs, t, ch) = seq_dims("selective_scan", self.shape(x))?;
        if self.shape(delta) != self.shape(x) {
            return Err(Error::shape("selective_scan", self.shape(x), self.shape(delta)));
        }
        let av = self.value(a);
        if av.ndim() != 2 || av.shape()[0] != ch {
            return Err(Error::shape("selective_scan", self.shape(x), av.shape()));
        }
        let n = av.shape()[1];
        if n_heads == 0 || ch % n_heads != 0 {
            return Err(Error::invalid(
                "selective_scan",
                format!("{ch} channels do not split into {n_heads} heads"),
            ));
        }
        let hn = n_heads * n;
        for v in [b, c] {
            let (b2, t2, w2) = seq_dims("selective_scan", self.shape(v))?;
            if (b2, t2, w2) != (bs, t, hn) {
                return Err(Error::shape("selective_scan", &[bs, t, hn], self.shape(v)));
            }
        }
        let h0 = match h0 {
            Some(h) => {
                if h.shape() != [bs, ch, n] {
                    return Err(Error::shape("selective_scan", &[bs, ch, n], h.shape()));
                }
                h.clone()
            }
            None => Tensor::zeros(vec![bs, ch, n]),
        };
        let recording = self.any_requires_grad(&[x, delta, a, b, c]);
        let mut state = h0.data().to_vec();
        let mut y = vec![0.0; bs * t * ch];
        let mut history = if recording { vec![0.0; bs * t * ch * n] } else { Vec::new() };
        {
            let (xd, dd, ad) = (self.value(x).data(), self.value(delta).data(), av.data());
            let (bd, cd) = (self.value(b).data(), self.value(c).data());
            for bi in 0..bs {
                let hist = recording.then(|| &mut history[bi * t * ch * n..(bi + 1) * t * ch * n]);
                kernels::selective_scan(
                    &xd[bi * t * ch..(bi + 1) * t * ch],
                    &dd[bi * t * ch..(bi + 1) * t * ch],
                    ad,
                    &bd[bi * t * hn..(bi + 1) * t * hn],
                    &cd[bi * t * hn..(bi + 1) * t * hn],
                    t,
                    ch,
                    n,
                    n_heads,
                    &mut state[bi * ch * n..(bi + 1) * ch * n],
                    &mut y[bi * t * ch..(bi + 1) * t * ch],
                    hist,
                );
            }
        }
        let final_state = Tensor::new(vec![bs, ch, n], state)?;
        let shape = self.shape(x).to_vec();
        let out = tensor(&shape, y);
        if !recording {
            let y = self.push_op(out, &[x, delta, a, b, c], Box::new(|_| unreachable!()));
            return Ok(ScanOutput { y, state: final_state });
        }
        let per_head = ch / n_heads;
        let y = self.push_op(
            out,
            &[x, delta, a, b, c],
            Box::new(move |ctx: &BackwardCtx| {
                let xd = ctx.inputs[0].data();
                let dd = ctx.inputs[1].data();
                let ad = ctx.inputs[2].data();
                let bd = ctx.inputs[3].data();
                let cd = ctx.inputs[4].data();
                let mut gx = vec![0.0; xd.len()];
                let mut gd = vec![0.0; dd.len()];
                let mut ga = vec![0.0; ad.len()];
                let mut gbm = vec![0.0; bd.len()];
                let mut gcm = vec![0.0; cd.len()];
                let mut dh = vec![0.0f32; ch * n];
                for bi in 0..bs {
                    dh.fill(0.0);
                    for ti in (0..t).rev() {
                        let row = bi * t + ti;
                        let h_cur = &history[row * ch * n..(row + 1) * ch * n];
                        let h_prev = if ti == 0 {
                            &h0.data()[bi * ch * n..(bi + 1) * ch * n]
                        } else {
                            &history[(row - 1) * ch * n..row * ch * n]
                        };
                        for c_i in 0..ch {
                            let head = c_i / per_head;
                            let dy = ctx.grad[row * ch + c_i];
                            let dt = dd[row * ch + c_i];
                            let xv = xd[row * ch + c_i];
                            let bc = row * hn + head * n;
                            let mut gdt = 0.0;
                            let mut gxv = 0.0;
                            for s in 0..n {
                                let k = c_i * n + s;
                                let decay = (dt * ad[k]).exp();
                                gcm[bc + s] += dy * h_cur[k];
                                let g = dh[k] + dy * cd[bc + s];
                                let g_decay = g * h_prev[k];
                                gdt += g_decay * decay * ad[k] + g * bd[bc + s] * xv;
                                ga[k] += g_decay * decay * dt;
                                gbm[bc + s] += g * dt * xv;
                                gxv += g * dt * bd[bc + s];
                                dh[k] = g * decay;
                            }
                            gd[row * ch + c_i] += gdt;
                            gx[row * ch + c_i] += gxv;
                        }
                    }
                }
                vec![
                    ctx.needs(0).then_some(gx),
                    ctx.needs(1).then_some(gd),
                    ctx.needs(2).then_some(ga),
                    ctx.needs(3).then_some(gbm),
                    ctx.needs(4).then_some(gcm),
                ]
            }),
        );
        Ok(ScanOutput { y, state: final_state })
    }
}
