//! Slice-level compute kernels shared by the differentiable ops and the
//! cache-based decode path.

/// `c = a · b` (+ `c` when `accumulate`), where `a` is `m×k` and `b` is `k×n`,
/// with optional transposition of either operand's storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // Few rows (decode): row-wise axpy beats packing B.
    if m <= 4 && !a_transposed && !b_transposed {
        if !accumulate {
            c.fill(0.0);
        }
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                for (cv, &bv) in ci.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
        return;
    }
    // Row/column strides of the logical operands.
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of one grouped-query attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl AttnDims {
    /// Query head `h` reads key/value head `h mod n_kv_heads`, i.e. the
    /// key/value groups are tiled across the query heads.
    #[inline]
    pub fn kv_head(&self, h: usize) -> usize {
        h % self.n_kv_heads
    }
}

/// Causal attention for one sequence.
///
/// `q` is `(tq, n_heads, d_head)`; `keys[g]` / `values[g]` are `(tk, d_head)`
/// for key/value head `g`. Query row `i` sits at absolute position
/// `q_offset + i` and attends to keys `0..=q_offset + i`. `out` receives
/// `(tq, n_heads, d_head)`; `probs`, when given, receives the attention
/// weights as `(n_heads, tq, tk)` with zeros above the diagonal.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention(
    dims: AttnDims,
    q: &[f32],
    tq: usize,
    keys: &[&[f32]],
    values: &[&[f32]],
    tk: usize,
    q_offset: usize,
    out: &mut [f32],
    mut probs: Option<&mut [f32]>,
) {
    let AttnDims { n_heads, d_head, .. } = dims;
    let scale = 1.0 / (d_head as f32).sqrt();
    let mut scores = vec![0.0f32; tk];
    for h in 0..n_heads {
        let g = dims.kv_head(h);
        let k = keys[g];
        let v = values[g];
        for i in 0..tq {
            let visible = (q_offset + i + 1).min(tk);
            let qi = &q[(i * n_heads + h) * d_head..][..d_head];
            let mut max = f32::NEG_INFINITY;
            for (j, s) in scores[..visible].iter_mut().enumerate() {
                *s = dot(qi, &k[j * d_head..(j + 1) * d_head]) * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in scores[..visible].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = 1.0 / sum;
            let oi = &mut out[(i * n_heads + h) * d_head..][..d_head];
            oi.fill(0.0);
            for (j, s) in scores[..visible].iter_mut().enumerate() {
                *s *= inv;
                let vj = &v[j * d_head..(j + 1) * d_head];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += *s * x;
                }
            }
            if let Some(p) = probs.as_deref_mut() {
                let row = &mut p[(h * tq + i) * tk..][..tk];
                row[..visible].copy_from_slice(&scores[..visible]);
                row[visible..].fill(0.0);
            }
        }
    }
}

/// Selective scan over one sequence, continuing from `state`.
///
/// Channel `c` of the `channels`-wide input belongs to head
/// `c / (channels / n_heads)`; `b` and `c_mat` hold one `d_state` vector per
/// head and step. The recurrence is
/// `h_t = exp(Δ_t·A) ⊙ h_{t-1} + Δ_t·B_t·x_t`, `y_t = C_t · h_t`.
/// When `history` is given it receives `h_t` for every step as
/// `(t, channels, d_state)`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    x: &[f32],
    delta: &[f32],
    a: &[f32],
    b: &[f32],
    c_mat: &[f32],
    t_len: usize,
    channels: usize,
    d_state: usize,
    n_heads: usize,
    state: &mut [f32],
    y: &mut [f32],
    mut history: Option<&mut [f32]>,
) {
    let per_head = channels / n_heads;
    let hn = n_heads * d_state;
    for t in 0..t_len {
        let bt = &b[t * hn..(t + 1) * hn];
        let ct = &c_mat[t * hn..(t + 1) * hn];
        for ch in 0..channels {
            let head = ch / per_head;
            let dt = delta[t * channels + ch];
            let xin = dt * x[t * channels + ch];
            let a_row = &a[ch * d_state..(ch + 1) * d_state];
            let b_row = &bt[head * d_state..(head + 1) * d_state];
            let c_row = &ct[head * d_state..(head + 1) * d_state];
            let h = &mut state[ch * d_state..(ch + 1) * d_state];
            let mut acc = 0.0;
            for n in 0..d_state {
                let decay = (dt * a_row[n]).exp();
                h[n] = decay * h[n] + xin * b_row[n];
                acc += c_row[n] * h[n];
            }
            y[t * channels + ch] = acc;
        }
        if let Some(hist) = history.as_deref_mut() {
            hist[t * channels * d_state..(t + 1) * channels * d_state].copy_from_slice(state);
        }
    }
}

/// Depthwise causal convolution over one sequence of `channels`-wide rows.
/// `prefix` holds the `width - 1` rows preceding `x` (zeros at sequence
/// start). Tap `width - 1` multiplies the current row.
pub fn causal_conv(
    x: &[f32],
    prefix: &[f32],
    w: &[f32],
    bias: &[f32],
    t_len: usize,
    channels: usize,
    width: usize,
    y: &mut [f32],
) {
    let p = width - 1;
    let row = |s: isize, ch: usize| -> f32 {
        if s < 0 {
            prefix[((p as isize + s) as usize) * channels + ch]
        } else {
            x[s as usize * channels + ch]
        }
    };
    for t in 0..t_len {
        for ch in 0..channels {
            let mut acc = bias[ch];
            for k in 0..width {
                let s = t as isize + k as isize - p as isize;
                acc += w[ch * width + k] * row(s, ch);
            }
            y[t * channels + ch] = acc;
        }
    }
}
