//! Row-major f32 kernels for the toy transformer. Every reduction runs in a
//! fixed order, so results do not depend on how work is scheduled.

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c = a · b + beta · c` on strided row-major views; `a` is `[m, k]`,
/// `b` is `[k, n]`, `c` is `[m, n]`. Strides are `(row, column)`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    beta: f32,
    c: &mut [f32],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |s: (usize, usize), r: usize, cols: usize| (r - 1) * s.0 + (cols - 1) * s.1;
    assert!(k == 0 || (last(sa, m, k) < a.len() && last(sb, k, n) < b.len()));
    assert!(last(sc, m, n) < c.len());
    // SAFETY: the asserts keep every strided access inside the slices, and
    // `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// `x [rows, in] · wᵀ` with `w [out, in]`, giving `[rows, out]`.
pub fn linear(x: &[f32], w: &[f32], in_dim: usize, out_dim: usize) -> Vec<f32> {
    let rows = x.len() / in_dim;
    let mut y = vec![0.0f32; rows * out_dim];
    gemm(rows, in_dim, out_dim, x, (in_dim, 1), w, (1, in_dim), 0.0, &mut y, (out_dim, 1));
    y
}

/// Backward of [`linear`]: accumulates `dw += dyᵀ x` and returns `dx = dy w`.
pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    dw: &mut [f32],
    in_dim: usize,
    out_dim: usize,
) -> Vec<f32> {
    let rows = x.len() / in_dim;
    let mut dx = vec![0.0f32; x.len()];
    gemm(rows, out_dim, in_dim, dy, (out_dim, 1), w, (in_dim, 1), 0.0, &mut dx, (in_dim, 1));
    gemm(out_dim, rows, in_dim, dy, (1, out_dim), x, (in_dim, 1), 1.0, dw, (in_dim, 1));
    dx
}

/// RMS normalization per row. Returns the output and the per-row inverse RMS.
pub fn rmsnorm(x: &[f32], gain: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let d = gain.len();
    let mut y = vec![0.0f32; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = dot(xr, xr) / d as f32;
        let r = 1.0 / (ms + eps).sqrt();
        for ((yi, xi), gi) in yr.iter_mut().zip(xr).zip(gain) {
            *yi = xi * r * gi;
        }
        inv.push(r);
    }
    (y, inv)
}

/// Backward of [`rmsnorm`]; accumulates into `dgain` and returns `dx`.
pub fn rmsnorm_backward(x: &[f32], gain: &[f32], inv: &[f32], dy: &[f32], dgain: &mut [f32]) -> Vec<f32> {
    let d = gain.len();
    let mut dx = vec![0.0f32; x.len()];
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv)
    {
        let mut proj = 0.0f32;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * r;
            proj += dyr[j] * gain[j] * xr[j];
        }
        let c = r * r * r * proj / d as f32;
        for j in 0..d {
            dxr[j] = r * dyr[j] * gain[j] - c * xr[j];
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximation GELU, written as `x * sigmoid(2u)`, which equals
/// `0.5 x (1 + tanh(u))` and needs one `exp`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    x / (1.0 + exp(-2.0 * u))
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let s = 1.0 / (1.0 + exp(-2.0 * u));
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place softmax over a row.
pub fn softmax(row: &mut [f32]) {
    softmax_scaled(row, 1.0);
}

/// Softmax of `scale * row` for a positive `scale`.
#[inline]
pub fn softmax_scaled(row: &mut [f32], scale: f32) {
    let m = max(row);
    row.iter_mut().for_each(|v| *v = exp((*v - m) * scale));
    let inv = 1.0 / sum(row);
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
fn max(xs: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for c in chunks {
        for i in 0..8 {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    acc.iter().copied().fold(tail, f32::max)
}

/// Sum with eight interleaved accumulators, combined in a fixed order.
#[inline]
pub fn sum(xs: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f32 = chunks.remainder().iter().sum();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `e^x` in f32 by range reduction and a degree-6 polynomial, within 2 ulp of
/// the libm result above -87. Branch-free so loops over it vectorize; libm `expf`
/// was the largest single cost of a forward pass.
#[inline]
pub fn exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to the nearest integer
    const ROUND: f32 = 12_582_912.0;
    let xc = x.clamp(-87.0, 88.0);
    let n = (xc * LOG2E + ROUND) - ROUND;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let p = ((((1.987_569_2e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 0.5;
    let y = (p * r * r + r) + 1.0;
    let scaled = y * f32::from_bits(((n as i32 + 127) as u32) << 23);
    // below -87 the result would be subnormal; flush it
    let low = if x < -87.0 { 0.0 } else { scaled };
    if x > 88.0 {
        f32::INFINITY
    } else {
        low
    }
}

const ATT_ROWS: usize = 64;

/// Causal attention without the probabilities. Query rows go in blocks so
/// only the key columns at or before the block's last row are computed.
pub fn causal_attention_forward(q: &[f32], k: &[f32], v: &[f32], d: usize, n_heads: usize) -> Vec<f32> {
    let t_len = q.len() / d;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; t_len * d];
    let mut scores = vec![0.0f32; ATT_ROWS.min(t_len) * t_len];
    for h in 0..n_heads {
        let off = h * hd;
        for r0 in (0..t_len).step_by(ATT_ROWS) {
            let (rows, cols) = (ATT_ROWS.min(t_len - r0), (r0 + ATT_ROWS).min(t_len));
            let s = &mut scores[..rows * cols];
            gemm(rows, hd, cols, &q[r0 * d + off..], (d, 1), &k[off..], (1, d), 0.0, s, (cols, 1));
            for (i, row) in s.chunks_exact_mut(cols).enumerate() {
                let t = r0 + i;
                softmax_scaled(&mut row[..=t], scale);
                row[t + 1..].fill(0.0);
            }
            gemm(rows, cols, hd, s, (cols, 1), &v[off..], (d, 1), 0.0, &mut out[r0 * d + off..], (d, 1));
        }
    }
    out
}

/// Causal multi-head attention over `[T, d]` projections. Returns the
/// concatenated head outputs `[T, d]` and the probabilities `[H, T, T]`
/// (entries above the diagonal stay zero).
pub fn causal_attention(q: &[f32], k: &[f32], v: &[f32], d: usize, n_heads: usize) -> (Vec<f32>, Vec<f32>) {
    let t_len = q.len() / d;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; t_len * d];
    let mut probs = vec![0.0f32; n_heads * t_len * t_len];
    for h in 0..n_heads {
        let off = h * hd;
        let p = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        gemm(t_len, hd, t_len, &q[off..], (d, 1), &k[off..], (1, d), 0.0, p, (t_len, 1));
        for (t, row) in p.chunks_exact_mut(t_len).enumerate() {
            row[..=t].iter_mut().for_each(|x| *x *= scale);
            softmax(&mut row[..=t]);
            row[t + 1..].fill(0.0);
        }
        gemm(t_len, t_len, hd, p, (t_len, 1), &v[off..], (d, 1), 0.0, &mut out[off..], (d, 1));
    }
    (out, probs)
}

/// Backward of [`causal_attention`]: returns `(dq, dk, dv)`.
pub fn causal_attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    d: usize,
    n_heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let t_len = q.len() / d;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dq = vec![0.0f32; q.len()];
    let mut dk = vec![0.0f32; k.len()];
    let mut dv = vec![0.0f32; v.len()];
    let mut ds = vec![0.0f32; t_len * t_len];
    for h in 0..n_heads {
        let off = h * hd;
        let p = &probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        // dV = Pᵀ dO, dP = dO Vᵀ
        gemm(t_len, t_len, hd, p, (1, t_len), &dout[off..], (d, 1), 0.0, &mut dv[off..], (d, 1));
        gemm(t_len, hd, t_len, &dout[off..], (d, 1), &v[off..], (1, d), 0.0, &mut ds, (t_len, 1));
        for (prow, drow) in p.chunks_exact(t_len).zip(ds.chunks_exact_mut(t_len)) {
            let weighted = dot(prow, drow);
            for (g, &pp) in drow.iter_mut().zip(prow) {
                *g = pp * (*g - weighted) * scale;
            }
        }
        gemm(t_len, t_len, hd, &ds, (t_len, 1), &k[off..], (d, 1), 0.0, &mut dq[off..], (d, 1));
        gemm(t_len, t_len, hd, &ds, (1, t_len), &q[off..], (d, 1), 0.0, &mut dk[off..], (d, 1));
    }
    (dq, dk, dv)
}
