// Raw slice kernels shared by the tape's forward and backward passes.
// All matmul kernels accumulate into `out`.

use crate::numcore::tape::Mask;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let a_pi = a[p * k + i];
            if a_pi == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_pi * bv;
            }
        }
    }
}

/// In-place softmax over the middle axis of an `[outer, len, inner]` view.
pub(crate) fn softmax_strided(x: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for c in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + c;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                x[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                x[idx(j)] /= sum;
            }
        }
    }
}

/// `log softmax(row)[target]`, computed with log-sum-exp.
pub(crate) fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    mask: &Mask,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    let mut probs = vec![0.0; heads * tq * tk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..tq {
            let visible = match mask {
                Mask::Causal { offset } => (offset + i + 1).min(tk),
                _ => tk,
            };
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let mut s = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                if let Mask::Additive(m) = mask {
                    s += m.data()[i * tk + j];
                }
                p[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for pj in p[..visible].iter_mut() {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let orow = &mut out[i * d + c0..i * d + c0 + dh];
            for j in 0..visible {
                p[j] /= sum;
                let pj = p[j];
                if pj == 0.0 {
                    continue;
                }
                for (o, &vv) in orow.iter_mut().zip(&v[j * d + c0..j * d + c0 + dh]) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..tq {
            let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let gi = &g[i * d + c0..i * d + c0 + dh];
            let mut weighted = 0.0;
            for j in 0..tk {
                dp[j] = dot(gi, &v[j * d + c0..j * d + c0 + dh]);
                weighted += p[j] * dp[j];
            }
            for j in 0..tk {
                if p[j] == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dv[j * d + c0 + c] += p[j] * gi[c];
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq[i * d + c0 + c] += ds * k[j * d + c0 + c];
                    dk[j * d + c0 + c] += ds * q[i * d + c0 + c];
                }
            }
        }
    }
}

/// Rotates pairs `(2i, 2i+1)` of every head by `sign * pos * base^(-2i/head_dim)`.
pub(crate) fn rope_rotate(x: &mut [f64], positions: &[usize], d: usize, head_dim: usize, base: f64, sign: f64) {
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = &mut x[r * d..(r + 1) * d];
        for (i, f) in inv_freq.iter().enumerate() {
            let (sin, cos) = (sign * pos as f64 * f).sin_cos();
            for h in 0..d / head_dim {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}
