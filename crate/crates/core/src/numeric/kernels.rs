//! Raw row-major kernels. Each output element is accumulated in a fixed,
//! sequential order so results do not depend on how rows are batched.

/// `c[n,m] += a[n,k] * b[k,m]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    matmul_acc(a, b, &mut c, n, k, m);
    c
}

/// `c[k,m] += a[n,k]^T * g[n,m]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `c[n,m] += a[n,k] * b[m,k]^T`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    let bt = transpose(b, m, k);
    matmul_acc(a, &bt, c, n, k, m);
}

pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in x {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Multi-head causal attention for `n` query rows whose absolute positions
/// start at `offset`. `k` and `v` hold all `t = offset + n` key rows.
/// Returns the output `[n, d]` and the attention probabilities laid out as
/// `[n][heads][t]` (masked entries are zero).
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    t: usize,
    d: usize,
    heads: usize,
    offset: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; n * heads * t];
    let mut scores = vec![0.0; t];
    for r in 0..n {
        let visible = offset + r + 1;
        for h in 0..heads {
            let qh = &q[r * d + h * dh..r * d + (h + 1) * dh];
            for (j, s) in scores[..visible].iter_mut().enumerate() {
                *s = dot(qh, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            let p = &mut probs[(r * heads + h) * t..(r * heads + h) * t + visible];
            softmax_into(&scores[..visible], p);
            let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
            for (j, &pj) in p.iter().enumerate() {
                let vh = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (ov, &vv) in o.iter_mut().zip(vh) {
                    *ov += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    n: usize,
    t: usize,
    d: usize,
    heads: usize,
    offset: usize,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t];
    for r in 0..n {
        let visible = offset + r + 1;
        for h in 0..heads {
            let p = &probs[(r * heads + h) * t..(r * heads + h) * t + visible];
            let go = &dout[r * d + h * dh..r * d + (h + 1) * dh];
            let mut weighted = 0.0;
            for j in 0..visible {
                let vh = &v[j * d + h * dh..j * d + (h + 1) * dh];
                dp[j] = dot(go, vh);
                weighted += p[j] * dp[j];
                let dvh = &mut dv[j * d + h * dh..j * d + (h + 1) * dh];
                for (x, &g) in dvh.iter_mut().zip(go) {
                    *x += p[j] * g;
                }
            }
            let qh = &q[r * d + h * dh..r * d + (h + 1) * dh];
            for j in 0..visible {
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kh = &k[j * d + h * dh..j * d + (h + 1) * dh];
                let dqh = &mut dq[r * d + h * dh..r * d + (h + 1) * dh];
                for (x, &kv) in dqh.iter_mut().zip(kh) {
                    *x += ds * kv;
                }
                let dkh = &mut dk[j * d + h * dh..j * d + (h + 1) * dh];
                for (x, &qv) in dkh.iter_mut().zip(qh) {
                    *x += ds * qv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        let mut c = vec![0.0; 4];
        matmul_nt_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn row_batching_is_bitwise_neutral() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
        let full = matmul(&a, &b, 3, 4, 5);
        for r in 0..3 {
            let one = matmul(&a[r * 4..(r + 1) * 4], &b, 1, 4, 5);
            assert_eq!(&full[r * 5..(r + 1) * 5], &one[..]);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9, 0.1]), 1);
    }
}
