//! Forward and backward arithmetic for the graph operations.
//!
//! Everything here works on row-major slices; shape validation happens in
//! [`crate::graph`]. Reductions that feed a scalar loss accumulate in `f64`.

use crate::tensor::Scalar;

pub const LAYERNORM_EPS: f64 = 1e-5;
const GELU_COEFF: f64 = 0.044715;

/// Strided `C = alpha·A·B + beta·C`, `A` is `m×k`, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |r: usize, c: usize, rs: usize, cs: usize| (r.max(1) - 1) * rs + (c.max(1) - 1) * cs;
    assert!(k == 0 || reach(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || reach(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    assert!(reach(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::of_f64(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.as_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        rstd.push(T::of_f64(rs));
        for j in 0..d {
            let xh = T::of_f64((row[j].as_f64() - mean) * rs);
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Scalar>(
    dy: &[T],
    d: usize,
    gamma: &[T],
    cache: &LayerNormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::of_f64(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            mean_dxhat = mean_dxhat + g;
            mean_dxhat_xhat = mean_dxhat_xhat + g * xh[j];
            dgamma[j] = dgamma[j] + dyr[j] * xh[j];
            dbeta[j] = dbeta[j] + dyr[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dx[r * d + j] = rs * (g - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of_f64(GELU_COEFF);
    let half = T::of_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of_f64(GELU_COEFF);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Multi-head causal self-attention over `[seq, d]` projections.
/// Returns the output and the per-head attention probabilities `[heads, seq, seq]`.
pub fn causal_attention<T: Scalar>(q: &[T], k: &[T], v: &[T], seq: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); seq * d];
    let mut probs = vec![T::zero(); heads * seq * seq];
    for h in 0..heads {
        let p = &mut probs[h * seq * seq..(h + 1) * seq * seq];
        gemm(
            seq,
            dh,
            seq,
            scale,
            &q[h * dh..],
            (d, 1),
            &k[h * dh..],
            (1, d),
            T::zero(),
            p,
            (seq, 1),
        );
        for i in 0..seq {
            let row = &mut p[i * seq..(i + 1) * seq];
            softmax_in_place(&mut row[..=i]);
            for x in &mut row[i + 1..] {
                *x = T::zero();
            }
        }
        gemm(
            seq,
            seq,
            dh,
            T::one(),
            p,
            (seq, 1),
            &v[h * dh..],
            (d, 1),
            T::zero(),
            &mut out[h * dh..],
            (d, 1),
        );
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    seq: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); seq * d];
    let mut dk = vec![T::zero(); seq * d];
    let mut dv = vec![T::zero(); seq * d];
    let mut ds = vec![T::zero(); seq * seq];
    for h in 0..heads {
        let p = &probs[h * seq * seq..(h + 1) * seq * seq];
        // dV_h = Pᵀ dO_h
        gemm(
            seq,
            seq,
            dh,
            T::one(),
            p,
            (1, seq),
            &dout[h * dh..],
            (d, 1),
            T::zero(),
            &mut dv[h * dh..],
            (d, 1),
        );
        // dP = dO_h V_hᵀ
        gemm(
            seq,
            dh,
            seq,
            T::one(),
            &dout[h * dh..],
            (d, 1),
            &v[h * dh..],
            (1, d),
            T::zero(),
            &mut ds,
            (seq, 1),
        );
        for i in 0..seq {
            let prow = &p[i * seq..(i + 1) * seq];
            let drow = &mut ds[i * seq..(i + 1) * seq];
            let dot = (0..=i).fold(T::zero(), |acc, j| acc + prow[j] * drow[j]);
            for j in 0..=i {
                drow[j] = prow[j] * (drow[j] - dot);
            }
            for x in &mut drow[i + 1..] {
                *x = T::zero();
            }
        }
        // dQ_h = dS K_h · scale, dK_h = dSᵀ Q_h · scale
        gemm(
            seq,
            seq,
            dh,
            scale,
            &ds,
            (seq, 1),
            &k[h * dh..],
            (d, 1),
            T::zero(),
            &mut dq[h * dh..],
            (d, 1),
        );
        gemm(
            seq,
            seq,
            dh,
            scale,
            &ds,
            (1, seq),
            &q[h * dh..],
            (d, 1),
            T::zero(),
            &mut dk[h * dh..],
            (d, 1),
        );
    }
    (dq, dk, dv)
}

/// Mean cross-entropy over rows of `logits` (`rows × vocab`).
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &[T], vocab: usize, targets: &[usize]) -> (f64, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t].as_f64();
        let prow = &mut probs[r * vocab..(r + 1) * vocab];
        for (p, v) in prow.iter_mut().zip(row) {
            *p = T::of_f64((v.as_f64() - lse).exp());
        }
    }
    (total / targets.len() as f64, probs)
}

pub fn cross_entropy_backward<T: Scalar>(upstream: T, probs: &[T], vocab: usize, targets: &[usize]) -> Vec<T> {
    let scale = upstream / T::of_f64(targets.len() as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (r, &t) in targets.iter().enumerate() {
        d[r * vocab + t] = d[r * vocab + t] - scale;
    }
    d
}
