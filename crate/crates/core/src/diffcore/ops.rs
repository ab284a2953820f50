//! Forward kernels shared by the eager API and the tape.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Guard used by [`cosine_sim`] when a vector norm vanishes.
pub const COSINE_EPS: f64 = 1e-8;
/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// tanh-approximation GELU constants: sqrt(2/pi) and the cubic coefficient.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Row-major `[rows, cols]` product helper: `c = a · b` (or `a · bᵀ` etc. via strides).
pub(crate) fn matmul_into<T: Real>(
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    // a is m×k (stored k×m when transposed); b is k×n (stored n×k when transposed).
    let sa = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let sb = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, c, (n as isize, 1));
}

pub(crate) fn check_linear<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
    }
    Ok((x.rows(), d_in, d_out))
}

/// `x · W + b` applied to every row of `x` (trailing axis is the feature axis).
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, d_in, d_out) = check_linear(x, w, b)?;
    let mut out = vec![T::zero(); rows * d_out];
    matmul_into(x.data(), false, w.data(), false, &mut out, rows, d_in, d_out, false);
    if let Some(b) = b {
        for row in out.chunks_exact_mut(d_out) {
            for (o, &bj) in row.iter_mut().zip(b.data()) {
                *o += bj;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

/// Normalized rows plus the per-row reciprocal standard deviation.
pub(crate) fn layer_norm_parts<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer_norm needs at least 2 features, got {d}"
        )));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let inv_d = T::one() / T::lit(d as f64);
    let mut out = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstds = Vec::with_capacity(x.rows());
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            let h = if var == T::zero() { T::zero() } else { (v - mean) * rstd };
            xhat.push(h);
            out.push(h * gamma.data()[j] + beta.data()[j]);
        }
        rstds.push(rstd);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        xhat,
        rstds,
    ))
}

/// Per-row `(x - mean) / sqrt(var + eps) * gamma + beta` with the population variance.
///
/// A constant row yields `beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_parts(x, gamma, beta, eps).map(|(out, _, _)| out)
}

/// GELU, tanh approximation.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// `linear(gelu(linear(x, w1, b1)), w2, b2)`.
pub fn mlp_block<T: Real>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<Tensor<T>> {
    let h = linear(x, w1, Some(b1))?;
    linear(&gelu(&h), w2, Some(b2))
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(z.cols()) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `log(sum(exp(z)))`, stabilized.
pub(crate) fn log_sum_exp<T: Real>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// `a·b / (max(|a|, eps) · max(|b|, eps))`; two zero vectors give 0.
pub fn cosine_sim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.numel() != b.numel() {
        return Err(Error::shape("cosine_sim", a.shape(), b.shape()));
    }
    Ok(cosine_parts(a.data(), b.data()).0)
}

/// Returns `(similarity, dot, clamped |a|, clamped |b|)`.
pub(crate) fn cosine_parts<T: Real>(a: &[T], b: &[T]) -> (T, T, T, T) {
    let eps = T::lit(COSINE_EPS);
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
    (dot / (na * nb), dot, na, nb)
}

/// Scaled dot-product attention over `[n, d]` projections split into `heads`
/// column blocks. Returns the mixed values and the `[heads, n, n]` attention
/// probabilities.
pub(crate) fn attention_core<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "attention width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * n * n];
    let mut out = vec![T::zero(); n * d];
    let ld = d as isize;
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        // scores = Q_h · K_hᵀ * scale
        T::gemm(
            n,
            dh,
            n,
            scale,
            &q.data()[off..],
            (ld, 1),
            &k.data()[off..],
            (1, ld),
            T::zero(),
            p,
            (n as isize, 1),
        );
        for row in p.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        // out_h = P · V_h
        T::gemm(
            n,
            n,
            dh,
            T::one(),
            p,
            (n as isize, 1),
            &v.data()[off..],
            (ld, 1),
            T::zero(),
            &mut out[off..],
            (ld, 1),
        );
    }
    Ok((Tensor::new(vec![n, d], out)?, probs))
}

/// Learned projections of a multi-head self-attention layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T: Real> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub heads: usize,
}

/// `O(softmax(Q Kᵀ / sqrt(d_head)) V)` over the token rows. Also returns the
/// attention probabilities, `[heads, n, n]` flattened.
pub fn self_attention<T: Real>(
    tokens: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let q = linear(tokens, &w.wq, Some(&w.bq))?;
    let k = linear(tokens, &w.wk, Some(&w.bk))?;
    let v = linear(tokens, &w.wv, Some(&w.bv))?;
    let (mixed, probs) = attention_core(&q, &k, &v, w.heads)?;
    Ok((linear(&mixed, &w.wo, Some(&w.bo))?, probs))
}
