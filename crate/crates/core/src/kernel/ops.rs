//! Forward kernels over flat row-major buffers, plus tensor-level entry
//! points. The tape reuses the same kernels so the standalone functions and
//! the differentiable path cannot drift apart.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Result, SituError};
use crate::scalar::Scalar;

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `[n×k] · [k×m] -> [n×m]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A^T · B` with `a: [n×k]`, `b: [n×m]` -> `[k×m]`
pub(crate) fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A · B^T` with `a: [n×m]`, `b: [k×m]` -> `[n×k]`
pub(crate) fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + j] = s;
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let dn = T::lit(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Batched scaled dot-product weights, laid out `[batch][head][query][key]`.
/// Keys whose mask entry is `false` get the most negative finite logit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_weights<T: Scalar>(
    q: &[T],
    k: &[T],
    batch: usize,
    q_len: usize,
    kv_len: usize,
    width: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Vec<T>> {
    if heads == 0 || width % heads != 0 {
        return Err(SituError::shape(
            "attention",
            format!("width {} not divisible by {} heads", width, heads),
        ));
    }
    if let Some(mask) = key_mask {
        if mask.len() != batch * kv_len {
            return Err(SituError::shape(
                "attention",
                format!("key mask has {} entries, expected {}", mask.len(), batch * kv_len),
            ));
        }
        for b in 0..batch {
            if !mask[b * kv_len..(b + 1) * kv_len].iter().any(|&m| m) {
                return Err(SituError::InvalidArgument(format!(
                    "attention: every key masked for sequence {}",
                    b
                )));
            }
        }
    }
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut w = vec![T::zero(); batch * heads * q_len * kv_len];
    for b in 0..batch {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * width + c0..(b * q_len + i) * width + c0 + dh];
                let base = ((b * heads + h) * q_len + i) * kv_len;
                let out = &mut w[base..base + kv_len];
                for (j, o) in out.iter_mut().enumerate() {
                    let masked = key_mask.is_some_and(|m| !m[b * kv_len + j]);
                    *o = if masked {
                        T::masked_logit()
                    } else {
                        let krow =
                            &k[(b * kv_len + j) * width + c0..(b * kv_len + j) * width + c0 + dh];
                        qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale
                    };
                }
                softmax_in_place(out);
            }
        }
    }
    Ok(w)
}

/// Weighted sum of value rows per head: `[batch*q_len × width]`.
pub(crate) fn attention_apply<T: Scalar>(
    w: &[T],
    v: &[T],
    batch: usize,
    q_len: usize,
    kv_len: usize,
    width: usize,
    heads: usize,
) -> Vec<T> {
    let dh = width / heads;
    let mut out = vec![T::zero(); batch * q_len * width];
    for b in 0..batch {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..q_len {
                let base = ((b * heads + h) * q_len + i) * kv_len;
                let orow = &mut out[(b * q_len + i) * width + c0..(b * q_len + i) * width + c0 + dh];
                for j in 0..kv_len {
                    let wij = w[base + j];
                    if wij == T::zero() {
                        continue;
                    }
                    let vrow = &v[(b * kv_len + j) * width + c0..(b * kv_len + j) * width + c0 + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += wij * vv;
                    }
                }
            }
        }
    }
    out
}

fn expect_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(SituError::shape(op, format!("expected a matrix, got {:?}", s))),
    }
}

/// `x·W + bias`, bias broadcast over rows.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, a) = expect_matrix("linear", x)?;
    let (wa, b) = expect_matrix("linear", weight)?;
    if a != wa || bias.len() != b {
        return Err(SituError::shape(
            "linear",
            format!("x {:?}, W {:?}, bias {:?}", x.shape(), weight.shape(), bias.shape()),
        ));
    }
    let mut y = matmul(x.data(), weight.data(), n, a, b);
    for r in 0..n {
        for (o, &bv) in y[r * b..(r + 1) * b].iter_mut().zip(bias.data()) {
            *o += bv;
        }
    }
    Tensor::matrix(n, b, y)
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if d == 0 || gamma.len() != d || beta.len() != d {
        return Err(SituError::shape(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let (y, _) = layer_norm_forward(x.data(), d, gamma.data(), beta.data(), eps);
    Tensor::new(x.shape().to_vec(), y)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(SituError::shape(
            "softmax",
            format!("axis {} invalid for {:?}", axis, shape),
        ));
    }
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![T::zero(); k];
    for o in 0..outer {
        for i in 0..inner {
            for (j, l) in lane.iter_mut().enumerate() {
                *l = out[(o * k + j) * inner + i];
            }
            softmax_in_place(&mut lane);
            for (j, &l) in lane.iter().enumerate() {
                out[(o * k + j) * inner + i] = l;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Inverted dropout mask: survivors are scaled by `1/(1-rate)`.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(SituError::InvalidArgument(format!(
            "dropout rate {} outside [0, 1)",
            rate
        )))
    }
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Multi-head scaled dot-product attention for a single sequence.
///
/// Returns the `[m×d]` output and the post-softmax weights `[h×m×p]`.
/// `query_mask` does not change the computation; rows at masked queries are
/// produced but callers must ignore them.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_mask: Option<&[bool]>,
    query_mask: Option<&[bool]>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, d) = expect_matrix("attention", q)?;
    let (p, dk) = expect_matrix("attention", k)?;
    let (pv, dv) = expect_matrix("attention", v)?;
    if dk != d || pv != p || dv != d {
        return Err(SituError::shape(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if let Some(qm) = query_mask {
        if qm.len() != m {
            return Err(SituError::shape(
                "attention",
                format!("query mask has {} entries for {} queries", qm.len(), m),
            ));
        }
    }
    let w = attention_weights(q.data(), k.data(), 1, m, p, d, heads, key_mask)?;
    let out = attention_apply(&w, v.data(), 1, m, p, d, heads);
    Ok((Tensor::matrix(m, d, out)?, Tensor::new(vec![heads, m, p], w)?))
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(SituError::InvalidArgument(format!(
            "class index {} out of range for {} logits",
            target,
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[target])
}
