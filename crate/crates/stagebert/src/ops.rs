//! Differentiable primitives.
//!
//! Each primitive is a plain function pair: a forward that returns its output
//! (plus whatever cache its backward needs) and a backward that maps the
//! output gradient to input/parameter gradients. There is no tape; composite
//! structures (the encoder, the losses) call these in a fixed order and
//! unwind them by hand in reverse.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// matmul

/// `C = A · B` for `A: [m,k]`, `B: [k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::Shape {
            op: "matmul",
            details: format!("lhs {:?} incompatible with rhs {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = b.row(p);
            for j in 0..n {
                out_row[j] = out_row[j] + a_ip * b_row[j];
            }
        }
    }
    Ok(out)
}

/// `C = A · Bᵀ` for `A: [m,k]`, `B: [n,k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::Shape {
            op: "matmul_nt",
            details: format!("lhs {:?} incompatible with rhs-T {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a_row[p] * b_row[p];
            }
            out_row[j] = acc;
        }
    }
    Ok(out)
}

/// `C = Aᵀ · B` for `A: [k,m]`, `B: [k,n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::Shape {
            op: "matmul_tn",
            details: format!("lhs-T {:?} incompatible with rhs {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for i in 0..m {
            let a_pi = a_row[i];
            let out_row = out.row_mut(i);
            for j in 0..n {
                out_row[j] = out_row[j] + a_pi * b_row[j];
            }
        }
    }
    Ok(out)
}

/// Backward of `C = A · B`: returns `(dA, dB)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = matmul_nt(d_out, b)?;
    let db = matmul_tn(a, d_out)?;
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// add (row-broadcast bias)

/// `Y = X + bias` broadcast over rows; `X: [n,d]`, `bias: [d]`.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() != bias.len() {
        return Err(Error::Shape {
            op: "add_row_bias",
            details: format!("x {:?} vs bias {:?}", x.shape(), bias.shape()),
        });
    }
    let mut y = x.clone();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v = *v + *b;
        }
    }
    Ok(y)
}

/// Bias gradient of [`add_row_bias`]: column sums of `d_out`.
pub fn col_sums<T: Scalar>(d_out: &Tensor<T>) -> Tensor<T> {
    let mut sums = Tensor::zeros(&[d_out.cols()]);
    for i in 0..d_out.rows() {
        for (s, v) in sums.data_mut().iter_mut().zip(d_out.row(i)) {
            *s = *s + *v;
        }
    }
    sums
}

// ---------------------------------------------------------------------------
// layer norm

/// Per-row cache: normalized values and reciprocal standard deviations.
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalization with learned gain and bias.
///
/// Uses population variance and `eps` inside the square root.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            details: format!(
                "x {:?} vs gain {:?} / bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            ),
        });
    }
    let n = x.rows();
    let inv_d = T::one() / T::of_usize(d);
    let mut y = Tensor::zeros(&[n, d]);
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            xh[j] = (v - mean) * r;
        }
        let y_row = y.row_mut(i);
        for j in 0..d {
            y_row[j] = xhat.at2(i, j) * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Backward of layer norm. Returns `dX`; accumulates into `d_gain`,
/// `d_bias`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    d_out: &Tensor<T>,
    d_gain: &mut Tensor<T>,
    d_bias: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, d) = (d_out.rows(), d_out.cols());
    let inv_d = T::one() / T::of_usize(d);
    let mut dx = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let dy = d_out.row(i);
        let xh = cache.xhat.row(i);
        let r = cache.rstd[i];
        // Accumulate parameter grads and the two row means the dx rule needs.
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let g = dy[j] * gain.data()[j];
            mean_dxhat = mean_dxhat + g;
            mean_dxhat_xhat = mean_dxhat_xhat + g * xh[j];
            d_gain.data_mut()[j] = d_gain.data_mut()[j] + dy[j] * xh[j];
            d_bias.data_mut()[j] = d_bias.data_mut()[j] + dy[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let dx_row = dx.row_mut(i);
        for j in 0..d {
            let g = dy[j] * gain.data()[j];
            dx_row[j] = (g - mean_dxhat - xh[j] * mean_dxhat_xhat) * r;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GELU

const GELU_COEFF: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// GELU activation, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = gelu_scalar(*v);
    }
    y
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of_f64(0.5);
    let scale = T::of_f64(GELU_SCALE);
    let coeff = T::of_f64(GELU_COEFF);
    let u = scale * (x + coeff * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// Backward of GELU given the pre-activation input.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = d_out.clone();
    let half = T::of_f64(0.5);
    let scale = T::of_f64(GELU_SCALE);
    let coeff = T::of_f64(GELU_COEFF);
    let three = T::of_f64(3.0);
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let u = scale * (v + coeff * v * v * v);
        let t = u.tanh();
        let sech2 = T::one() - t * t;
        let du = scale * (T::one() + three * coeff * v * v);
        let grad = half * (T::one() + t) + half * v * sech2 * du;
        *g = *g * grad;
    }
    dx
}

// ---------------------------------------------------------------------------
// softmax

/// Row-wise softmax with max-subtraction for stability.
///
/// Rows may contain `-inf` entries (masked positions); those map to exact
/// zeros as long as the row has at least one finite entry.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = x.row(i);
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let out = y.row_mut(i);
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[j] = e;
            sum = sum + e;
        }
        let inv = sum.recip();
        for v in out.iter_mut() {
            *v = *v * inv;
        }
    }
    y
}

/// Backward of row softmax given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (y.rows(), y.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let yr = y.row(i);
        let dy = d_out.row(i);
        let mut dot = T::zero();
        for j in 0..d {
            dot = dot + yr[j] * dy[j];
        }
        let dx_row = dx.row_mut(i);
        for j in 0..d {
            dx_row[j] = yr[j] * (dy[j] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted dropout. In evaluation mode (or with `keep >= 1`) this is the
/// identity and consumes no randomness; otherwise kept entries are scaled by
/// `1/keep` and the scale mask is returned for the backward pass.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    keep: T,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor<T>, Option<Vec<T>>) {
    if !training || keep >= T::one() {
        return (x.clone(), None);
    }
    let keep_f = keep.as_f64();
    let inv_keep = keep.recip();
    let mut y = x.clone();
    let mut mask = Vec::with_capacity(x.len());
    for v in y.data_mut() {
        let m = if rng.gen::<f64>() < keep_f {
            inv_keep
        } else {
            T::zero()
        };
        mask.push(m);
        *v = *v * m;
    }
    (y, Some(mask))
}

/// Backward of dropout: multiply by the saved scale mask.
pub fn dropout_backward<T: Scalar>(mask: &Option<Vec<T>>, d_out: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => d_out.clone(),
        Some(m) => {
            let mut dx = d_out.clone();
            for (g, &s) in dx.data_mut().iter_mut().zip(m.iter()) {
                *g = *g * s;
            }
            dx
        }
    }
}

// ---------------------------------------------------------------------------
// embedding lookup

/// Gathers rows of `table: [V,d]` for each id; output `[ids.len(), d]`.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let (v, d) = (table.rows(), table.cols());
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= v {
            return Err(Error::Data(format!(
                "embedding id {id} out of range for table with {v} rows"
            )));
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Backward of the lookup: scatter-adds `d_out` rows into `d_table`.
pub fn embedding_backward<T: Scalar>(ids: &[u32], d_out: &Tensor<T>, d_table: &mut Tensor<T>) {
    for (i, &id) in ids.iter().enumerate() {
        let dst = d_table.row_mut(id as usize);
        for (a, b) in dst.iter_mut().zip(d_out.row(i)) {
            *a = *a + *b;
        }
    }
}

// ---------------------------------------------------------------------------
// cross entropy

/// Mean cross-entropy of `logits: [n,C]` against integer labels.
///
/// Returns the mean loss and the softmax probabilities (the backward cache).
/// Zero logits give the uniform distribution, so the loss there is `ln C`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            details: format!("{n} logit rows vs {} labels", labels.len()),
        });
    }
    if n == 0 {
        return Err(Error::Data("cross_entropy on empty batch".into()));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::Data(format!(
                "label {l} out of range for {c} classes"
            )));
        }
    }
    let probs = softmax_rows(logits);
    let mut total = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        // log prob via the stable log-sum-exp of the original row
        let row = logits.row(i);
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum = sum + (v - max).exp();
        }
        let log_prob = row[l] - max - sum.ln();
        total = total - log_prob;
    }
    Ok((total / T::of_usize(n), probs))
}

/// Backward of mean cross-entropy: `scale * (probs - onehot)` per row.
///
/// `scale` is typically `1/n` to match the mean in the forward.
pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    scale: T,
) -> Tensor<T> {
    let mut d = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        let row = d.row_mut(i);
        for v in row.iter_mut() {
            *v = *v * scale;
        }
        row[l] = row[l] - scale;
    }
    d
}
