//! The transformer primitives: matrix products, layer norm, row softmax, GELU.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn require_2d<T: Scalar>(name: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        s => Err(dim_err!("{name}: expected a 2-D tensor, got shape {s:?}")),
    }
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_2d("matmul lhs", a)?;
    let (k2, n) = require_2d("matmul rhs", b)?;
    if k != k2 {
        return Err(dim_err!("matmul: inner dimensions {k} and {k2} differ"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c = a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_transb<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_2d("matmul lhs", a)?;
    let (n, k2) = require_2d("matmul rhs", b)?;
    if k != k2 {
        return Err(dim_err!("matmul_transb: inner dimensions {k} and {k2} differ"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Affine layer with `(out × in)` weights: `x · wᵀ + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul_transb(x, w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (n, d) = require_2d("layer_norm", x)?;
    if gamma.len() != d || beta.len() != d {
        return Err(dim_err!(
            "layer_norm: width {d}, gamma {}, beta {}",
            gamma.len(),
            beta.len()
        ));
    }
    let dn = T::from_usize_lossy(d);
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let denom = (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let centered = v - mean;
            // zero-variance rows with eps = 0 map to zero rather than NaN
            let normed = if denom > T::zero() { centered / denom } else { T::zero() };
            out.push(g * normed + b);
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = require_2d("softmax_rows", x)?;
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= sum;
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}
