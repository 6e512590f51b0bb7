//! Forward kernels on plain tensors. The autograd tape calls into these and
//! they are also usable directly for gradient-free evaluation.

use super::{NumericsError, Real, Tensor};

pub(crate) fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

pub(crate) fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(), NumericsError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

/// Dot product with eight independent partial sums; the summation order is
/// fixed so results do not depend on anything but the inputs.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out += alpha * x`
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar<T: Real>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn silu_scalar<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// `a[rows, k] * b[k, n]` on raw slices, accumulating into `out[rows, n]`.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], k: usize, n: usize, out: &mut [T]) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            axpy(av, brow, orow);
        }
    }
}

/// `a[rows, k] * b[n, k]^T` on raw slices, accumulating into `out[rows, n]`.
pub(crate) fn matmul_nt_into<T: Real>(a: &[T], b: &[T], k: usize, n: usize, out: &mut [T]) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(arow, brow);
        }
    }
}

/// `a[rows, k]^T * g[rows, n]`, accumulating into `out[k, n]`.
pub(crate) fn matmul_tn_into<T: Real>(a: &[T], g: &[T], k: usize, n: usize, out: &mut [T]) {
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            axpy(av, grow, orow);
        }
    }
}

fn out_shape(lead: &[usize], last: usize) -> Vec<usize> {
    let mut s = lead.to_vec();
    s.push(last);
    s
}

/// `a[..., k] · w[k, n] -> [..., n]`
pub fn matmul<T: Real>(a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if w.shape().len() != 2 || a.shape().is_empty() || a.last_dim() != w.shape()[0] {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), w.shape())));
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&out_shape(&a.shape()[..a.shape().len() - 1], n));
    matmul_into(a.data(), w.data(), k, n, out.data_mut());
    Ok(out)
}

/// `a[..., k] · w[n, k]^T -> [..., n]`
pub fn matmul_nt<T: Real>(a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if w.shape().len() != 2 || a.shape().is_empty() || a.last_dim() != w.shape()[1] {
        return Err(mismatch("matmul_nt", format!("{:?} x {:?}^T", a.shape(), w.shape())));
    }
    let (n, k) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&out_shape(&a.shape()[..a.shape().len() - 1], n));
    matmul_nt_into(a.data(), w.data(), k, n, out.data_mut());
    Ok(out)
}

/// True when `b`'s shape is a suffix of `a`'s (trailing-dimension expansion).
pub(crate) fn is_trailing(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, NumericsError> {
    if !is_trailing(a.shape(), b.shape()) {
        return Err(mismatch(op, format!("{:?} with {:?}", a.shape(), b.shape())));
    }
    let m = b.numel().max(1);
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % m])).collect();
    Tensor::new(a.shape(), data)
}

/// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    binary("add", a, b, |x, y| x + y)
}

/// Elementwise product; `b` may match a trailing suffix of `a`'s shape.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    binary("mul", a, b, |x, y| x * y)
}

fn unary<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(a.shape(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub fn silu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    unary(a, silu_scalar)
}

pub fn exp<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    unary(a, |x| x.exp())
}

pub fn softplus<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    unary(a, softplus_scalar)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    let n = a.last_dim();
    if n > 0 {
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `x / sqrt(mean(x^2) + eps) * gain` over the last axis.
pub fn rmsnorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>, NumericsError> {
    let n = x.last_dim();
    if gain.shape() != [n] {
        return Err(mismatch("rmsnorm", format!("input {:?}, gain {:?}", x.shape(), gain.shape())));
    }
    if eps < 0.0 {
        return Err(NumericsError::InvalidArgument { op: "rmsnorm", detail: format!("eps = {eps}") });
    }
    let mut out = x.clone();
    let eps = T::c(eps);
    for row in out.data_mut().chunks_exact_mut(n) {
        let r = inv_rms(row, eps);
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = *v * r * g;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn inv_rms<T: Real>(row: &[T], eps: T) -> T {
    let ms = dot(row, row) / T::c(row.len() as f64);
    T::one() / (ms + eps).sqrt()
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
/// Returned in descending order of value.
pub fn top_k<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    /// Straight scalar transcription of the RMSNorm formula.
    fn rmsnorm_reference(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        x.iter().zip(g).map(|(v, g)| v / (ms + eps).sqrt() * g).collect()
    }

    #[test]
    fn rmsnorm_hand_value() {
        let y = rmsnorm(&t(&[2], &[3.0, 4.0]), &t(&[2], &[1.0, 1.0]), 0.0).unwrap();
        let r = rmsnorm_reference(&[3.0, 4.0], &[1.0, 1.0], 0.0);
        assert!((y.data()[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y.data()[1] - 1.131_370_849_898_476).abs() < 1e-12);
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsnorm_rejects_bad_gain() {
        assert!(rmsnorm(&t(&[2], &[3.0, 4.0]), &t(&[3], &[1.0, 1.0, 1.0]), 1e-6).is_err());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = softmax(&t(&[3], &[0.0, 0.0, 0.0]));
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let y = softmax(&t(&[2], &[1000.0, 1000.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn silu_and_softplus_scalars() {
        assert_eq!(silu(&t(&[1], &[0.0])).data()[0], 0.0);
        assert!((softplus(&t(&[1], &[0.0])).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(&t(&[1], &[50.0])).data()[0], 50.0);
        assert!((exp(&t(&[1], &[1.0])).data()[0] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[58.0, 64.0, 139.0, 154.0]);
        let bt = t(&[2, 3], &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        assert_eq!(matmul_nt(&a, &bt).unwrap().data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn trailing_expansion_only() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(add(&a, &t(&[2], &[10.0, 20.0])).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(mul(&a, &t(&[2], &[2.0, 0.0])).unwrap().data(), &[2.0, 0.0, 6.0, 0.0]);
        assert!(add(&a, &t(&[2, 1], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k(&[2.0, 1.0, 0.5, -1.0], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.0, 0.0, 0.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
