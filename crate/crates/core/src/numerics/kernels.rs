use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] += a[m×k] · b[k×n]`. Each output row accumulates over `k` in
/// index order.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let at = transpose(m, k, a);
    gemm_nn(k, m, n, &at, b, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// In-place numerically stable softmax of one row.
#[inline]
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "inner extents differ: {:?} · {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut c = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(&[m, n], c)
}

/// Softmax over the last axis.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let n = *x.dims().last().unwrap();
    let mut out = x.clone();
    out.data_mut().chunks_mut(n).for_each(softmax_in_place);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(dims, |_| rng.normal())
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[4, 5], 1);
        let b = random(&[5, 3], 2);
        let c = matmul(&a, &b).unwrap();
        let expected = naive(a.data(), b.data(), 4, 5, 3);
        for (x, y) in c.data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = random(&[3, 3], 3);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let x = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        let y = Tensor::new(&[1, 1], vec![-2.5]).unwrap();
        assert_eq!(matmul(&x, &y).unwrap().data(), &[-7.5]);
        assert!(matmul(&random(&[2, 3], 0), &random(&[2, 3], 0)).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let a = random(&[6, 4], 4);
        let b = random(&[6, 5], 5);
        let mut tn = vec![0.0; 20];
        gemm_tn(6, 4, 5, a.data(), b.data(), &mut tn);
        let at = transpose(6, 4, a.data());
        assert_eq!(tn, naive(&at, b.data(), 4, 6, 5));

        let c = random(&[3, 4], 6);
        let mut nt = vec![0.0; 18];
        gemm_nt(6, 4, 3, a.data(), c.data(), &mut nt);
        let ct = transpose(3, 4, c.data());
        assert_eq!(nt, naive(a.data(), &ct, 6, 4, 3));
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax_lastdim(&Tensor::<f64>::full(&[2, 5], 0.3)).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.2).abs() < 1e-12));
        let x = Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax_lastdim(&x).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
        let bad = Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap();
        assert!(softmax_lastdim(&bad).is_err());
    }

    #[test]
    fn softmax_duplication_identity() {
        let logits = [0.4, -1.2, 2.0];
        let values = [1.5, -0.5, 3.0];
        let p = softmax_lastdim(&Tensor::new(&[3], logits.to_vec()).unwrap()).unwrap();
        let dup: Vec<f64> = logits.iter().chain(&logits).copied().collect();
        let q = softmax_lastdim(&Tensor::new(&[6], dup).unwrap()).unwrap();
        for i in 0..3 {
            assert!((q.data()[i] - p.data()[i] / 2.0).abs() < 1e-12);
            assert!((q.data()[i + 3] - p.data()[i] / 2.0).abs() < 1e-12);
        }
        let avg_p: f64 = (0..3).map(|i| p.data()[i] * values[i]).sum();
        let avg_q: f64 = (0..6).map(|i| q.data()[i] * values[i % 3]).sum();
        assert!((avg_p - avg_q).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_is_a_probability_vector(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let n = v.len();
            let p = softmax_lastdim(&Tensor::new(&[n], v).unwrap()).unwrap();
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn repeated_keys_leave_weighted_average_unchanged(
            v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..8),
            k in 2usize..5,
        ) {
            let avg = |pairs: &[(f64, f64)]| {
                let logits: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let p = softmax_lastdim(&Tensor::new(&[pairs.len()], logits).unwrap()).unwrap();
                p.data().iter().zip(pairs).map(|(w, x)| w * x.1).sum::<f64>()
            };
            let repeated: Vec<(f64, f64)> = (0..k).flat_map(|_| v.iter().copied()).collect();
            prop_assert!((avg(&v) - avg(&repeated)).abs() < 1e-6);
        }
    }
}
