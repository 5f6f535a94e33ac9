//! Elementwise and row-wise kernels shared by the pure API and the tape.

use alloc::format;
use alloc::vec::Vec;

use super::{Matrix, Real};
use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn softmax_in_place<T: Real>(row: &mut [T], tau: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax<T: Real>(v: &[T], tau: f64) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    check_tau(tau)?;
    let mut out = v.to_vec();
    softmax_in_place(&mut out, T::of(tau));
    Ok(out)
}

/// Softmax applied independently to each row.
pub fn row_softmax<T: Real>(a: &Matrix<T>, tau: f64) -> Result<Matrix<T>> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("row_softmax of an empty matrix".into()));
    }
    check_tau(tau)?;
    let mut out = a.clone();
    let t = T::of(tau);
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), t);
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    a.map(sigmoid_scalar)
}

/// Row-wise L2 normalization `row / max(‖row‖, eps)`.
///
/// Returns the normalized matrix and the number of rows whose norm fell
/// below `eps`.
pub fn l2_normalize_rows<T: Real>(a: &Matrix<T>, eps: f64) -> (Matrix<T>, usize) {
    let mut out = a.clone();
    let eps = T::of(eps);
    let mut degenerate = 0;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm < eps {
            degenerate += 1;
        }
        let denom = norm.max(eps);
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    (out, degenerate)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn gelu<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    a.map(gelu_scalar)
}

/// Per-row layer normalization statistics: (normalized rows, 1/std per row).
pub fn layer_norm_rows<T: Real>(a: &Matrix<T>, eps: f64) -> (Matrix<T>, Vec<T>) {
    let mut out = a.clone();
    let n = T::of(a.cols() as f64);
    let eps = T::of(eps);
    let mut rstd = Vec::with_capacity(a.rows());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        rstd.push(inv);
    }
    (out, rstd)
}

/// `(1 − ψ) ⊙ m + ψ ⊙ target`, clamped to `[min(m, target), max(m, target)]`
/// so rounding can never leave the convex envelope.
pub fn gate_blend<T: Real>(m: &Matrix<T>, psi: &Matrix<T>, target: &Matrix<T>) -> Result<Matrix<T>> {
    if m.shape() != psi.shape() || m.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "gate of {:?} with rate {:?} and target {:?}",
            m.shape(),
            psi.shape(),
            target.shape()
        )));
    }
    let data = m
        .data()
        .iter()
        .zip(psi.data())
        .zip(target.data())
        .map(|((&a, &p), &b)| {
            let v = (T::one() - p) * a + p * b;
            v.max(a.min(b)).min(a.max(b))
        })
        .collect();
    Matrix::new(m.rows(), m.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let third = 1.0 / 3.0;
        assert!(close(&softmax(&[0.0, 0.0, 0.0], 1.0).unwrap(), &[third; 3], 1e-15));
        assert_eq!(softmax(&[5.0f64], 0.3).unwrap(), vec![1.0]);
        let p = softmax(&[2.0f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(&p, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax::<f64>(&[], 1.0).is_err());
        assert!(softmax(&[1.0f64], 0.0).is_err());
        assert!(softmax(&[1.0f64], -1.0).is_err());
        assert!(row_softmax(&Matrix::<f64>::zeros(0, 0), 1.0).is_err());
    }

    #[test]
    fn row_softmax_examples() {
        let z = row_softmax(&Matrix::<f64>::zeros(2, 2), 1.0).unwrap();
        assert_eq!(z.data(), &[0.5; 4]);
        let one = row_softmax(&Matrix::new(1, 1, vec![7.0f64]).unwrap(), 0.3).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let r = row_softmax(&Matrix::new(1, 2, vec![2.0f64.ln(), 0.0]).unwrap(), 1.0).unwrap();
        assert!(close(r.data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn sigmoid_examples() {
        let s = |x: f64| sigmoid(&Matrix::new(1, 1, vec![x]).unwrap()).get(0, 0);
        assert_eq!(s(0.0), 0.5);
        assert!((s(1e9) - 1.0).abs() <= 1e-12);
        assert!((s(3.0f64.ln()) - 0.75).abs() <= 1e-15);
        assert!(s(-1e9) >= 0.0);
    }

    #[test]
    fn l2_normalize_examples() {
        let (n, d) = l2_normalize_rows(&Matrix::new(1, 2, vec![3.0f64, 4.0]).unwrap(), 1e-12);
        assert!(close(n.data(), &[0.6, 0.8], 1e-15));
        assert_eq!(d, 0);
        let (z, d) = l2_normalize_rows(&Matrix::<f64>::zeros(1, 2), 1e-12);
        assert_eq!(z.data(), &[0.0, 0.0]);
        assert_eq!(d, 1);
        let unit = Matrix::new(1, 3, vec![0.0f64, 1.0, 0.0]).unwrap();
        let (u, _) = l2_normalize_rows(&unit, 1e-12);
        assert!(u.max_abs_diff(&unit).unwrap() <= 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x={x}");
        }
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..12), c in -50.0f64..50.0) {
            let a = softmax(&v, 1.0).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted, 1.0).unwrap();
            prop_assert!(close(&a, &b, 1e-10));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_is_permutation_equivariant(v in prop::collection::vec(-5.0f64..5.0, 2..12)) {
            let a = softmax(&v, 0.3).unwrap();
            let mut rev = v.clone();
            rev.reverse();
            let mut b = softmax(&rev, 0.3).unwrap();
            b.reverse();
            prop_assert!(close(&a, &b, 1e-12));
        }

        #[test]
        fn lower_temperature_sharpens(v in prop::collection::vec(-3.0f64..3.0, 2..12)) {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi - lo > 1e-3);
            let warm = softmax(&v, 1.0).unwrap().into_iter().fold(0.0, f64::max);
            let cold = softmax(&v, 0.3).unwrap().into_iter().fold(0.0, f64::max);
            prop_assert!(cold > warm);
        }

        #[test]
        fn l2_normalize_is_idempotent(v in prop::collection::vec(-4.0f64..4.0, 6)) {
            let m = Matrix::new(2, 3, v).unwrap();
            let (once, _) = l2_normalize_rows(&m, 1e-12);
            let (twice, _) = l2_normalize_rows(&once, 1e-12);
            prop_assert!(once.max_abs_diff(&twice).unwrap() <= 1e-10);
            for r in 0..2 {
                let n: f64 = once.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
            }
        }
    }
}
