//! Dense linear algebra: matrices, vector helpers and a small-matrix SVD.

mod matrix;
mod scalar;
mod svd;

pub use matrix::Matrix;
pub use scalar::{DType, Scalar};
pub use svd::{svd_thin, SvdResult};

use crate::error::{invalid, Error, Result};

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalise vector of norm {n}")));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_similarity<T: Scalar>(q: &[T], k: &[T]) -> Result<T> {
    if q.len() != k.len() {
        return Err(invalid!("length mismatch {} vs {}", q.len(), k.len()));
    }
    let (nq, nk) = (norm(q), norm(k));
    if !(nq > T::zero()) || !(nk > T::zero()) {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let s = dot(q, k) / (nq * nk);
    Ok(s.max(-T::one()).min(T::one()))
}

pub fn euclidean_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(invalid!("length mismatch {} vs {}", a.len(), b.len()));
    }
    Ok(squared_distance(a, b).sqrt())
}

#[inline]
pub(crate) fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        let u = [0.0f32, 1.0, 0.0];
        assert_eq!(l2_normalize(&u).unwrap(), u.to_vec());
        assert!(matches!(l2_normalize(&[0.0f32, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cosine_examples() {
        let q = [0.3f64, -1.2, 2.0];
        assert!((cosine_similarity(&q, &q).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = [1.5f64, -2.0];
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0f64, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean_distance(&[0.0f64], &[3.0, 4.0]).is_err());
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 5)
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in vec3(), b in vec3(), c in vec3()) {
            let ab = euclidean_distance(&a, &b).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab, euclidean_distance(&b, &a).unwrap());
        }

        #[test]
        fn cosine_is_dot_of_normalised(q in vec3(), k in vec3()) {
            prop_assume!(norm(&q) > 1e-3 && norm(&k) > 1e-3);
            let direct = cosine_similarity(&q, &k).unwrap();
            let via = dot(&l2_normalize(&q).unwrap(), &l2_normalize(&k).unwrap());
            prop_assert!((direct - via).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&direct));
        }

        #[test]
        fn normalised_has_unit_norm(v in vec3()) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-6);
        }
    }
}
