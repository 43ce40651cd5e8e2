//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Aimed at the tiny matrices this crate decomposes (camera classifiers are
//! `m × n` with `m` the camera count). All arithmetic runs in `f64` and is
//! converted back to the caller's precision at the end.

use super::{Matrix, Scalar};
use crate::error::{invalid, Result};

const OFF_DIAGONAL_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// `m × r` left singular vectors (columns).
    pub u: Matrix<T>,
    /// Singular values, non-increasing.
    pub sigma: Vec<T>,
    /// `r × n` right singular vectors (rows).
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, &s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.vt).expect("consistent svd shapes")
    }
}

pub fn svd_thin<T: Scalar>(w: &Matrix<T>) -> Result<SvdResult<T>> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(invalid!("svd of empty {m}x{n} matrix"));
    }
    if !w.is_finite() {
        return Err(invalid!("svd input contains non-finite entries"));
    }
    let w64: Matrix<f64> = w.cast();
    // Work on a tall matrix.
    let tall = m >= n;
    let b = if tall { w64 } else { w64.transpose() };
    let (cols_u, sigma, rot) = jacobi(b);
    // tall:  W  = U Σ Rᵀ  ->  u = U, vt = Rᵀ
    // wide:  Wᵀ = U Σ Rᵀ  ->  u = R, vt = Uᵀ
    let (u, vt) = if tall {
        (cols_u, rot.transpose())
    } else {
        (rot, cols_u.transpose())
    };
    Ok(SvdResult {
        u: u.cast(),
        sigma: sigma.into_iter().map(T::of).collect(),
        vt: vt.cast(),
    })
}

/// Orthogonalises the columns of `b` (p × q, p ≥ q). Returns the normalised
/// columns, the sorted column norms and the accumulated rotation.
fn jacobi(mut b: Matrix<f64>) -> (Matrix<f64>, Vec<f64>, Matrix<f64>) {
    let (p, q) = b.shape();
    let mut v = Matrix::<f64>::identity(q);
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..q {
            for j in (i + 1)..q {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..p {
                    let (x, y) = (b[(r, i)], b[(r, j)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(ratio);
                if ratio <= OFF_DIAGONAL_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut b, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if off <= OFF_DIAGONAL_TOL {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = (0..q)
        .map(|c| (c, (0..p).map(|r| b[(r, c)].powi(2)).sum::<f64>().sqrt()))
        .collect();
    // stable sort keeps the output deterministic under equal norms
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let smax = order.first().map_or(0.0, |o| o.1);
    let null_tol = smax * 1e-13 * (p.max(q) as f64);
    let mut u = Matrix::<f64>::zeros(p, q);
    let mut rot = Matrix::<f64>::zeros(q, q);
    let mut sigma = Vec::with_capacity(q);
    let mut missing = Vec::new();
    for (dst, &(src, s)) in order.iter().enumerate() {
        for r in 0..q {
            rot[(r, dst)] = v[(r, src)];
        }
        if s > null_tol && s > 0.0 {
            for r in 0..p {
                u[(r, dst)] = b[(r, src)] / s;
            }
            sigma.push(s);
        } else {
            sigma.push(0.0);
            missing.push(dst);
        }
    }
    complete_basis(&mut u, &missing);
    (u, sigma, rot)
}

fn rotate(m: &mut Matrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.rows() {
        let (x, y) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * x - s * y;
        m[(r, j)] = s * x + c * y;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to every other
/// column, by Gram-Schmidt over the standard basis.
fn complete_basis(u: &mut Matrix<f64>, missing: &[usize]) {
    let (p, q) = u.shape();
    let mut filled: Vec<usize> = (0..q).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0usize;
    for &col in missing {
        while candidate < p {
            let mut e = vec![0.0; p];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let proj: f64 = (0..p).map(|r| u[(r, f)] * e[r]).sum();
                    for (r, x) in e.iter_mut().enumerate() {
                        *x -= proj * u[(r, f)];
                    }
                }
            }
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for (r, x) in e.iter().enumerate() {
                    u[(r, col)] = x / n;
                }
                filled.push(col);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix<f64> {
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn orthonormality_error(m: &Matrix<f64>) -> f64 {
        // columns of m
        let g = m.t_matmul(m).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
    }

    #[test]
    fn identity_and_diagonal() {
        let s = svd_thin(&Matrix::<f64>::identity(2)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0]);
        let d = Matrix::from_diag(&[3.0f64, 4.0]);
        let s = svd_thin(&d).unwrap();
        assert!((s.sigma[0] - 4.0).abs() < 1e-12 && (s.sigma[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn wide_random_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 3, 5);
        let s = svd_thin(&w).unwrap();
        assert_eq!(s.u.shape(), (3, 3));
        assert_eq!(s.vt.shape(), (3, 5));
        let err = s.reconstruct().sub(&w).unwrap().frobenius_norm() / w.frobenius_norm();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn rank_deficient_bases_are_completed() {
        // rows sum to zero: rank 2 in a 3x6 matrix
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = random(&mut rng, 3, 6);
        for c in 0..6 {
            let mean = (0..3).map(|r| w[(r, c)]).sum::<f64>() / 3.0;
            for r in 0..3 {
                w[(r, c)] -= mean;
            }
        }
        let s = svd_thin(&w).unwrap();
        assert!(s.sigma[2] < 1e-12);
        assert!(orthonormality_error(&s.vt.transpose()) < 1e-10);
        assert!(orthonormality_error(&s.u) < 1e-10);
        let err = s.reconstruct().sub(&w).unwrap().frobenius_norm();
        assert!(err < 1e-10);
    }

    #[test]
    fn zero_matrix() {
        let s = svd_thin(&Matrix::<f64>::zeros(2, 4)).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&s.vt.transpose()) < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut w = Matrix::<f64>::zeros(2, 2);
        w.as_mut_slice()[1] = f64::INFINITY;
        assert!(svd_thin(&w).is_err());
        assert!(svd_thin(&Matrix::<f64>::zeros(0, 3)).is_err());
    }

    fn check_many<T: Scalar>(tol: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let m = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=16);
            let w64 = random(&mut rng, m, n);
            let w: Matrix<T> = w64.cast();
            let s = svd_thin(&w).unwrap();
            let rec: Matrix<f64> = s.reconstruct().cast();
            let wc: Matrix<f64> = w.cast();
            let err = rec.sub(&wc).unwrap().frobenius_norm() / wc.frobenius_norm();
            assert!(err < tol, "{m}x{n}: relative error {err}");
            assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
            assert!(s.sigma.iter().all(|&x| x >= T::zero()));
            let v: Matrix<f64> = s.vt.transpose().cast();
            assert!(orthonormality_error(&v) < 1e-5);
            let u: Matrix<f64> = s.u.cast();
            assert!(orthonormality_error(&u) < 1e-5);
        }
    }

    #[test]
    fn reconstruction_over_random_shapes_f32() {
        check_many::<f32>(1e-5, 11);
    }

    #[test]
    fn reconstruction_over_random_shapes_f64() {
        check_many::<f64>(1e-10, 12);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 4, 7);
        let (a, b) = (svd_thin(&w).unwrap(), svd_thin(&w).unwrap());
        assert_eq!(a.vt, b.vt);
        assert_eq!(a.sigma, b.sigma);
    }
}
