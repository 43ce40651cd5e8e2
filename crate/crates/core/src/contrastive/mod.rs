//! InfoNCE with a momentum-encoder memory bank, and the two training loops
//! built on it: instance discrimination over augmented detections and
//! tracklet segment discrimination.

mod bank;
mod train;

pub use bank::MemoryBank;
pub use train::{sample_tsd_pair, ContrastiveConfig, TrainStats, Trainer};

use crate::error::{invalid, Result};
use crate::linalg::{dot, Matrix, Scalar};

/// Loss and gradients for one query.
#[derive(Debug, Clone)]
pub struct InfoNce<T> {
    pub loss: T,
    pub grad_q: Vec<T>,
    pub grad_kpos: Vec<T>,
}

/// Mean loss over a batch and the gradients of that mean.
#[derive(Debug, Clone)]
pub struct BatchInfoNce<T> {
    pub loss: T,
    pub grad_q: Matrix<T>,
    pub grad_kpos: Matrix<T>,
}

/// `-log( e^{q·k⁺/τ} / (e^{q·k⁺/τ} + Σ e^{q·k⁻/τ}) )` for unit-norm `q`,
/// `k⁺` and negatives taken from `bank`. Negatives receive no gradient.
pub fn info_nce<T: Scalar>(q: &[T], k_pos: &[T], bank: &MemoryBank<T>, tau: f64) -> Result<InfoNce<T>> {
    let qm = Matrix::from_vec(1, q.len(), q.to_vec())?;
    let km = Matrix::from_vec(1, k_pos.len(), k_pos.to_vec())?;
    let out = info_nce_batch(&qm, &km, &bank.negatives(), tau)?;
    // batch mean over one row is the row itself
    Ok(InfoNce {
        loss: out.loss,
        grad_q: out.grad_q.into_vec(),
        grad_kpos: out.grad_kpos.into_vec(),
    })
}

pub fn info_nce_batch<T: Scalar>(
    q: &Matrix<T>,
    k_pos: &Matrix<T>,
    negatives: &Matrix<T>,
    tau: f64,
) -> Result<BatchInfoNce<T>> {
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    if q.shape() != k_pos.shape() {
        return Err(invalid!("query {:?} and key {:?} shapes differ", q.shape(), k_pos.shape()));
    }
    if negatives.rows() == 0 {
        return Err(invalid!("no negatives available"));
    }
    if negatives.cols() != q.cols() {
        return Err(invalid!("negative dimension {} vs query dimension {}", negatives.cols(), q.cols()));
    }
    if q.rows() == 0 {
        return Err(invalid!("empty batch"));
    }
    let tol = T::NORM_TOL * 10.0;
    for (name, m) in [("query", q), ("positive key", k_pos)] {
        if let Some(r) = (0..m.rows()).find(|&r| (dot(m.row(r), m.row(r)).sqrt().as_f64() - 1.0).abs() > tol) {
            return Err(invalid!("{name} {r} is not unit norm"));
        }
    }

    let b = q.rows();
    let inv_tau = T::of(1.0 / tau);
    // softmax weights over negatives, reused in place for the gradient
    let mut weights = q.matmul_t(negatives)?;
    let mut pos_coef = Vec::with_capacity(b);
    let mut total = 0.0f64;
    for r in 0..b {
        let pos = dot(q.row(r), k_pos.row(r)) * inv_tau;
        let row = weights.row_mut(r);
        let mut max = pos;
        for v in row.iter_mut() {
            *v *= inv_tau;
            max = max.max(*v);
        }
        let e_pos = (pos - max).exp();
        let mut z = e_pos;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        let p_pos = e_pos / z;
        total += (max + z.ln() - pos).as_f64();
        pos_coef.push(p_pos - T::one());
    }

    let scale = inv_tau / T::of(b as f64);
    // dL/dq = ((p⁺ − 1)·k⁺ + Σ p⁻·k⁻) / τ
    let mut grad_q = weights.matmul(negatives)?;
    let mut grad_kpos = Matrix::zeros(b, q.cols());
    for r in 0..b {
        let c = pos_coef[r];
        let (kr, qr) = (k_pos.row(r), q.row(r));
        for (g, &k) in grad_q.row_mut(r).iter_mut().zip(kr) {
            *g = (*g + c * k) * scale;
        }
        for (gk, &qv) in grad_kpos.row_mut(r).iter_mut().zip(qr) {
            *gk = c * qv * scale;
        }
    }
    Ok(BatchInfoNce {
        loss: T::of(total / b as f64),
        grad_q,
        grad_kpos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        l2_normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
    }

    fn bank_of(rows: &[Vec<f64>]) -> MemoryBank<f64> {
        let mut bank = MemoryBank::new(rows.len(), rows[0].len()).unwrap();
        bank.enqueue(&Matrix::from_rows(rows).unwrap()).unwrap();
        bank
    }

    /// Direct evaluation of the loss from dot products.
    fn reference_loss(q: &[f64], k: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let pos = (dot(q, k) / tau).exp();
        let neg: f64 = negs.iter().map(|n| (dot(q, n) / tau).exp()).sum();
        -(pos / (pos + neg)).ln()
    }

    #[test]
    fn orthogonal_negative_at_unit_temperature() {
        let q = vec![1.0, 0.0];
        let out = info_nce(&q, &q, &bank_of(&[vec![0.0, 1.0]]), 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - want).abs() < 1e-12);
        assert!((want - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn uniform_logits_give_log_n_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = unit(&mut rng, 6);
        let negs = vec![q.clone(); 9];
        for tau in [0.07, 0.5, 2.0] {
            let out = info_nce(&q, &q, &bank_of(&negs), tau).unwrap();
            assert!((out.loss - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_temperature_and_inputs() {
        let q = vec![1.0, 0.0];
        let bank = bank_of(&[vec![0.0, 1.0]]);
        assert!(info_nce(&q, &q, &bank, 0.0).is_err());
        assert!(info_nce(&q, &q, &bank, -1.0).is_err());
        assert!(info_nce(&[2.0, 0.0], &q, &bank, 1.0).is_err());
        let empty = MemoryBank::<f64>::new(4, 2).unwrap();
        assert!(info_nce(&q, &q, &empty, 1.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let d = rng.gen_range(2..=8);
            let n = rng.gen_range(1..=16);
            let tau = rng.gen_range(0.05..1.0);
            let q = unit(&mut rng, d);
            let k = unit(&mut rng, d);
            let negs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
            let out = info_nce(&q, &k, &bank_of(&negs), tau).unwrap();
            for (which, analytic) in [(0, &out.grad_q), (1, &out.grad_kpos)] {
                for i in 0..d {
                    let eval = |delta: f64| {
                        let (mut qq, mut kk) = (q.clone(), k.clone());
                        if which == 0 { qq[i] += delta } else { kk[i] += delta }
                        reference_loss(&qq, &kk, &negs, tau)
                    };
                    let numeric = (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
                    let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
                    assert!(rel < 1e-6, "rel error {rel}");
                }
            }
        }
    }

    #[test]
    fn permutation_invariant_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = unit(&mut rng, 5);
        let k = unit(&mut rng, 5);
        let mut negs: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 5)).collect();
        let base = info_nce(&q, &k, &bank_of(&negs), 0.2).unwrap().loss;
        negs.reverse();
        let permuted = info_nce(&q, &k, &bank_of(&negs), 0.2).unwrap().loss;
        assert!((base - permuted).abs() < 1e-12);

        // moving k⁺ toward q lowers the loss; moving a negative toward q raises it
        let closer: Vec<f64> = l2_normalize(&k.iter().zip(&q).map(|(a, b)| a + b).collect::<Vec<_>>()).unwrap();
        assert!(dot(&q, &closer) > dot(&q, &k));
        assert!(info_nce(&q, &closer, &bank_of(&negs), 0.2).unwrap().loss < base);
        negs[0] = l2_normalize(&negs[0].iter().zip(&q).map(|(a, b)| a + b).collect::<Vec<_>>()).unwrap();
        assert!(info_nce(&q, &k, &bank_of(&negs), 0.2).unwrap().loss > base);
    }

    #[test]
    fn batch_mean_matches_single_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 3)).collect();
        let ks: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 3)).collect();
        let negs: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 3)).collect();
        let bank = bank_of(&negs);
        let batch = info_nce_batch(
            &Matrix::from_rows(&qs).unwrap(),
            &Matrix::from_rows(&ks).unwrap(),
            &bank.negatives(),
            0.1,
        )
        .unwrap();
        let mut mean = 0.0;
        for i in 0..4 {
            let single = info_nce(&qs[i], &ks[i], &bank, 0.1).unwrap();
            mean += single.loss / 4.0;
            for (a, b) in batch.grad_q.row(i).iter().zip(&single.grad_q) {
                assert!((a * 4.0 - b).abs() < 1e-12);
            }
        }
        assert!((batch.loss - mean).abs() < 1e-12);
    }
}
