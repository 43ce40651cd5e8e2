//! Camera component reduction.
//!
//! A bias-free softmax classifier is fit to predict the camera from frozen
//! embeddings. The leading right singular vectors of its (row-centred)
//! weight matrix span the camera-discriminative directions, and embeddings
//! are projected onto their orthogonal complement.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, svd_thin, Matrix, Scalar};

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Subtract the mean class vector from every row of `W`.
    #[default]
    RowMean,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcrConfig {
    /// Number of removed directions. `None` means one per camera.
    pub k: Option<usize>,
    pub centering: Centering,
    pub epochs: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    /// Re-normalise projected embeddings to unit length.
    pub renormalize: bool,
}

impl Default for CcrConfig {
    fn default() -> Self {
        Self {
            k: None,
            centering: Centering::RowMean,
            epochs: 30,
            lr: 0.5,
            holdout_fraction: 0.2,
            renormalize: false,
        }
    }
}

/// Linear camera classifier, `logits = W·f`.
#[derive(Debug, Clone)]
pub struct CameraClassifier<T> {
    /// `m × n`: one row per camera.
    pub weight: Matrix<T>,
    pub cameras: Vec<u32>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

impl<T: Scalar> CameraClassifier<T> {
    pub fn num_cameras(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, embeddings: &Matrix<T>) -> Result<Matrix<T>> {
        embeddings.matmul_t(&self.weight)
    }

    /// Fraction of rows whose arg-max logit is the true camera.
    pub fn accuracy(&self, embeddings: &Matrix<T>, cameras: &[u32]) -> Result<f64> {
        let classes = self.class_indices(cameras)?;
        let logits = self.logits(embeddings)?;
        Ok(accuracy(&logits, &classes))
    }

    fn class_indices(&self, cameras: &[u32]) -> Result<Vec<usize>> {
        cameras
            .iter()
            .map(|c| {
                self.cameras
                    .binary_search(c)
                    .map_err(|_| invalid!("camera {c} unknown to the classifier"))
            })
            .collect()
    }

    /// `W` after the given centering.
    pub fn centered(&self, centering: Centering) -> Matrix<T> {
        let mean = row_mean(&self.weight);
        match centering {
            Centering::None => self.weight.clone(),
            Centering::RowMean => Matrix::from_fn(self.weight.rows(), self.weight.cols(), |r, c| {
                self.weight[(r, c)] - mean[c]
            }),
        }
    }
}

fn row_mean<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut mean = vec![T::zero(); m.cols()];
    for row in m.row_iter() {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    let inv = T::one() / T::of(m.rows().max(1) as f64);
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn accuracy<T: Scalar>(logits: &Matrix<T>, classes: &[usize]) -> f64 {
    if classes.is_empty() {
        return f64::NAN;
    }
    let hits = classes
        .iter()
        .enumerate()
        .filter(|&(r, &c)| {
            let row = logits.row(r);
            // strict: ties count as misses
            row.iter().enumerate().all(|(j, &v)| j == c || v < row[c])
        })
        .count();
    hits as f64 / classes.len() as f64
}

/// Multinomial logistic regression without bias, trained by mini-batch SGD
/// with momentum on a shuffled split. Accuracy is reported on the held-out
/// part.
pub fn fit_camera_classifier<T: Scalar>(
    embeddings: &Matrix<T>,
    camera_labels: &[u32],
    config: &CcrConfig,
    seed: u64,
) -> Result<CameraClassifier<T>> {
    let n = embeddings.rows();
    if camera_labels.len() != n {
        return Err(invalid!("{} labels for {n} embeddings", camera_labels.len()));
    }
    let mut cameras = camera_labels.to_vec();
    cameras.sort_unstable();
    cameras.dedup();
    if cameras.len() < 2 {
        return Err(invalid!("camera classifier needs at least two cameras"));
    }
    if cameras.len() > embeddings.cols() {
        return Err(invalid!(
            "{} cameras exceed embedding dimension {}",
            cameras.len(),
            embeddings.cols()
        ));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) || !(config.lr > 0.0) {
        return Err(invalid!("holdout fraction must lie in [0, 1) and lr must be positive"));
    }
    let tol = T::NORM_TOL.max(1e-4) * 10.0;
    if let Some(r) = (0..n).find(|&r| (norm(embeddings.row(r)).as_f64() - 1.0).abs() > tol) {
        return Err(invalid!("embedding {r} is not unit norm"));
    }

    let m = cameras.len();
    let mut clf = CameraClassifier {
        weight: Matrix::<T>::zeros(m, embeddings.cols()),
        cameras,
        train_accuracy: 0.0,
        holdout_accuracy: f64::NAN,
    };
    let classes = clf.class_indices(camera_labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = (config.holdout_fraction * n as f64).round() as usize;
    let (hold, mut train) = order.split_at(n_hold.min(n.saturating_sub(1)));
    let hold = hold.to_vec();

    // optimisation in f64 regardless of storage precision
    let x = embeddings.cast::<f64>();
    let mut w = Matrix::<f64>::zeros(m, x.cols());
    let mut velocity = Matrix::<f64>::zeros(m, x.cols());
    const BATCH: usize = 256;
    let mut train_vec = train.to_vec();
    for _ in 0..config.epochs {
        train_vec.shuffle(&mut rng);
        for chunk in train_vec.chunks(BATCH) {
            let xb = x.select_rows(chunk);
            let mut probs = xb.matmul_t(&w)?;
            for (r, &i) in chunk.iter().enumerate() {
                let row = probs.row_mut(r);
                softmax_in_place(row);
                row[classes[i]] -= 1.0;
            }
            let mut grad = probs.t_matmul(&xb)?;
            let scale = 1.0 / chunk.len() as f64;
            grad.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
            for ((p, v), g) in w
                .as_mut_slice()
                .iter_mut()
                .zip(velocity.as_mut_slice())
                .zip(grad.as_slice())
            {
                *v = 0.9 * *v + g;
                *p -= config.lr * *v;
            }
        }
        if !w.is_finite() {
            return Err(Error::Divergence("camera classifier weights became non-finite".into()));
        }
    }
    train = &train_vec;
    clf.weight = w.cast();
    let subset = |idx: &[usize]| -> Result<f64> {
        let logits = clf.logits(&embeddings.select_rows(idx))?;
        let cls: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
        Ok(accuracy(&logits, &cls))
    };
    let (train_acc, hold_acc) = (subset(train)?, subset(&hold)?);
    clf.train_accuracy = train_acc;
    clf.holdout_accuracy = hold_acc;
    Ok(clf)
}

/// `P = I − V·Vᵀ`, stored through `V`.
#[derive(Debug, Clone)]
pub struct CcrProjector<T> {
    /// `n × k`, orthonormal columns.
    pub v: Matrix<T>,
    pub k_requested: usize,
    pub num_cameras: usize,
    pub centering: Centering,
    /// Mean class vector subtracted from `W` (zeros without centering).
    pub center: Vec<T>,
    pub singular_values: Vec<T>,
}

impl<T: Scalar> CcrProjector<T> {
    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    /// Directions actually removed. May be below `k_requested` when the
    /// centred weights are rank deficient.
    pub fn k(&self) -> usize {
        self.v.cols()
    }

    pub fn matrix(&self) -> Matrix<T> {
        let mut p = self.v.matmul_t(&self.v).expect("square projector");
        for v in p.as_mut_slice().iter_mut() {
            *v = -*v;
        }
        for i in 0..self.dim() {
            p[(i, i)] += T::one();
        }
        p
    }

    /// Row-wise `F − (F·V)·Vᵀ`.
    pub fn apply_rows(&self, f: &Matrix<T>) -> Result<Matrix<T>> {
        if f.cols() != self.dim() {
            return Err(invalid!("embedding dimension {} vs projector {}", f.cols(), self.dim()));
        }
        let mut out = f.clone();
        if self.k() > 0 {
            let coeffs = f.matmul(&self.v)?;
            coeffs.matmul_into(&self.v.transpose(), -T::one(), T::one(), &mut out)?;
        }
        Ok(out)
    }
}

pub fn build_projector<T: Scalar>(
    clf: &CameraClassifier<T>,
    k: usize,
    centering: Centering,
) -> Result<CcrProjector<T>> {
    let m = clf.num_cameras();
    if k == 0 || k > m {
        return Err(invalid!("k = {k} outside 1..={m}"));
    }
    let wide = CameraClassifier {
        weight: clf.weight.cast::<f64>(),
        cameras: Vec::new(),
        train_accuracy: clf.train_accuracy,
        holdout_accuracy: clf.holdout_accuracy,
    };
    let centered = wide.centered(centering);
    let center = match centering {
        Centering::RowMean => row_mean(&clf.weight),
        Centering::None => vec![T::zero(); clf.weight.cols()],
    };
    let svd = svd_thin(&centered)?;
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    // completion vectors of a rank-deficient W carry no camera information
    let rank = svd.sigma.iter().filter(|&&s| s > RANK_TOL * smax && s > 0.0).count();
    let keep = k.min(rank);
    let n = centered.cols();
    let mut basis: Vec<Vec<f64>> = (0..keep).map(|c| svd.vt.row(c).to_vec()).collect();
    orthonormalize(&mut basis);
    let v = Matrix::from_fn(n, keep, |r, c| T::of(basis[c][r]));
    Ok(CcrProjector {
        v,
        k_requested: k,
        num_cameras: m,
        centering,
        center,
        singular_values: svd.sigma.iter().map(|&s| T::of(s)).collect(),
    })
}

/// Two passes of modified Gram-Schmidt, tightening the Jacobi tolerance to
/// working precision.
fn orthonormalize(vs: &mut [Vec<f64>]) {
    for _ in 0..2 {
        for i in 0..vs.len() {
            let (done, rest) = vs.split_at_mut(i);
            let v = &mut rest[0];
            for u in done.iter() {
                let d = crate::linalg::dot(u, v);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = norm(v);
            v.iter_mut().for_each(|a| *a /= n);
        }
    }
}

pub fn apply_ccr<T: Scalar>(projector: &CcrProjector<T>, f: &[T]) -> Result<Vec<T>> {
    let row = Matrix::from_vec(1, f.len(), f.to_vec())?;
    Ok(projector.apply_rows(&row)?.into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nullification {
    /// Largest `|W_c · P · f|` over samples and cameras.
    pub max_abs_logit: f64,
    /// Largest `|softmax_j − 1/m|` of the classifier on projected samples.
    pub max_prob_deviation: f64,
}

pub fn nullification_check<T: Scalar>(
    clf: &CameraClassifier<T>,
    projector: &CcrProjector<T>,
    samples: &Matrix<T>,
) -> Result<Nullification> {
    let projected = projector.apply_rows(samples)?;
    let centered_logits = projected.matmul_t(&clf.centered(projector.centering))?;
    let raw_logits = clf.logits(&projected)?.cast::<f64>();
    let m = clf.num_cameras() as f64;
    let mut max_prob_deviation = 0.0f64;
    for r in 0..raw_logits.rows() {
        let mut row = raw_logits.row(r).to_vec();
        softmax_in_place(&mut row);
        for p in row {
            max_prob_deviation = max_prob_deviation.max((p - 1.0 / m).abs());
        }
    }
    Ok(Nullification {
        max_abs_logit: centered_logits.max_abs().as_f64(),
        max_prob_deviation,
    })
}
