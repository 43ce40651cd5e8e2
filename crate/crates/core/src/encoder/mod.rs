//! The representation model: a fully connected ReLU network whose output is
//! L2-normalised, so dot products of embeddings are cosine similarities.
//! The normalisation is part of the model and its Jacobian is part of
//! [`backward`].

mod optim;

pub use optim::{cosine_lr, momentum_update, sgd_step, sgd_update, OptimState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, Scalar};

/// Layer widths, input first: `[d_obs, hidden.., embed_dim]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture(pub Vec<usize>);

impl Architecture {
    pub fn new(input: usize, hidden: &[usize], embed: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(embed);
        Self(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() < 2 {
            return Err(invalid!("architecture needs at least one layer"));
        }
        if self.0.iter().any(|&d| d == 0) {
            return Err(invalid!("zero-width layer in {:?}", self.0));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `out × in`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn architecture(&self) -> Architecture {
        let mut dims = vec![self.layers[0].weight.cols()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        Architecture(dims)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .0
                .windows(2)
                .map(|w| Dense {
                    weight: Matrix::zeros(w[1], w[0]),
                    bias: vec![T::zero(); w[1]],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.architecture())
    }

    /// Parameter blocks in a fixed order (weight, bias per layer).
    pub fn blocks(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.architecture() == other.architecture()
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs()))
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Query encoder plus its momentum (key) copy.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair<T> {
    pub query: EncoderParams<T>,
    pub key: EncoderParams<T>,
    pub momentum: f64,
}

/// Fan-in scaled uniform initialisation; the key encoder starts as an exact
/// copy of the query encoder.
pub fn init_encoder<T: Scalar>(arch: &Architecture, seed: u64, momentum: f64) -> Result<EncoderPair<T>> {
    arch.validate()?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(invalid!("momentum {momentum} outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .0
        .windows(2)
        .map(|w| {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let weight = Matrix::from_fn(w[1], w[0], |_, _| T::of(rng.gen_range(-bound..bound)));
            let bias = (0..w[1]).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
            Dense { weight, bias }
        })
        .collect();
    let query = EncoderParams { layers };
    Ok(EncoderPair {
        key: query.clone(),
        query,
        momentum,
    })
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input of every layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix<T>>,
    /// Norm of each pre-normalisation output row.
    norms: Vec<T>,
    /// Normalised output.
    output: Matrix<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }

    /// Which hidden units were active, flattened over layers and rows.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.inputs[1..]
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

pub fn forward<T: Scalar>(params: &EncoderParams<T>, batch: &Matrix<T>) -> Result<Matrix<T>> {
    forward_cached(params, batch).map(|c| c.output)
}

pub fn forward_cached<T: Scalar>(params: &EncoderParams<T>, batch: &Matrix<T>) -> Result<ForwardCache<T>> {
    if batch.cols() != params.input_dim() {
        return Err(invalid!(
            "batch has {} columns, encoder expects {}",
            batch.cols(),
            params.input_dim()
        ));
    }
    if !batch.is_finite() {
        return Err(invalid!("non-finite values in encoder input"));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut h = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = h.matmul_t(&layer.weight)?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (v, &b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
                if i < last && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        inputs.push(std::mem::replace(&mut h, z));
    }
    let norms = h.normalize_rows().map_err(|e| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("encoder output collapsed: {m}")),
        other => other,
    })?;
    Ok(ForwardCache {
        inputs,
        norms,
        output: h,
    })
}

/// Parameter gradients plus the gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: EncoderParams<T>,
    pub input: Matrix<T>,
}

/// Exact gradient of `sum(grad_embeddings ∘ forward(batch))` with respect to
/// parameters and input.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &Matrix<T>,
    grad_embeddings: &Matrix<T>,
) -> Result<Gradients<T>> {
    let cache = forward_cached(params, batch)?;
    backward_cached(params, &cache, grad_embeddings)
}

pub fn backward_cached<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &ForwardCache<T>,
    grad_embeddings: &Matrix<T>,
) -> Result<Gradients<T>> {
    let y = &cache.output;
    if grad_embeddings.shape() != y.shape() {
        return Err(invalid!(
            "upstream gradient {:?} does not match embeddings {:?}",
            grad_embeddings.shape(),
            y.shape()
        ));
    }
    // through y = z / |z|: dz = (g - y (y·g)) / |z|
    let mut dz = grad_embeddings.clone();
    for r in 0..dz.rows() {
        let yr = y.row(r);
        let proj = crate::linalg::dot(yr, dz.row(r));
        let inv = T::one() / cache.norms[r];
        for (g, &yv) in dz.row_mut(r).iter_mut().zip(yr) {
            *g = (*g - yv * proj) * inv;
        }
    }

    let mut grads = params.zeros_like();
    for i in (0..params.layers.len()).rev() {
        let input = &cache.inputs[i];
        let g = &mut grads.layers[i];
        g.weight = dz.t_matmul(input)?;
        for r in 0..dz.rows() {
            for (b, &d) in g.bias.iter_mut().zip(dz.row(r)) {
                *b += d;
            }
        }
        let mut dh = dz.matmul(&params.layers[i].weight)?;
        if i > 0 {
            // relu mask: the stored input is the post-activation
            for (d, &a) in dh.as_mut_slice().iter_mut().zip(input.as_slice()) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        dz = dh;
    }
    Ok(Gradients {
        params: grads,
        input: dz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_key_copies_query() {
        let arch = Architecture::new(6, &[5], 4);
        let a = init_encoder::<f32>(&arch, 3, 0.999).unwrap();
        let b = init_encoder::<f32>(&arch, 3, 0.999).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.query.max_abs_diff(&a.key), 0.0);
        let c = init_encoder::<f32>(&arch, 4, 0.999).unwrap();
        assert!(a.query.max_abs_diff(&c.query) > 0.0);
        assert!(init_encoder::<f32>(&Architecture::new(6, &[0], 4), 3, 0.9).is_err());
    }

    #[test]
    fn outputs_are_unit_norm() {
        let pair = init_encoder::<f32>(&Architecture::new(8, &[16], 4), 1, 0.9).unwrap();
        let x = batch(10, 8, 2).cast::<f32>();
        let y = forward(&pair.query, &x).unwrap();
        for r in y.row_iter() {
            let n = crate::linalg::norm(r);
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn duplicate_rows_embed_identically() {
        let pair = init_encoder::<f64>(&Architecture::new(3, &[4], 2), 1, 0.9).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.1, 0.2, 0.3]]).unwrap();
        let y = forward(&pair.query, &x).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn zero_weights_give_normalised_bias() {
        let arch = Architecture::new(3, &[4], 2);
        let mut p = EncoderParams::<f64>::zeros(&arch);
        p.layers[1].bias = vec![3.0, 4.0];
        let x = batch(5, 3, 1);
        let y = forward(&p, &x).unwrap();
        for r in y.row_iter() {
            assert!((r[0] - 0.6).abs() < 1e-12 && (r[1] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_or_misshapen_input_is_rejected() {
        let pair = init_encoder::<f64>(&Architecture::new(3, &[4], 2), 1, 0.9).unwrap();
        let mut x = batch(2, 3, 1);
        assert!(forward(&pair.query, &batch(2, 4, 1)).is_err());
        x.as_mut_slice()[0] = f64::NAN;
        assert!(forward(&pair.query, &x).is_err());
        let x = batch(2, 3, 1);
        assert!(backward(&pair.query, &x, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let pair = init_encoder::<f64>(&Architecture::new(4, &[3], 2), 1, 0.9).unwrap();
        let x = batch(3, 4, 1);
        let g = backward(&pair.query, &x, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(g.params.max_abs_diff(&pair.query.zeros_like()), 0.0);
        assert_eq!(g.input.max_abs(), 0.0);
    }

    /// Loss used for the finite-difference checks: fixed linear functional of
    /// the embeddings, plus the ReLU pattern so kink crossings can be detected.
    fn probe_loss(p: &EncoderParams<f64>, x: &Matrix<f64>, w: &Matrix<f64>) -> (f64, Vec<bool>) {
        let c = forward_cached(p, x).unwrap();
        let l = c.output().as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        (l, c.activation_pattern())
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
    }

    /// Five-point central difference; `None` when the stencil crosses a
    /// ReLU kink.
    fn central_difference(mut eval: impl FnMut(f64) -> (f64, Vec<bool>), h: f64) -> Option<f64> {
        let (_, base) = eval(0.0);
        let mut vals = [0.0; 4];
        for (v, off) in vals.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
            let (l, pattern) = eval(off * h);
            if pattern != base {
                return None;
            }
            *v = l;
        }
        Some((vals[0] - 8.0 * vals[1] + 8.0 * vals[2] - vals[3]) / (12.0 * h))
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-4;
        let mut checked = 0usize;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let arch = if trial == 0 {
                Architecture::new(4, &[3], 2)
            } else {
                Architecture::new(rng.gen_range(1..=8), &[rng.gen_range(1..=8)], rng.gen_range(2..=4))
            };
            let p = init_encoder::<f64>(&arch, trial, 0.9).unwrap().query;
            let x = batch(3, arch.0[0], 200 + trial);
            let w = batch(3, *arch.0.last().unwrap(), 300 + trial);
            let g = backward(&p, &x, &w).unwrap();
            let analytic = g.params.blocks().iter().flat_map(|b| b.to_vec()).collect::<Vec<_>>();
            let mut probe = p.clone();
            let mut worst: f64 = 0.0;
            let mut k = 0;
            for bi in 0..probe.blocks().len() {
                for j in 0..probe.blocks()[bi].len() {
                    let orig = probe.blocks()[bi][j];
                    let numeric = central_difference(
                        |d| {
                            probe.blocks_mut()[bi][j] = orig + d;
                            let out = probe_loss(&probe, &x, &w);
                            probe.blocks_mut()[bi][j] = orig;
                            out
                        },
                        h,
                    );
                    if let Some(n) = numeric {
                        worst = worst.max(relative_error(analytic[k], n));
                        checked += 1;
                    }
                    k += 1;
                }
            }
            assert!(worst < 1e-6, "trial {trial} ({:?}): relative error {worst}", arch.0);
        }
        assert!(checked > 1000);
    }

    #[test]
    fn input_scaling_gradient_matches() {
        // d/ds L(f(s·x)) at s = 1 equals <dL/dx, x>
        let p = init_encoder::<f64>(&Architecture::new(5, &[7], 3), 8, 0.9).unwrap().query;
        let x = batch(4, 5, 9);
        let w = batch(4, 3, 10);
        let g = backward(&p, &x, &w).unwrap();
        let analytic: f64 = g.input.as_slice().iter().zip(x.as_slice()).map(|(a, b)| a * b).sum();
        let h = 1e-4;
        let numeric = central_difference(|d| probe_loss(&p, &x.map(|v| v * (1.0 + d)), &w), h)
            .expect("no kink at this seed");
        assert!(relative_error(analytic, numeric) < 1e-6);
    }
}
