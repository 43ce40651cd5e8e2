use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{info_nce_batch, MemoryBank};
use crate::encoder::{forward, forward_cached, backward_cached, momentum_update, sgd_step, cosine_lr, EncoderPair, OptimState};
use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, Scalar};
use crate::synth::{augment_observation, ObservationTable};
use crate::tracklet::TrackletSegment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub bank_size: usize,
    pub momentum: f64,
    pub epochs_cid: usize,
    pub epochs_tsd: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub augment_strength: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 256,
            bank_size: 4096,
            momentum: 0.999,
            epochs_cid: 10,
            epochs_tsd: 50,
            lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            augment_strength: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid!("temperature must be positive"));
        }
        if self.batch_size == 0 || self.bank_size == 0 {
            return Err(invalid!("batch and bank sizes must be positive"));
        }
        if self.bank_size % self.batch_size != 0 {
            return Err(invalid!(
                "bank size {} is not divisible by batch size {}",
                self.bank_size,
                self.batch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.augment_strength >= 0.0) {
            return Err(invalid!("lr, weight decay and augmentation strength must be non-negative"));
        }
        Ok(())
    }

    /// Largest batch size that divides the bank and fits `n` samples.
    pub fn batch_for(&self, n: usize) -> usize {
        if n >= self.batch_size {
            return self.batch_size;
        }
        (1..=n.max(1)).rev().find(|b| self.bank_size % b == 0).unwrap_or(1)
    }
}

/// One record of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub bank_occupancy: usize,
    pub steps: usize,
    pub wall_time_s: f64,
}

/// Query/key encoders, optimiser state and negatives bank for one stage.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub pair: EncoderPair<T>,
    pub optim: OptimState<T>,
    pub bank: MemoryBank<T>,
    pub config: ContrastiveConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(pair: EncoderPair<T>, config: ContrastiveConfig) -> Result<Self> {
        config.validate()?;
        let optim = OptimState::new(&pair.query, config.lr, config.sgd_momentum, config.weight_decay);
        let bank = MemoryBank::new(config.bank_size, pair.query.embed_dim())?;
        Ok(Self {
            pair,
            optim,
            bank,
            config,
        })
    }

    /// One update from paired views. An empty bank is seeded with the
    /// batch's own keys before the loss is taken.
    pub fn step(&mut self, x_query: &Matrix<T>, x_key: &Matrix<T>, lr: f64) -> Result<f64> {
        let trained = self.bank.total_enqueued() > 0;
        let diverged = |e: Error| match e {
            Error::Degenerate(msg) if trained => Error::Divergence(msg),
            e => e,
        };
        let cache = forward_cached(&self.pair.query, x_query).map_err(diverged)?;
        let keys = forward(&self.pair.key, x_key).map_err(diverged)?;
        let seeded = self.bank.is_empty();
        if seeded {
            self.bank.enqueue(&keys)?;
        }
        let out = info_nce_batch(cache.output(), &keys, &self.bank.negatives(), self.config.temperature)?;
        let loss = out.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became {loss}")));
        }
        let grads = backward_cached(&self.pair.query, &cache, &out.grad_q)?;
        sgd_step(&mut self.pair.query, &grads.params, &mut self.optim, lr)?;
        if !self.pair.query.is_finite() {
            return Err(Error::Divergence("parameters became non-finite".into()));
        }
        momentum_update(&mut self.pair);
        if !seeded {
            self.bank.enqueue(&keys)?;
        }
        Ok(loss)
    }

    /// Instance discrimination: two augmentations of the same detection
    /// form the positive pair. Constant learning rate.
    pub fn cid_epoch(&mut self, observations: &Matrix<T>, epoch: usize, rng: &mut impl Rng) -> Result<TrainStats> {
        let b = self.config.batch_size;
        if observations.rows() < b {
            return Err(invalid!(
                "{} detections is fewer than the batch size {b}",
                observations.rows()
            ));
        }
        let start = Instant::now();
        let lr = self.config.lr;
        let mut order: Vec<usize> = (0..observations.rows()).collect();
        order.shuffle(rng);
        let mut losses = Vec::new();
        for chunk in order.chunks_exact(b) {
            let (xq, xk) = self.views(chunk.iter().map(|&i| (observations.row(i), observations.row(i))), rng)?;
            losses.push(self.step(&xq, &xk, lr)?);
        }
        Ok(self.stats("cid", epoch, &losses, lr, start))
    }

    /// Segment discrimination: two detections of the same segment form the
    /// positive pair. Segments are drawn proportionally to their length and
    /// the learning rate follows the cosine schedule over `epochs_tsd`.
    pub fn tsd_epoch(
        &mut self,
        segments: &[TrackletSegment],
        table: &ObservationTable<T>,
        epoch: usize,
        rng: &mut impl Rng,
    ) -> Result<TrainStats> {
        let usable: Vec<&TrackletSegment> = segments.iter().filter(|s| s.len() >= 2).collect();
        if usable.is_empty() {
            return Err(invalid!("no segments with at least two detections"));
        }
        let b = self.config.batch_size;
        let detections: usize = usable.iter().map(|s| s.len()).sum();
        if detections < b {
            return Err(invalid!("{detections} segment detections is fewer than the batch size {b}"));
        }
        let start = Instant::now();
        let lr = cosine_lr(epoch, self.config.epochs_tsd, self.config.lr)?;
        let picker = WeightedIndex::new(usable.iter().map(|s| s.len()))
            .map_err(|e| invalid!("segment weights: {e}"))?;
        let mut losses = Vec::new();
        for _ in 0..detections / b {
            let mut pairs = Vec::with_capacity(b);
            for _ in 0..b {
                let (a, p) = sample_tsd_pair(usable[picker.sample(rng)], rng)?;
                let row = |id: u64| {
                    table
                        .get(id)
                        .ok_or_else(|| invalid!("detection {id} missing from observation table"))
                };
                pairs.push((row(a)?, row(p)?));
            }
            let (xq, xk) = self.views(pairs.into_iter(), rng)?;
            losses.push(self.step(&xq, &xk, lr)?);
        }
        Ok(self.stats("tsd", epoch, &losses, lr, start))
    }

    fn views<'a>(
        &self,
        pairs: impl Iterator<Item = (&'a [T], &'a [T])>,
        rng: &mut impl Rng,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        let s = self.config.augment_strength;
        let (mut q, mut k) = (Vec::new(), Vec::new());
        let mut rows = 0;
        for (a, p) in pairs {
            q.extend(augment_observation(a, rng, s));
            k.extend(augment_observation(p, rng, s));
            rows += 1;
        }
        let d = self.pair.query.input_dim();
        Ok((Matrix::from_vec(rows, d, q)?, Matrix::from_vec(rows, d, k)?))
    }

    fn stats(&self, stage: &str, epoch: usize, losses: &[f64], lr: f64, start: Instant) -> TrainStats {
        TrainStats {
            stage: stage.to_string(),
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            lr,
            bank_occupancy: self.bank.len(),
            steps: losses.len(),
            wall_time_s: start.elapsed().as_secs_f64(),
        }
    }
}

/// Two distinct detections of `segment`, uniformly over ordered pairs.
pub fn sample_tsd_pair(segment: &TrackletSegment, rng: &mut impl Rng) -> Result<(u64, u64)> {
    let n = segment.len();
    if n < 2 {
        return Err(invalid!("segment {} has fewer than two detections", segment.segment_id));
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok((segment.det_ids[i], segment.det_ids[j]))
}
