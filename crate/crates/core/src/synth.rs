//! Seeded synthetic multi-camera observation streams with hidden identities.
//!
//! Each camera sees walkers passing through its view. A walker carries a
//! latent identity and a slowly drifting context state (pose, background);
//! the camera maps the identity through a near-identity linear distortion,
//! adds its own bias and isotropic noise. Crossing events swap which identity
//! generates the two walkers' observations for one frame, and short-lived
//! clutter detections stand in for detector false positives.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, Scalar};

/// Detection ids of the evaluation session start here, so they never collide
/// with training ids.
pub const EVAL_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub fps: f64,
    /// Frames simulated per camera for the training session.
    pub duration_frames: u32,
    /// Frames simulated per camera for the held-out evaluation session.
    pub eval_duration_frames: u32,
    /// Expected new walkers per camera per frame.
    pub entry_rate: f64,
    /// Mean passage length in frames.
    pub dwell_mean: f64,
    pub crossing_prob: f64,
    pub dropout_prob: f64,
    pub d_latent: usize,
    pub d_obs: usize,
    pub noise_sigma: f64,
    /// Scale of the per-camera perturbation of the identity embedding.
    pub transform_perturbation: f64,
    /// Norm of each camera's additive bias.
    pub camera_bias: f64,
    /// Dimension of the walker context subspace.
    pub context_dim: usize,
    /// Norm scale of the context contribution.
    pub context_scale: f64,
    /// Frame-to-frame correlation of the context state.
    pub context_corr: f64,
    /// Expected clutter detections started per camera per frame.
    pub clutter_rate: f64,
    pub clutter_dwell_mean: f64,
    /// Log-std of the per-detection illumination gain.
    pub gain_sigma: f64,
    /// Probability that a detection is partially occluded.
    pub occlusion_prob: f64,
    /// Share of coordinates zeroed by an occlusion.
    pub occlusion_frac: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            fps: 2.0,
            duration_frames: 2000,
            eval_duration_frames: 600,
            entry_rate: 0.1,
            dwell_mean: 16.0,
            crossing_prob: 0.01,
            dropout_prob: 0.01,
            d_latent: 32,
            d_obs: 64,
            noise_sigma: 0.05,
            transform_perturbation: 0.2,
            camera_bias: 0.4,
            context_dim: 8,
            context_scale: 1.0,
            context_corr: 0.9,
            clutter_rate: 0.05,
            clutter_dwell_mean: 4.0,
            gain_sigma: 0.4,
            occlusion_prob: 0.5,
            occlusion_frac: 0.4,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("crossing_prob", self.crossing_prob),
            ("dropout_prob", self.dropout_prob),
            ("context_corr", self.context_corr),
            ("occlusion_prob", self.occlusion_prob),
            ("occlusion_frac", self.occlusion_frac),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} = {p} is not a probability"));
            }
        }
        if !(self.fps > 0.0) {
            return Err(invalid!("fps must be positive"));
        }
        if self.d_latent == 0 || self.d_obs < self.d_latent {
            return Err(invalid!(
                "need 0 < d_latent <= d_obs, got {} and {}",
                self.d_latent,
                self.d_obs
            ));
        }
        if self.context_dim > self.d_obs {
            return Err(invalid!("context_dim exceeds d_obs"));
        }
        if !(self.dwell_mean >= 1.0) || !(self.clutter_dwell_mean >= 1.0) {
            return Err(invalid!("dwell means must be >= 1 frame"));
        }
        let nonneg = [
            self.entry_rate,
            self.clutter_rate,
            self.noise_sigma,
            self.transform_perturbation,
            self.camera_bias,
            self.context_scale,
            self.gain_sigma,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid!("rates and scales must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLatent {
    pub id: u32,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub camera_id: u32,
    /// `d_obs × d_latent`
    pub transform: Matrix<f64>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
}

impl CameraModel {
    fn render(&self, latent: &[f64], context: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.transform.row(r);
            *o = self.bias[r] + context[r] + row.iter().zip(latent).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub identities: Vec<IdentityLatent>,
    pub cameras: Vec<CameraModel>,
    /// `d_obs × context_dim`, orthonormal columns.
    pub context_basis: Matrix<f64>,
    pub config: StreamConfig,
    pub seed: u64,
}

/// Observation with its hidden ground truth. Only simulation and evaluation
/// code handles this type; everything else sees [`Observation`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub det_id: u64,
    pub frame: u32,
    pub camera_id: u32,
    pub observation: Vec<T>,
    /// `None` for clutter (no person).
    pub gt_id: Option<u32>,
}

/// A detection with the ground truth stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub det_id: u64,
    pub frame: u32,
    pub camera_id: u32,
    pub observation: Vec<T>,
}

impl<T: Clone> Detection<T> {
    pub fn strip(&self) -> Observation<T> {
        Observation {
            det_id: self.det_id,
            frame: self.frame,
            camera_id: self.camera_id,
            observation: self.observation.clone(),
        }
    }
}

/// Common accessors for stream entries, labelled or not.
pub trait StreamItem {
    type Value;
    fn det_id(&self) -> u64;
    fn frame(&self) -> u32;
    fn camera_id(&self) -> u32;
    fn values(&self) -> &[Self::Value];
}

macro_rules! stream_item {
    ($ty:ident) => {
        impl<T> StreamItem for $ty<T> {
            type Value = T;
            fn det_id(&self) -> u64 {
                self.det_id
            }
            fn frame(&self) -> u32 {
                self.frame
            }
            fn camera_id(&self) -> u32 {
                self.camera_id
            }
            fn values(&self) -> &[T] {
                &self.observation
            }
        }
    };
}
stream_item!(Detection);
stream_item!(Observation);

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch<D> {
    pub camera_id: u32,
    pub frame: u32,
    pub detections: Vec<D>,
}

/// Non-empty frame batches ordered by `(camera_id, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream<D> {
    pub duration_frames: u32,
    pub batches: Vec<FrameBatch<D>>,
}

pub type LabeledStream<T> = Stream<Detection<T>>;
pub type ObservedStream<T> = Stream<Observation<T>>;

impl<D> Stream<D> {
    pub fn detections(&self) -> impl Iterator<Item = &D> + '_ {
        self.batches.iter().flat_map(|b| b.detections.iter())
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(|b| b.detections.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the first `fraction` of the recording time on every camera.
    pub fn time_slice(&self, fraction: f64) -> Result<Self>
    where
        D: Clone,
    {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid!("data fraction {fraction} outside (0, 1]"));
        }
        let frames = ((self.duration_frames as f64 * fraction).round() as u32).max(1);
        Ok(Self {
            duration_frames: frames,
            batches: self
                .batches
                .iter()
                .filter(|b| b.frame < frames)
                .cloned()
                .collect(),
        })
    }
}

impl<T: Clone> LabeledStream<T> {
    pub fn strip(&self) -> ObservedStream<T> {
        Stream {
            duration_frames: self.duration_frames,
            batches: self
                .batches
                .iter()
                .map(|b| FrameBatch {
                    camera_id: b.camera_id,
                    frame: b.frame,
                    detections: b.detections.iter().map(Detection::strip).collect(),
                })
                .collect(),
        }
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn orthonormal_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian_vec(rng, rows);
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_fn(rows, cols, |r, c| basis[c][r])
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_world(
    config: &StreamConfig,
    n_ids: usize,
    n_cams: usize,
    seed: u64,
) -> Result<SyntheticWorld> {
    if n_ids < 2 {
        return Err(invalid!("need at least 2 identities, got {n_ids}"));
    }
    if n_cams < 2 {
        return Err(invalid!("need at least 2 cameras, got {n_cams}"));
    }
    config.validate()?;
    let mut rng = rng_for(seed, 0);
    let (dl, dobs) = (config.d_latent, config.d_obs);

    let identities = (0..n_ids)
        .map(|id| IdentityLatent {
            id: id as u32,
            appearance: unit_gaussian(&mut rng, dl),
        })
        .collect();

    // perturbation entries scaled so the operator-norm deviation is ~ transform_perturbation
    let eps = config.transform_perturbation / ((dobs as f64).sqrt() + (dl as f64).sqrt());
    let cameras = (0..n_cams)
        .map(|c| {
            let transform = Matrix::from_fn(dobs, dl, |r, k| {
                let base = if r == k { 1.0 } else { 0.0 };
                base + eps * rng.sample::<f64, _>(StandardNormal)
            });
            let bias = unit_gaussian(&mut rng, dobs)
                .into_iter()
                .map(|x| x * config.camera_bias)
                .collect();
            CameraModel {
                camera_id: c as u32,
                transform,
                bias,
                noise_sigma: config.noise_sigma,
            }
        })
        .collect();

    let context_basis = orthonormal_columns(&mut rng, dobs, config.context_dim);

    Ok(SyntheticWorld {
        identities,
        cameras,
        context_basis,
        config: config.clone(),
        seed,
    })
}

/// Which session of the world to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Session {
    Train,
    Eval,
}

impl Session {
    fn index(self) -> u64 {
        match self {
            Session::Train => 0,
            Session::Eval => 1,
        }
    }
}

struct Walker {
    /// `None` for clutter.
    identity: Option<u32>,
    /// Latent used for clutter; identities use the world table.
    latent: Vec<f64>,
    remaining: u32,
    context: Vec<f64>,
}

struct Raw {
    frame: u32,
    observation: Vec<f64>,
    gt_id: Option<u32>,
}

fn geometric_dwell(rng: &mut impl Rng, mean: f64) -> u32 {
    if mean <= 1.0 {
        return 1;
    }
    let g = Geometric::new(1.0 / mean).expect("valid geometric parameter");
    1 + g.sample(rng).min(u32::MAX as u64 - 1) as u32
}

fn poisson(rng: &mut impl Rng, rate: f64) -> u32 {
    if rate <= 0.0 {
        return 0;
    }
    let p = Poisson::new(rate).expect("positive rate");
    let v: f64 = p.sample(rng);
    v as u32
}

fn simulate_camera(world: &SyntheticWorld, cam: &CameraModel, session: Session) -> Vec<Raw> {
    let cfg = &world.config;
    let mut rng = rng_for(world.seed, 1 + session.index() * 4096 + cam.camera_id as u64);
    let frames = match session {
        Session::Train => cfg.duration_frames,
        Session::Eval => cfg.eval_duration_frames,
    };
    let kdim = cfg.context_dim;
    let innov = (1.0 - cfg.context_corr * cfg.context_corr).max(0.0).sqrt();
    let ctx_scale = if kdim > 0 {
        cfg.context_scale / (kdim as f64).sqrt()
    } else {
        0.0
    };
    let dobs = cfg.d_obs;
    let n_ids = world.identities.len();

    let mut walkers: Vec<Walker> = Vec::new();
    let mut out = Vec::new();
    let mut ctx_buf = vec![0.0; dobs];

    for frame in 0..frames {
        for _ in 0..poisson(&mut rng, cfg.entry_rate) {
            walkers.push(Walker {
                identity: Some(rng.gen_range(0..n_ids) as u32),
                latent: Vec::new(),
                remaining: geometric_dwell(&mut rng, cfg.dwell_mean),
                context: gaussian_vec(&mut rng, kdim),
            });
        }
        for _ in 0..poisson(&mut rng, cfg.clutter_rate) {
            walkers.push(Walker {
                identity: None,
                latent: unit_gaussian(&mut rng, cfg.d_latent),
                remaining: geometric_dwell(&mut rng, cfg.clutter_dwell_mean),
                context: gaussian_vec(&mut rng, kdim),
            });
        }

        // which walkers are detected this frame
        let visible: Vec<usize> = (0..walkers.len())
            .filter(|_| !rng.gen_bool(cfg.dropout_prob))
            .collect();
        // generating walker per visible slot; crossings swap two people
        let mut source: Vec<usize> = visible.clone();
        let people: Vec<usize> = (0..visible.len())
            .filter(|&i| walkers[visible[i]].identity.is_some())
            .collect();
        if people.len() >= 2 && rng.gen_bool(cfg.crossing_prob) {
            let pair: Vec<&usize> = people.choose_multiple(&mut rng, 2).collect();
            source.swap(*pair[0], *pair[1]);
        }

        for (slot, &w) in visible.iter().enumerate() {
            let gen = &walkers[source[slot]];
            let latent: &[f64] = match gen.identity {
                Some(id) => &world.identities[id as usize].appearance,
                None => &gen.latent,
            };
            // the slot keeps its own context
            let ctx = &walkers[w].context;
            for (r, c) in ctx_buf.iter_mut().enumerate() {
                let basis = world.context_basis.row(r);
                *c = ctx_scale * basis.iter().zip(ctx).map(|(a, b)| a * b).sum::<f64>();
            }
            let mut obs = vec![0.0; dobs];
            cam.render(latent, &ctx_buf, &mut obs);
            if cfg.gain_sigma > 0.0 {
                let gain = (cfg.gain_sigma * rng.sample::<f64, _>(StandardNormal)).exp();
                obs.iter_mut().for_each(|o| *o *= gain);
            }
            if cfg.occlusion_prob > 0.0 && rng.gen_bool(cfg.occlusion_prob) {
                let hidden = (cfg.occlusion_frac * dobs as f64).round() as usize;
                for i in rand::seq::index::sample(&mut rng, dobs, hidden.min(dobs)) {
                    obs[i] = 0.0;
                }
            }
            if cam.noise_sigma > 0.0 {
                for o in obs.iter_mut() {
                    *o += cam.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            out.push(Raw {
                frame,
                observation: obs,
                gt_id: gen.identity,
            });
        }

        for w in walkers.iter_mut() {
            w.remaining -= 1;
            for z in w.context.iter_mut() {
                *z = cfg.context_corr * *z + innov * rng.sample::<f64, _>(StandardNormal);
            }
        }
        walkers.retain(|w| w.remaining > 0);
    }
    out
}

/// Simulates the training session of `world`.
pub fn simulate_stream<T: Scalar>(world: &SyntheticWorld) -> LabeledStream<T> {
    simulate_session(world, Session::Train)
}

/// Simulates one session. Cameras are simulated independently (in parallel
/// when a thread pool is available) and merged in `(camera_id, frame)` order.
pub fn simulate_session<T: Scalar>(world: &SyntheticWorld, session: Session) -> LabeledStream<T> {
    let per_camera: Vec<Vec<Raw>> = world
        .cameras
        .par_iter()
        .map(|cam| simulate_camera(world, cam, session))
        .collect();

    let mut next_id = match session {
        Session::Train => 0,
        Session::Eval => EVAL_ID_BASE,
    };
    let mut batches: Vec<FrameBatch<Detection<T>>> = Vec::new();
    for (cam, raws) in world.cameras.iter().zip(per_camera) {
        for raw in raws {
            let det = Detection {
                det_id: next_id,
                frame: raw.frame,
                camera_id: cam.camera_id,
                observation: raw.observation.into_iter().map(T::of).collect(),
                gt_id: raw.gt_id,
            };
            next_id += 1;
            match batches.last_mut() {
                Some(b) if b.camera_id == cam.camera_id && b.frame == raw.frame => {
                    b.detections.push(det)
                }
                _ => batches.push(FrameBatch {
                    camera_id: cam.camera_id,
                    frame: raw.frame,
                    detections: vec![det],
                }),
            }
        }
    }
    LabeledStream {
        duration_frames: match session {
            Session::Train => world.config.duration_frames,
            Session::Eval => world.config.eval_duration_frames,
        },
        batches,
    }
}

/// Vector analogue of image augmentation: random gain, random coordinate
/// dropout and additive Gaussian jitter, all scaled by `strength`.
/// `strength == 0` returns `x` unchanged.
pub fn augment_observation<T: Scalar>(x: &[T], rng: &mut impl Rng, strength: f64) -> Vec<T> {
    if strength <= 0.0 || x.is_empty() {
        return x.to_vec();
    }
    let rms = (x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let gain = (0.5 * strength * rng.sample::<f64, _>(StandardNormal)).exp();
    let drop_p = (0.5 * strength).min(0.5);
    let jitter = strength * rms;
    x.iter()
        .map(|&v| {
            let keep = !rng.gen_bool(drop_p);
            let noise = jitter * rng.sample::<f64, _>(StandardNormal);
            let base = if keep { gain * v.as_f64() } else { 0.0 };
            T::of(base + noise)
        })
        .collect()
}

/// Observations of a stream addressable by detection id.
#[derive(Debug, Clone)]
pub struct ObservationTable<T> {
    pub det_ids: Vec<u64>,
    pub values: Matrix<T>,
    index: HashMap<u64, usize>,
}

impl<T: Scalar> ObservationTable<T> {
    pub fn from_stream(stream: &ObservedStream<T>) -> Result<Self> {
        let values = crate::tracklet::stream_matrix(stream)?;
        Self::from_parts(stream.detections().map(|d| d.det_id).collect(), values)
    }

    pub fn from_parts(det_ids: Vec<u64>, values: Matrix<T>) -> Result<Self> {
        if det_ids.len() != values.rows() {
            return Err(invalid!("{} ids for {} observation rows", det_ids.len(), values.rows()));
        }
        let index: HashMap<u64, usize> = det_ids.iter().enumerate().map(|(i, &d)| (d, i)).collect();
        if index.len() != det_ids.len() {
            return Err(invalid!("duplicate detection ids"));
        }
        Ok(Self {
            det_ids,
            values,
            index,
        })
    }

    pub fn row_of(&self, det_id: u64) -> Option<usize> {
        self.index.get(&det_id).copied()
    }

    pub fn get(&self, det_id: u64) -> Option<&[T]> {
        self.row_of(det_id).map(|r| self.values.row(r))
    }

    pub fn len(&self) -> usize {
        self.det_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.det_ids.is_empty()
    }
}

/// Query/gallery partition of an evaluation stream.
#[derive(Debug, Clone)]
pub struct EvalSplit<T> {
    pub query: Vec<Detection<T>>,
    pub gallery: Vec<Detection<T>>,
    /// Identities seen by a single camera only, kept out of the query set.
    pub excluded_ids: Vec<u32>,
}

/// Splits a labelled stream into query and gallery sets.
///
/// For each identity seen by at least two cameras, one camera is reserved
/// for the gallery and queries are drawn from the others, so every query has
/// a cross-camera match. Clutter never enters either set.
pub fn split_eval<T: Scalar>(
    world: &SyntheticWorld,
    stream: &LabeledStream<T>,
    query_frac: f64,
) -> Result<EvalSplit<T>> {
    if !(query_frac > 0.0 && query_frac < 1.0) {
        return Err(invalid!("query_frac must lie in (0, 1), got {query_frac}"));
    }
    let mut by_id: BTreeMap<u32, Vec<&Detection<T>>> = BTreeMap::new();
    for d in stream.detections() {
        if let Some(id) = d.gt_id {
            by_id.entry(id).or_default().push(d);
        }
    }
    let mut rng = rng_for(world.seed, 0xE5A1);
    let mut query_ids = BTreeSet::new();
    let mut excluded_ids = Vec::new();
    for (&id, dets) in &by_id {
        let cams: BTreeSet<u32> = dets.iter().map(|d| d.camera_id).collect();
        if cams.len() < 2 {
            log::warn!("identity {id} seen by a single camera; excluded from queries");
            excluded_ids.push(id);
            continue;
        }
        let cams: Vec<u32> = cams.into_iter().collect();
        let anchor = *cams.choose(&mut rng).expect("non-empty");
        let mut candidates: Vec<u64> = dets
            .iter()
            .filter(|d| d.camera_id != anchor)
            .map(|d| d.det_id)
            .collect();
        candidates.shuffle(&mut rng);
        let want = ((query_frac * dets.len() as f64).round() as usize).clamp(1, candidates.len());
        query_ids.extend(candidates.into_iter().take(want));
    }
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for d in stream.detections().filter(|d| d.gt_id.is_some()) {
        if query_ids.contains(&d.det_id) {
            query.push(d.clone());
        } else {
            gallery.push(d.clone());
        }
    }
    Ok(EvalSplit {
        query,
        gallery,
        excluded_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn quiet() -> StreamConfig {
        StreamConfig {
            duration_frames: 300,
            eval_duration_frames: 100,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn world_is_deterministic_and_seed_sensitive() {
        let cfg = StreamConfig::default();
        let a = generate_world(&cfg, 100, 6, 1).unwrap();
        let b = generate_world(&cfg, 100, 6, 1).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&cfg, 100, 6, 2).unwrap();
        assert_ne!(a.identities[0].appearance, c.identities[0].appearance);
        for id in &a.identities {
            let n: f64 = id.appearance.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_world_counts() {
        let cfg = StreamConfig::default();
        assert!(generate_world(&cfg, 1, 6, 1).is_err());
        assert!(generate_world(&cfg, 10, 1, 1).is_err());
        let bad = StreamConfig {
            dropout_prob: 1.5,
            ..cfg
        };
        assert!(generate_world(&bad, 10, 2, 1).is_err());
    }

    #[test]
    fn full_dropout_gives_empty_stream() {
        let cfg = StreamConfig {
            dropout_prob: 1.0,
            ..quiet()
        };
        let w = generate_world(&cfg, 10, 3, 4).unwrap();
        assert!(simulate_stream::<f32>(&w).is_empty());
    }

    #[test]
    fn noiseless_single_walker_repeats_itself() {
        let cfg = StreamConfig {
            entry_rate: 0.01,
            dwell_mean: 30.0,
            noise_sigma: 0.0,
            context_scale: 0.0,
            gain_sigma: 0.0,
            occlusion_prob: 0.0,
            crossing_prob: 0.0,
            clutter_rate: 0.0,
            ..quiet()
        };
        let w = generate_world(&cfg, 5, 2, 8).unwrap();
        let s = simulate_stream::<f64>(&w);
        assert!(!s.is_empty());
        let mut seen: HashMap<(u32, u32), Vec<f64>> = HashMap::new();
        for d in s.detections() {
            let key = (d.gt_id.unwrap(), d.camera_id);
            if let Some(prev) = seen.get(&key) {
                assert_eq!(prev, &d.observation);
            } else {
                seen.insert(key, d.observation.clone());
            }
        }
        // different identities on one camera never coincide
        let obs: Vec<_> = seen.iter().collect();
        for (i, a) in obs.iter().enumerate() {
            for b in &obs[i + 1..] {
                if a.0 .0 != b.0 .0 {
                    assert_ne!(a.1, b.1);
                }
            }
        }
    }

    #[test]
    fn stream_is_reproducible_and_ordered() {
        let w = generate_world(&quiet(), 50, 4, 7).unwrap();
        let a = simulate_stream::<f32>(&w);
        let b = simulate_stream::<f32>(&w);
        assert_eq!(a, b);
        assert!(a.len() > 100);
        let keys: Vec<_> = a.batches.iter().map(|b| (b.camera_id, b.frame)).collect();
        assert!(keys.windows(2).all(|k| k[0] < k[1]));
        let ids: BTreeSet<u64> = a.detections().map(|d| d.det_id).collect();
        assert_eq!(ids.len(), a.len());
        let eval = simulate_session::<f32>(&w, Session::Eval);
        assert!(eval.detections().all(|d| d.det_id >= EVAL_ID_BASE));
        assert_ne!(eval.len(), 0);
    }

    #[test]
    fn walkers_occupy_consecutive_frames_without_dropout() {
        let cfg = StreamConfig {
            entry_rate: 0.02,
            dwell_mean: 10.0,
            dropout_prob: 0.0,
            crossing_prob: 0.0,
            clutter_rate: 0.0,
            ..quiet()
        };
        let w = generate_world(&cfg, 1000, 2, 3).unwrap();
        let s = simulate_stream::<f32>(&w);
        // with 1000 ids, repeats of an id on a camera are rare; frames per
        // (camera, id) should form few runs
        let mut frames: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
        for d in s.detections() {
            frames.entry((d.camera_id, d.gt_id.unwrap())).or_default().push(d.frame);
        }
        let contiguous = frames
            .values()
            .filter(|f| f.windows(2).all(|p| p[1] == p[0] + 1))
            .count();
        assert!(contiguous as f64 >= 0.9 * frames.len() as f64);
    }

    #[test]
    fn time_slice_keeps_leading_frames() {
        let w = generate_world(&quiet(), 20, 2, 5).unwrap();
        let s = simulate_stream::<f32>(&w);
        let half = s.time_slice(0.5).unwrap();
        assert_eq!(half.duration_frames, 150);
        assert!(half.detections().all(|d| d.frame < 150));
        assert!(s.time_slice(0.0).is_err());
        assert_eq!(s.time_slice(1.0).unwrap(), s);
    }

    #[test]
    fn augment_identity_and_determinism() {
        let x: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_observation(&x, &mut rng, 0.0), x);
        let a = augment_observation(&x, &mut ChaCha8Rng::seed_from_u64(9), 0.1);
        let b = augment_observation(&x, &mut ChaCha8Rng::seed_from_u64(9), 0.1);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn augment_displacement_grows_with_strength() {
        let x: Vec<f64> = (0..32).map(|i| ((i * 7) as f64).cos()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prev = 0.0;
        for strength in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8] {
            let mean: f64 = (0..1000)
                .map(|_| {
                    let y = augment_observation(&x, &mut rng, strength);
                    crate::linalg::euclidean_distance(&x, &y).unwrap()
                })
                .sum::<f64>()
                / 1000.0;
            assert!(mean >= prev, "strength {strength}: {mean} < {prev}");
            prev = mean;
        }
        assert!(prev > 0.0);
    }

    #[test]
    fn split_eval_guarantees_cross_camera_matches() {
        let cfg = StreamConfig {
            eval_duration_frames: 600,
            ..quiet()
        };
        let w = generate_world(&cfg, 100, 6, 1).unwrap();
        let s = simulate_session::<f32>(&w, Session::Eval);
        let split = split_eval(&w, &s, 0.2).unwrap();
        assert!(!split.query.is_empty());
        let gallery_ids: BTreeSet<u64> = split.gallery.iter().map(|d| d.det_id).collect();
        for q in &split.query {
            assert!(!gallery_ids.contains(&q.det_id));
            assert!(split
                .gallery
                .iter()
                .any(|g| g.gt_id == q.gt_id && g.camera_id != q.camera_id));
        }
        let again = split_eval(&w, &s, 0.2).unwrap();
        let ids = |v: &[Detection<f32>]| v.iter().map(|d| d.det_id).collect::<Vec<_>>();
        assert_eq!(ids(&split.query), ids(&again.query));
        assert!(split_eval(&w, &s, 0.0).is_err());
        assert!(split_eval(&w, &s, 1.0).is_err());
    }
}
