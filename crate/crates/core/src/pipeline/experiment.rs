//! The full method in memory: simulate, train, mine segments, reduce camera
//! components, evaluate. The artifact pipeline and the ablation harness are
//! both built from these pieces.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineConfig;
use crate::ccr::{build_projector, fit_camera_classifier, CameraClassifier, CcrProjector};
use crate::contrastive::{ContrastiveConfig, TrainStats, Trainer};
use crate::encoder::{init_encoder, EncoderPair, EncoderParams};
use crate::error::{invalid, Result};
use crate::eval::{evaluate, EvalReport};
use crate::linalg::Scalar;
use crate::synth::{
    generate_world, simulate_session, split_eval, EvalSplit, ObservationTable, ObservedStream, Session,
    SyntheticWorld,
};
use crate::tracklet::{
    assemble_segments, embed_rows, filter_segments, segment_stats, MutualNearestNeighbor, SegmentStats,
    TrackletSegment,
};

/// Independent seeds for each randomised stage.
#[derive(Debug, Clone, Copy)]
pub enum StageSeed {
    EncoderInit = 1,
    Cid = 2,
    Tsd = 3,
    Ccr = 4,
    RandomInit = 5,
}

pub fn stage_seed(seed: u64, stage: StageSeed) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5EED_0000 + stage as u64);
    rng.next_u64()
}

/// Simulated world, its (time-sliced) training stream and the held-out
/// evaluation split.
pub struct Prepared<T> {
    pub world: SyntheticWorld,
    pub train: ObservedStream<T>,
    pub table: ObservationTable<T>,
    pub split: EvalSplit<T>,
    /// Ground truth of the training stream, for segment statistics only.
    gt: HashMap<u64, Option<u32>>,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let world = generate_world(&cfg.stream, cfg.identities, cfg.cameras, cfg.seed)?;
        let labeled = simulate_session::<T>(&world, Session::Train).time_slice(cfg.data_fraction)?;
        let eval_stream = simulate_session::<T>(&world, Session::Eval);
        let split = split_eval(&world, &eval_stream, cfg.eval.query_fraction)?;
        let gt = labeled.detections().map(|d| (d.det_id, d.gt_id)).collect();
        let train = labeled.strip();
        let table = ObservationTable::from_stream(&train)?;
        Ok(Self {
            world,
            train,
            table,
            split,
            gt,
        })
    }

    pub fn stats(&self, segments: &[TrackletSegment]) -> SegmentStats {
        segment_stats(segments, |d| self.gt.get(&d).copied().flatten())
    }

    /// Camera label of each training row.
    pub fn cameras(&self) -> Vec<u32> {
        self.train.detections().map(|d| d.camera_id).collect()
    }
}

/// Shrinks the batch (and keeps the bank divisible by it) when fewer than
/// `batch_size` samples are available.
pub fn effective_config(cfg: &ContrastiveConfig, samples: usize) -> ContrastiveConfig {
    let b = cfg.batch_for(samples);
    if b != cfg.batch_size {
        log::warn!("only {samples} samples; batch size reduced from {} to {b}", cfg.batch_size);
    }
    ContrastiveConfig {
        batch_size: b,
        ..cfg.clone()
    }
}

pub fn fresh_encoder<T: Scalar>(cfg: &PipelineConfig, stage: StageSeed) -> Result<EncoderPair<T>> {
    init_encoder(&cfg.architecture(), stage_seed(cfg.seed, stage), cfg.contrastive.momentum)
}

pub fn train_cid<T: Scalar>(
    cfg: &PipelineConfig,
    pair: EncoderPair<T>,
    data: &ObservationTable<T>,
    mut on_epoch: impl FnMut(&TrainStats),
) -> Result<(EncoderPair<T>, Vec<TrainStats>)> {
    if data.is_empty() {
        return Err(invalid!("no training detections"));
    }
    let mut trainer = Trainer::new(pair, effective_config(&cfg.contrastive, data.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, StageSeed::Cid));
    let mut curve = Vec::new();
    for epoch in 0..cfg.contrastive.epochs_cid {
        let s = trainer.cid_epoch(&data.values, epoch, &mut rng)?;
        on_epoch(&s);
        curve.push(s);
    }
    Ok((trainer.pair, curve))
}

pub fn mine_segments<T: Scalar>(
    cfg: &PipelineConfig,
    stream: &ObservedStream<T>,
    encoder: &EncoderParams<T>,
) -> Result<Vec<TrackletSegment>> {
    let assoc = MutualNearestNeighbor {
        min_similarity: cfg.tracklet.min_similarity,
    };
    assemble_segments(stream, encoder, &assoc)
}

pub fn train_tsd<T: Scalar>(
    cfg: &PipelineConfig,
    pair: EncoderPair<T>,
    segments: &[TrackletSegment],
    data: &ObservationTable<T>,
    mut on_epoch: impl FnMut(&TrainStats),
) -> Result<(EncoderPair<T>, Vec<TrainStats>)> {
    let usable: usize = segments.iter().filter(|s| s.len() >= 2).map(|s| s.len()).sum();
    if usable == 0 {
        return Err(invalid!("no segments of length two or more to train on"));
    }
    let mut trainer = Trainer::new(pair, effective_config(&cfg.contrastive, usable))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, StageSeed::Tsd));
    let mut curve = Vec::new();
    for epoch in 0..cfg.contrastive.epochs_tsd {
        let s = trainer.tsd_epoch(segments, data, epoch, &mut rng)?;
        on_epoch(&s);
        curve.push(s);
    }
    Ok((trainer.pair, curve))
}

pub fn fit_ccr<T: Scalar>(
    cfg: &PipelineConfig,
    encoder: &EncoderParams<T>,
    data: &ObservationTable<T>,
    cameras: &[u32],
) -> Result<(CameraClassifier<T>, CcrProjector<T>)> {
    let emb = embed_rows(encoder, &data.values)?;
    let clf = fit_camera_classifier(&emb, cameras, &cfg.ccr, stage_seed(cfg.seed, StageSeed::Ccr))?;
    let k = cfg.ccr.k.unwrap_or(clf.num_cameras());
    let projector = build_projector(&clf, k, cfg.ccr.centering)?;
    Ok((clf, projector))
}

/// Segment filtering, TSD from `cid`, camera reduction and evaluation.
/// `raw_segments` are the unfiltered segments mined with `cid.query`.
pub fn finish_from_cid<T: Scalar>(
    cfg: &PipelineConfig,
    prep: &Prepared<T>,
    cid: EncoderPair<T>,
    raw_segments: &[TrackletSegment],
    mut curves: Vec<TrainStats>,
) -> Result<Outcome<T>> {
    let segments = filter_segments(raw_segments, cfg.tracklet.min_len)?;
    let (pair, tsd_curve) = train_tsd(cfg, cid, &segments, &prep.table, |_| {})?;
    curves.extend(tsd_curve);
    let (clf, projector) = fit_ccr(cfg, &pair.query, &prep.table, &prep.cameras())?;
    let report = evaluate(&pair.query, Some(&projector), cfg.ccr.renormalize, &prep.split, &cfg.eval)?;
    Ok(Outcome {
        encoder: pair.query,
        projector: Some(projector),
        classifier: Some(clf),
        segment_stats: Some(prep.stats(&segments)),
        segments,
        curves,
        report: labelled(report, Steps::CidTsdCcr.label(), cfg),
    })
}

/// The complete method: CID, segment mining, TSD and CCR.
pub fn run_method<T: Scalar>(cfg: &PipelineConfig, prep: &Prepared<T>) -> Result<Outcome<T>> {
    let (cid, curve) = train_cid(cfg, fresh_encoder::<T>(cfg, StageSeed::EncoderInit)?, &prep.table, |_| {})?;
    let raw = mine_segments(cfg, &prep.train, &cid.query)?;
    finish_from_cid(cfg, prep, cid, &raw, curve)
}

/// One row of the pipeline-steps comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Steps {
    Cid,
    Tsd,
    CidTsd,
    CidTsdCcr,
}

impl Steps {
    pub const ALL: [Steps; 4] = [Steps::Cid, Steps::Tsd, Steps::CidTsd, Steps::CidTsdCcr];

    pub fn label(self) -> &'static str {
        match self {
            Steps::Cid => "CID",
            Steps::Tsd => "TSD",
            Steps::CidTsd => "CID+TSD",
            Steps::CidTsdCcr => "CID+TSD+CCR",
        }
    }
}

/// Results of one full method run.
#[derive(Debug, Clone)]
pub struct Outcome<T> {
    pub encoder: EncoderParams<T>,
    pub projector: Option<CcrProjector<T>>,
    pub classifier: Option<CameraClassifier<T>>,
    pub segments: Vec<TrackletSegment>,
    pub segment_stats: Option<SegmentStats>,
    pub curves: Vec<TrainStats>,
    pub report: EvalReport,
}

pub(crate) fn labelled(mut report: EvalReport, label: &str, cfg: &PipelineConfig) -> EvalReport {
    report.label = label.to_string();
    report.config_fingerprint = cfg.fingerprint();
    report
}

/// Runs the requested steps. The arms of the steps ablation share their
/// common prefixes, so requesting several at once trains each stage once.
pub fn run_steps<T: Scalar>(
    cfg: &PipelineConfig,
    prep: &Prepared<T>,
    steps: &[Steps],
) -> Result<Vec<(Steps, Outcome<T>)>> {
    let mut out = Vec::new();
    let evaluate_plain = |enc: &EncoderParams<T>, label: &str| -> Result<EvalReport> {
        Ok(labelled(evaluate(enc, None, false, &prep.split, &cfg.eval)?, label, cfg))
    };

    if steps.contains(&Steps::Tsd) {
        let init = fresh_encoder::<T>(cfg, StageSeed::RandomInit)?;
        let raw = mine_segments(cfg, &prep.train, &init.query)?;
        let segments = filter_segments(&raw, cfg.tracklet.min_len)?;
        let (pair, curves) = train_tsd(cfg, init, &segments, &prep.table, |_| {})?;
        let report = evaluate_plain(&pair.query, Steps::Tsd.label())?;
        out.push((
            Steps::Tsd,
            Outcome {
                encoder: pair.query,
                projector: None,
                classifier: None,
                segment_stats: Some(prep.stats(&segments)),
                segments,
                curves,
                report,
            },
        ));
    }

    let wants_cid = steps.iter().any(|s| *s != Steps::Tsd);
    if !wants_cid {
        return Ok(out);
    }
    let (cid, cid_curve) = train_cid(cfg, fresh_encoder::<T>(cfg, StageSeed::EncoderInit)?, &prep.table, |_| {})?;
    if steps.contains(&Steps::Cid) {
        out.push((
            Steps::Cid,
            Outcome {
                encoder: cid.query.clone(),
                projector: None,
                classifier: None,
                segments: Vec::new(),
                segment_stats: None,
                curves: cid_curve.clone(),
                report: evaluate_plain(&cid.query, Steps::Cid.label())?,
            },
        ));
    }
    if !steps.iter().any(|s| matches!(s, Steps::CidTsd | Steps::CidTsdCcr)) {
        return Ok(out);
    }
    let raw = mine_segments(cfg, &prep.train, &cid.query)?;
    let segments = filter_segments(&raw, cfg.tracklet.min_len)?;
    let (pair, tsd_curve) = train_tsd(cfg, cid, &segments, &prep.table, |_| {})?;
    let curves: Vec<TrainStats> = cid_curve.into_iter().chain(tsd_curve).collect();
    let stats = prep.stats(&segments);
    if steps.contains(&Steps::CidTsd) {
        out.push((
            Steps::CidTsd,
            Outcome {
                encoder: pair.query.clone(),
                projector: None,
                classifier: None,
                segments: segments.clone(),
                segment_stats: Some(stats.clone()),
                curves: curves.clone(),
                report: evaluate_plain(&pair.query, Steps::CidTsd.label())?,
            },
        ));
    }
    if steps.contains(&Steps::CidTsdCcr) {
        let (clf, projector) = fit_ccr(cfg, &pair.query, &prep.table, &prep.cameras())?;
        let report = evaluate(&pair.query, Some(&projector), cfg.ccr.renormalize, &prep.split, &cfg.eval)?;
        out.push((
            Steps::CidTsdCcr,
            Outcome {
                encoder: pair.query,
                projector: Some(projector),
                classifier: Some(clf),
                segments,
                segment_stats: Some(stats),
                curves,
                report: labelled(report, Steps::CidTsdCcr.label(), cfg),
            },
        ));
    }
    out.sort_by_key(|(s, _)| Steps::ALL.iter().position(|x| x == s));
    Ok(out)
}
