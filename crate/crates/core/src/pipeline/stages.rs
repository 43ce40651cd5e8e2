//! The method as resumable stages over an artifact directory.
//!
//! Every stage writes into its own subdirectory and finishes by writing a
//! `manifest.json` listing SHA-256 digests of the files it read and wrote.
//! A stage whose inputs and settings are unchanged is skipped. Existing
//! outputs are only replaced when `force` is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::experiment::{fit_ccr, fresh_encoder, labelled, train_cid, train_tsd, StageSeed, Steps};
use super::PipelineConfig;
use crate::ccr::{nullification_check, CameraClassifier, Centering, CcrProjector, Nullification};
use crate::contrastive::TrainStats;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::io::{self, Tensor};
use crate::linalg::{Matrix, Scalar};
use crate::synth::{generate_world, simulate_session, split_eval, ObservationTable, ObservedStream, Session};
use crate::tracklet::{
    assemble_from_embeddings, embed_rows, filter_segments, frames_from_rows, segment_stats, MutualNearestNeighbor,
    SegmentStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    TrainCid,
    Extract,
    Trackletize,
    TrainTsd,
    FitCcr,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Simulate,
        Stage::TrainCid,
        Stage::Extract,
        Stage::Trackletize,
        Stage::TrainTsd,
        Stage::FitCcr,
        Stage::Eval,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainCid => "train_cid",
            Stage::Extract => "extract",
            Stage::Trackletize => "trackletize",
            Stage::TrainTsd => "train_tsd",
            Stage::FitCcr => "fit_ccr",
            Stage::Eval => "eval",
        }
    }

    /// Settings that influence this stage's outputs.
    fn settings(self, cfg: &PipelineConfig) -> serde_json::Value {
        use serde_json::json;
        let base = json!({ "precision": cfg.precision, "schema_version": cfg.schema_version });
        let own = match self {
            Stage::Simulate => json!({
                "seed": cfg.seed, "identities": cfg.identities, "cameras": cfg.cameras, "stream": cfg.stream,
            }),
            Stage::TrainCid => json!({
                "seed": cfg.seed, "data_fraction": cfg.data_fraction, "encoder": cfg.encoder,
                "contrastive": cfg.contrastive,
            }),
            Stage::Extract => json!({ "data_fraction": cfg.data_fraction }),
            Stage::Trackletize => json!({ "data_fraction": cfg.data_fraction, "tracklet": cfg.tracklet }),
            Stage::TrainTsd => json!({
                "seed": cfg.seed, "data_fraction": cfg.data_fraction, "contrastive": cfg.contrastive,
            }),
            Stage::FitCcr => json!({
                "seed": cfg.seed, "data_fraction": cfg.data_fraction, "k": cfg.ccr.k,
                "centering": cfg.ccr.centering, "epochs": cfg.ccr.epochs, "lr": cfg.ccr.lr,
                "holdout_fraction": cfg.ccr.holdout_fraction,
            }),
            Stage::Eval => json!({
                "seed": cfg.seed, "eval": cfg.eval, "renormalize": cfg.ccr.renormalize,
                "data_fraction": cfg.data_fraction,
            }),
        };
        json!({ "base": base, "stage": own })
    }

    pub fn fingerprint(self, cfg: &PipelineConfig) -> String {
        hex::encode(Sha256::digest(self.settings(cfg).to_string().as_bytes()))
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.dir_name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub stage: Stage,
    pub config_fingerprint: String,
    /// `stage/file` → digest
    pub inputs: BTreeMap<String, String>,
    /// file → digest
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
}

const MANIFEST: &str = "manifest.json";

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// An artifact directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub force: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        Self {
            root: root.into(),
            force,
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    pub fn manifest(&self, stage: Stage) -> Result<ArtifactManifest> {
        let path = self.stage_dir(stage).join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Manifest {
            path: path.clone(),
            reason: format!("cannot read manifest ({e}); has stage {} run?", stage.dir_name()),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path,
            reason: e.to_string(),
        })
    }

    /// Path of an upstream output after checking it against its manifest.
    pub fn input(&self, stage: Stage, file: &str) -> Result<(String, PathBuf, String)> {
        let manifest = self.manifest(stage)?;
        let path = self.stage_dir(stage).join(file);
        let recorded = manifest.outputs.get(file).ok_or_else(|| Error::Manifest {
            path: path.clone(),
            reason: format!("not listed in the {} manifest", stage.dir_name()),
        })?;
        let actual = io::sha256_file(&path).map_err(|e| Error::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if &actual != recorded {
            return Err(Error::Manifest {
                path,
                reason: "digest does not match the manifest (file changed or corrupt)".into(),
            });
        }
        Ok((format!("{}/{file}", stage.dir_name()), path, actual))
    }

    /// Writes the config copy at the root, refusing to replace a different
    /// one unless forced.
    pub fn record_config(&self, cfg: &PipelineConfig) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join("config.toml");
        let text = cfg.to_toml();
        if let Ok(existing) = fs::read_to_string(&path) {
            if existing == text {
                return Ok(());
            }
            if !self.force {
                return Err(Error::WouldOverwrite(path));
            }
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Runs `body` in the stage directory unless an up-to-date manifest
    /// exists. `body` returns the names of the files it wrote.
    pub fn run_stage(
        &self,
        stage: Stage,
        cfg: &PipelineConfig,
        inputs: &[(Stage, &str)],
        body: impl FnOnce(&Path, &[PathBuf]) -> Result<Vec<String>>,
    ) -> Result<StageStatus> {
        let mut input_digests = BTreeMap::new();
        let mut paths = Vec::new();
        for &(st, file) in inputs {
            let (key, path, digest) = self.input(st, file)?;
            input_digests.insert(key, digest);
            paths.push(path);
        }
        let fingerprint = stage.fingerprint(cfg);
        let dir = self.stage_dir(stage);
        if dir.exists() {
            if let Ok(old) = self.manifest(stage) {
                let fresh = old.config_fingerprint == fingerprint
                    && old.inputs == input_digests
                    && old
                        .outputs
                        .iter()
                        .all(|(f, d)| io::sha256_file(&dir.join(f)).ok().as_ref() == Some(d));
                if fresh && !self.force {
                    log::info!("{}: up to date, skipping", stage.dir_name());
                    return Ok(StageStatus::Skipped);
                }
            }
            let occupied = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
            if occupied && !self.force {
                return Err(Error::WouldOverwrite(dir));
            }
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let started_unix = now();
        // on failure the partial outputs stay, without a manifest
        let files = body(&dir, &paths)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            let digest = io::sha256_file(&dir.join(&f))?;
            outputs.insert(f, digest);
        }
        let manifest = ArtifactManifest {
            stage,
            config_fingerprint: fingerprint,
            inputs: input_digests,
            outputs,
            started_unix,
            finished_unix: now(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(StageStatus::Ran)
    }
}

fn write_curve(path: &Path, curve: &[TrainStats]) -> Result<()> {
    // without wall time
    io::write_jsonl(
        path,
        curve.iter().map(|s| {
            serde_json::json!({
                "stage": s.stage, "epoch": s.epoch, "loss": s.loss, "lr": s.lr,
                "bank_occupancy": s.bank_occupancy, "steps": s.steps,
            })
        }),
    )
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn training_stream<T: Scalar>(cfg: &PipelineConfig, sim_dir: &Path) -> Result<ObservedStream<T>> {
    io::read_observed_stream::<T>(sim_dir, "train")?.time_slice(cfg.data_fraction)
}

fn parent(p: &Path) -> &Path {
    p.parent().expect("stage files live in a directory")
}

pub fn stage_simulate<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageStatus> {
    ws.run_stage(Stage::Simulate, cfg, &[], |dir, _| {
        let world = generate_world(&cfg.stream, cfg.identities, cfg.cameras, cfg.seed)?;
        io::write_stream(dir, "train", &simulate_session::<T>(&world, Session::Train))?;
        io::write_stream(dir, "eval", &simulate_session::<T>(&world, Session::Eval))?;
        Ok(["train.jsonl", "train.rctr", "eval.jsonl", "eval.rctr"].map(String::from).to_vec())
    })
}

pub fn stage_train_cid<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageStatus> {
    let inputs = [(Stage::Simulate, "train.jsonl"), (Stage::Simulate, "train.rctr")];
    ws.run_stage(Stage::TrainCid, cfg, &inputs, |dir, paths| {
        let stream = training_stream::<T>(cfg, parent(&paths[0]))?;
        let table = ObservationTable::from_stream(&stream)?;
        let curve_path = dir.join("curve.jsonl");
        let (pair, curve) = train_cid(cfg, fresh_encoder::<T>(cfg, StageSeed::EncoderInit)?, &table, |s| {
            log::info!("cid epoch {} loss {:.4} lr {:.4}", s.epoch, s.loss, s.lr)
        })?;
        write_curve(&curve_path, &curve)?;
        io::write_checkpoint(&dir.join("checkpoint.rctr"), &pair)?;
        Ok(vec!["checkpoint.rctr".into(), "curve.jsonl".into()])
    })
}

pub fn stage_extract<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageStatus> {
    let inputs = [
        (Stage::TrainCid, "checkpoint.rctr"),
        (Stage::Simulate, "train.jsonl"),
        (Stage::Simulate, "train.rctr"),
    ];
    ws.run_stage(Stage::Extract, cfg, &inputs, |dir, paths| {
        let pair = io::read_checkpoint::<T>(&paths[0])?;
        let stream = training_stream::<T>(cfg, parent(&paths[1]))?;
        let emb = embed_rows(&pair.query, &crate::tracklet::stream_matrix(&stream)?)?;
        io::write_tensors(&dir.join("embeddings.rctr"), &[Tensor::from_matrix("embeddings", &emb)])?;
        Ok(vec!["embeddings.rctr".into()])
    })
}

/// Segment statistics that need no identities.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct UnlabeledStats {
    segments_before_filter: usize,
    segments: usize,
    detections: usize,
    length_histogram: BTreeMap<usize, usize>,
    per_camera: BTreeMap<u32, usize>,
}

pub fn stage_trackletize<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageStatus> {
    let inputs = [
        (Stage::Extract, "embeddings.rctr"),
        (Stage::Simulate, "train.jsonl"),
        (Stage::Simulate, "train.rctr"),
    ];
    ws.run_stage(Stage::Trackletize, cfg, &inputs, |dir, paths| {
        let emb = io::take(&io::read_tensors(&paths[0])?, "embeddings")?.matrix::<T>()?;
        let stream = training_stream::<T>(cfg, parent(&paths[1]))?;
        let frames = frames_from_rows(&stream, &emb)?;
        let assoc = MutualNearestNeighbor {
            min_similarity: cfg.tracklet.min_similarity,
        };
        let raw = assemble_from_embeddings(&frames, &assoc)?;
        let segments = filter_segments(&raw, cfg.tracklet.min_len)?;
        io::write_segments(&dir.join("segments.jsonl"), &segments)?;
        let s = segment_stats(&segments, |_| None);
        write_json(
            &dir.join("stats.json"),
            &UnlabeledStats {
                segments_before_filter: raw.len(),
                segments: s.segments,
                detections: s.detections,
                length_histogram: s.length_histogram,
                per_camera: s.per_camera,
            },
        )?;
        Ok(vec!["segments.jsonl".into(), "stats.json".into()])
    })
}

pub fn stage_train_tsd<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageStatus> {
    let inputs = [
        (Stage::TrainCid, "checkpoint.rctr"),
        (Stage::Trackletize, "segments.jsonl"),
        (Stage::Simulate, "train.jsonl"),
        (Stage::Simulate, "train.rctr"),
    ];
    ws.run_stage(Stage::TrainTsd, cfg, &inputs, |dir, paths| {
        let init = io::read_checkpoint::<T>(&paths[0])?;
        let segments = io::read_segments(&paths[1])?;
        let stream = training_stream::<T>(cfg, parent(&paths[2]))?;
        let table = ObservationTable::from_stream(&stream)?;
        let (pair, curve) = train_tsd(cfg, init, &segments, &table, |s| {
            log::info!("tsd epoch {} loss {:.4} lr {:.5}", s.epoch, s.loss, s.lr)
        })?;
        write_curve(&dir.join("curve.jsonl"), &curve)?;
        io::write_checkpoint(&dir.join("checkpoint.rctr"), &pair)?;
        Ok(vec!["checkpoint.rctr".into(), "curve.jsonl".into()])
    })
}

pub fn write_projector<T: Scalar>(path: &Path, p: &CcrProjector<T>) -> Result<()> {
    let meta = [
        p.k_requested as f64,
        p.num_cameras as f64,
        p.dim() as f64,
        match p.centering {
            Centering::RowMean => 1.0,
            Centering::None => 0.0,
        },
    ];
    io::write_tensors(
        path,
        &[
            Tensor::from_matrix("v", &p.v),
            Tensor::from_slice("center", vec![p.center.len()], &p.center),
            Tensor::from_slice("singular_values", vec![p.singular_values.len()], &p.singular_values),
            Tensor::from_slice::<f64>("meta", vec![4], &meta),
        ],
    )
}

pub fn read_projector<T: Scalar>(path: &Path) -> Result<CcrProjector<T>> {
    let map = io::read_tensors(path)?;
    let v = io::take(&map, "v")?.matrix::<T>()?;
    let meta = io::take(&map, "meta")?.values::<f64>()?;
    if meta.len() != 4 || meta[2] as usize != v.rows() {
        return Err(Error::Format("projector metadata is inconsistent".into()));
    }
    Ok(CcrProjector {
        v,
        k_requested: meta[0] as usize,
        num_cameras: meta[1] as usize,
        centering: if meta[3] == 1.0 { Centering::RowMean } else { Centering::None },
        center: io::take(&map, "center")?.values()?,
        singular_values: io::take(&map, "singular_values")?.values()?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CcrSummary {
    pub cameras: Vec<u32>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub k_requested: usize,
    pub k_removed: usize,
    pub nullification: Nullification,
}

pub fn stage_fit_ccr<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageStatus> {
    let inputs = [
        (Stage::TrainTsd, "checkpoint.rctr"),
        (Stage::Simulate, "train.jsonl"),
        (Stage::Simulate, "train.rctr"),
    ];
    ws.run_stage(Stage::FitCcr, cfg, &inputs, |dir, paths| {
        let pair = io::read_checkpoint::<T>(&paths[0])?;
        let stream = training_stream::<T>(cfg, parent(&paths[1]))?;
        let table = ObservationTable::from_stream(&stream)?;
        let cameras: Vec<u32> = stream.detections().map(|d| d.camera_id).collect();
        let (clf, projector) = fit_ccr(cfg, &pair.query, &table, &cameras)?;
        write_projector(&dir.join("projector.rctr"), &projector)?;
        write_classifier(&dir.join("classifier.rctr"), &clf)?;
        let emb = embed_rows(&pair.query, &table.values)?;
        let summary = CcrSummary {
            cameras: clf.cameras.clone(),
            train_accuracy: clf.train_accuracy,
            holdout_accuracy: clf.holdout_accuracy,
            k_requested: projector.k_requested,
            k_removed: projector.k(),
            nullification: nullification_check(&clf, &projector, &emb)?,
        };
        write_json(&dir.join("ccr.json"), &summary)?;
        Ok(vec!["projector.rctr".into(), "classifier.rctr".into(), "ccr.json".into()])
    })
}

fn write_classifier<T: Scalar>(path: &Path, clf: &CameraClassifier<T>) -> Result<()> {
    let cams: Vec<f64> = clf.cameras.iter().map(|&c| c as f64).collect();
    io::write_tensors(
        path,
        &[
            Tensor::from_matrix("weight", &clf.weight),
            Tensor::from_slice::<f64>("cameras", vec![cams.len()], &cams),
        ],
    )
}

/// Final reports plus segment quality, as written by the eval stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub without_ccr: EvalReport,
    pub with_ccr: EvalReport,
    pub segment_stats: SegmentStats,
}

pub fn stage_eval<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageStatus> {
    let inputs = [
        (Stage::TrainTsd, "checkpoint.rctr"),
        (Stage::FitCcr, "projector.rctr"),
        (Stage::Simulate, "eval.jsonl"),
        (Stage::Simulate, "eval.rctr"),
        (Stage::Trackletize, "segments.jsonl"),
        (Stage::Simulate, "train.jsonl"),
    ];
    ws.run_stage(Stage::Eval, cfg, &inputs, |dir, paths| {
        let out = evaluate_artifacts::<T>(cfg, paths)?;
        write_json(&dir.join("report.json"), &out)?;
        io::write_jsonl(&dir.join("report.jsonl"), [&out.without_ccr, &out.with_ccr])?;
        let table = format!(
            "{}\n{}\n{}\nsegment purity {:.4} over {} segments\n",
            EvalReport::table_header(),
            out.without_ccr.table_row(),
            out.with_ccr.table_row(),
            out.segment_stats.purity,
            out.segment_stats.segments
        );
        fs::write(dir.join("report.txt"), table).map_err(|e| Error::io(dir, e))?;
        Ok(vec!["report.json".into(), "report.jsonl".into(), "report.txt".into()])
    })
}

fn evaluate_artifacts<T: Scalar>(cfg: &PipelineConfig, paths: &[PathBuf]) -> Result<EvalOutput> {
    let pair = io::read_checkpoint::<T>(&paths[0])?;
    let projector = read_projector::<T>(&paths[1])?;
    let sim_dir = parent(&paths[2]);
    let eval_stream = io::read_labeled_stream::<T>(sim_dir, "eval")?;
    let world = generate_world(&cfg.stream, cfg.identities, cfg.cameras, cfg.seed)?;
    let split = split_eval(&world, &eval_stream, cfg.eval.query_fraction)?;
    let without_ccr = labelled(
        evaluate(&pair.query, None, false, &split, &cfg.eval)?,
        Steps::CidTsd.label(),
        cfg,
    );
    let with_ccr = labelled(
        evaluate(&pair.query, Some(&projector), cfg.ccr.renormalize, &split, &cfg.eval)?,
        Steps::CidTsdCcr.label(),
        cfg,
    );
    let segments = io::read_segments(&paths[4])?;
    let records: Vec<io::DetectionRecord> = io::read_jsonl(&paths[5])?;
    let gt: BTreeMap<u64, Option<u32>> = records.into_iter().map(|r| (r.det_id, r.gt_id)).collect();
    let segment_stats = segment_stats(&segments, |d| gt.get(&d).copied().flatten());
    Ok(EvalOutput {
        without_ccr,
        with_ccr,
        segment_stats,
    })
}

pub fn read_eval_output(ws: &Workspace) -> Result<EvalOutput> {
    let (_, path, _) = ws.input(Stage::Eval, "report.json")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn run_stage<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig, stage: Stage) -> Result<StageStatus> {
    cfg.validate()?;
    ws.record_config(cfg)?;
    match stage {
        Stage::Simulate => stage_simulate::<T>(ws, cfg),
        Stage::TrainCid => stage_train_cid::<T>(ws, cfg),
        Stage::Extract => stage_extract::<T>(ws, cfg),
        Stage::Trackletize => stage_trackletize::<T>(ws, cfg),
        Stage::TrainTsd => stage_train_tsd::<T>(ws, cfg),
        Stage::FitCcr => stage_fit_ccr::<T>(ws, cfg),
        Stage::Eval => stage_eval::<T>(ws, cfg),
    }
}

/// All stages in order. Returns the final reports.
pub fn run_pipeline<T: Scalar>(ws: &Workspace, cfg: &PipelineConfig) -> Result<EvalOutput> {
    for stage in Stage::ALL {
        let status = run_stage::<T>(ws, cfg, stage)?;
        log::info!("{}: {:?}", stage.dir_name(), status);
    }
    read_eval_output(ws)
}

/// Embeddings of stored observations, for external inspection.
pub fn read_embeddings<T: Scalar>(ws: &Workspace) -> Result<Matrix<T>> {
    let (_, path, _) = ws.input(Stage::Extract, "embeddings.rctr")?;
    io::take(&io::read_tensors(&path)?, "embeddings")?.matrix()
}
