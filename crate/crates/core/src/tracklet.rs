//! Tracklet segments from adjacent-frame mutual nearest neighbours.
//!
//! Within one camera, the embeddings of frame `t` and frame `t + 1` are
//! compared through their affinity (cosine) matrix. A cell that is the strict
//! maximum of both its row and its column is a match and extends the segment
//! of the frame-`t` detection; unmatched detections of frame `t + 1` open new
//! segments. Frames are never bridged, so a missed detection splits a
//! segment.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward, EncoderParams};
use crate::error::{invalid, Result};
use crate::linalg::{Matrix, Scalar};
use crate::synth::{ObservedStream, StreamItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Match {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackletSegment {
    pub segment_id: u64,
    pub camera_id: u32,
    pub start_frame: u32,
    /// Detection ids on consecutive frames, oldest first.
    pub det_ids: Vec<u64>,
}

impl TrackletSegment {
    pub fn len(&self) -> usize {
        self.det_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.det_ids.is_empty()
    }
}

/// `A[m][k] = e_m · e_k`; the cosine similarity for unit-norm rows.
pub fn affinity<T: Scalar>(frame_i: &Matrix<T>, frame_j: &Matrix<T>) -> Result<Matrix<T>> {
    if frame_i.rows() == 0 || frame_j.rows() == 0 {
        return Ok(Matrix::zeros(frame_i.rows(), frame_j.rows()));
    }
    if frame_i.cols() != frame_j.cols() {
        return Err(invalid!(
            "embedding dimensions differ: {} vs {}",
            frame_i.cols(),
            frame_j.cols()
        ));
    }
    frame_i.matmul_t(frame_j)
}

/// Index of the strict maximum, or `None` on a tie or an empty slice.
fn strict_argmax<T: Scalar>(values: impl Iterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    let mut unique = false;
    for (i, v) in values.enumerate() {
        match best {
            None => {
                best = Some((i, v));
                unique = true;
            }
            Some((_, b)) if v > b => {
                best = Some((i, v));
                unique = true;
            }
            Some((_, b)) if v == b => unique = false,
            _ => {}
        }
    }
    best.filter(|_| unique).map(|(i, _)| i)
}

/// Cells that are the strict maximum of their row and of their column.
/// Ties produce no match.
pub fn mutual_matches<T: Scalar>(a: &Matrix<T>) -> Vec<Match> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let col_best: Vec<Option<usize>> = (0..cols)
        .map(|c| strict_argmax((0..rows).map(|r| a[(r, c)])))
        .collect();
    (0..rows)
        .filter_map(|r| {
            let c = strict_argmax(a.row(r).iter().copied())?;
            (col_best[c] == Some(r)).then_some(Match { row: r, col: c })
        })
        .collect()
}

/// Frame-to-frame association strategy.
pub trait Associator<T>: Sync {
    fn associate(&self, affinity: &Matrix<T>) -> Vec<Match>;
}

/// Mutual nearest neighbours with an optional similarity floor (off by
/// default).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MutualNearestNeighbor {
    pub min_similarity: Option<f64>,
}

impl<T: Scalar> Associator<T> for MutualNearestNeighbor {
    fn associate(&self, a: &Matrix<T>) -> Vec<Match> {
        let matches = mutual_matches(a);
        match self.min_similarity {
            None => matches,
            Some(floor) => matches
                .into_iter()
                .filter(|m| a[(m.row, m.col)].as_f64() >= floor)
                .collect(),
        }
    }
}

/// Embedded detections of one frame of one camera.
#[derive(Debug, Clone)]
pub struct FrameEmbeddings<T> {
    pub camera_id: u32,
    pub frame: u32,
    pub det_ids: Vec<u64>,
    /// One unit-norm row per detection.
    pub embeddings: Matrix<T>,
}

struct Open {
    camera_id: u32,
    start_frame: u32,
    det_ids: Vec<u64>,
}

/// Chains detections into segments. `frames` must be ordered by
/// `(camera_id, frame)`.
pub fn assemble_from_embeddings<T: Scalar>(
    frames: &[FrameEmbeddings<T>],
    associator: &dyn Associator<T>,
) -> Result<Vec<TrackletSegment>> {
    if frames
        .windows(2)
        .any(|w| (w[0].camera_id, w[0].frame) >= (w[1].camera_id, w[1].frame))
    {
        return Err(invalid!("frames must be strictly ordered by (camera, frame)"));
    }
    if let Some(f) = frames.iter().find(|f| f.det_ids.len() != f.embeddings.rows()) {
        return Err(invalid!(
            "frame {} of camera {}: {} ids for {} embeddings",
            f.frame,
            f.camera_id,
            f.det_ids.len(),
            f.embeddings.rows()
        ));
    }
    let mut by_camera: Vec<&[FrameEmbeddings<T>]> = Vec::new();
    let mut start = 0;
    for i in 1..=frames.len() {
        if i == frames.len() || frames[i].camera_id != frames[start].camera_id {
            if i > start {
                by_camera.push(&frames[start..i]);
            }
            start = i;
        }
    }

    let per_camera: Vec<Result<Vec<Open>>> = by_camera
        .par_iter()
        .map(|cam_frames| chain_camera(cam_frames, associator))
        .collect();

    let mut open: Vec<Open> = Vec::new();
    for r in per_camera {
        open.extend(r?);
    }
    open.sort_by_key(|s| (s.camera_id, s.start_frame, s.det_ids[0]));
    Ok(open
        .into_iter()
        .enumerate()
        .map(|(i, s)| TrackletSegment {
            segment_id: i as u64,
            camera_id: s.camera_id,
            start_frame: s.start_frame,
            det_ids: s.det_ids,
        })
        .collect())
}

fn chain_camera<T: Scalar>(frames: &[FrameEmbeddings<T>], associator: &dyn Associator<T>) -> Result<Vec<Open>> {
    let mut done: Vec<Open> = Vec::new();
    // segment index (into `done`) of each detection of the previous frame
    let mut prev: Option<(&FrameEmbeddings<T>, Vec<usize>)> = None;
    for f in frames {
        let mut owner: Vec<Option<usize>> = vec![None; f.det_ids.len()];
        if let Some((p, p_owner)) = &prev {
            if p.frame + 1 == f.frame {
                let a = affinity(&p.embeddings, &f.embeddings)?;
                for m in associator.associate(&a) {
                    owner[m.col] = Some(p_owner[m.row]);
                }
            }
        }
        let mut current = Vec::with_capacity(owner.len());
        for (k, o) in owner.into_iter().enumerate() {
            let seg = match o {
                Some(s) => s,
                None => {
                    done.push(Open {
                        camera_id: f.camera_id,
                        start_frame: f.frame,
                        det_ids: Vec::new(),
                    });
                    done.len() - 1
                }
            };
            done[seg].det_ids.push(f.det_ids[k]);
            current.push(seg);
        }
        prev = Some((f, current));
    }
    Ok(done)
}

/// Embeds every frame of a stream with `encoder`.
pub fn embed_frames<T: Scalar>(
    stream: &ObservedStream<T>,
    encoder: &EncoderParams<T>,
) -> Result<Vec<FrameEmbeddings<T>>> {
    let all = stream_matrix(stream)?;
    frames_from_rows(stream, &embed_rows(encoder, &all)?)
}

/// Splits per-detection embeddings (stream order) back into frames.
pub fn frames_from_rows<T: Scalar>(
    stream: &ObservedStream<T>,
    embeddings: &Matrix<T>,
) -> Result<Vec<FrameEmbeddings<T>>> {
    if embeddings.rows() != stream.len() {
        return Err(invalid!(
            "{} embeddings for {} detections",
            embeddings.rows(),
            stream.len()
        ));
    }
    let mut out = Vec::with_capacity(stream.batches.len());
    let mut row = 0;
    for b in &stream.batches {
        let idx: Vec<usize> = (row..row + b.detections.len()).collect();
        row += b.detections.len();
        out.push(FrameEmbeddings {
            camera_id: b.camera_id,
            frame: b.frame,
            det_ids: b.detections.iter().map(|d| d.det_id).collect(),
            embeddings: embeddings.select_rows(&idx),
        });
    }
    Ok(out)
}

/// Observation matrix of a stream, one row per detection in stream order.
pub fn stream_matrix<T: Scalar, D: StreamItem<Value = T>>(
    stream: &crate::synth::Stream<D>,
) -> Result<Matrix<T>> {
    let dim = stream.detections().next().map_or(0, |d| d.values().len());
    let mut data = Vec::with_capacity(stream.len() * dim);
    for d in stream.detections() {
        if d.values().len() != dim {
            return Err(invalid!("ragged observations in stream"));
        }
        data.extend_from_slice(d.values());
    }
    Matrix::from_vec(stream.len(), dim, data)
}

/// Forward pass in fixed-size chunks, so memory stays bounded and results do
/// not depend on the total row count.
pub fn embed_rows<T: Scalar>(encoder: &EncoderParams<T>, rows: &Matrix<T>) -> Result<Matrix<T>> {
    const CHUNK: usize = 1024;
    let mut out = Vec::with_capacity(rows.rows() * encoder.embed_dim());
    let mut start = 0;
    while start < rows.rows() {
        let end = (start + CHUNK).min(rows.rows());
        let idx: Vec<usize> = (start..end).collect();
        out.extend_from_slice(forward(encoder, &rows.select_rows(&idx))?.as_slice());
        start = end;
    }
    Matrix::from_vec(rows.rows(), encoder.embed_dim(), out)
}

pub fn assemble_segments<T: Scalar>(
    stream: &ObservedStream<T>,
    encoder: &EncoderParams<T>,
    associator: &dyn Associator<T>,
) -> Result<Vec<TrackletSegment>> {
    let frames = embed_frames(stream, encoder)?;
    assemble_from_embeddings(&frames, associator)
}

/// Keeps segments with at least `min_len` detections.
pub fn filter_segments(segments: &[TrackletSegment], min_len: usize) -> Result<Vec<TrackletSegment>> {
    if min_len == 0 {
        return Err(invalid!("min_len must be at least 1"));
    }
    Ok(segments.iter().filter(|s| s.len() >= min_len).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segments: usize,
    pub detections: usize,
    pub length_histogram: BTreeMap<usize, usize>,
    pub per_camera: BTreeMap<u32, usize>,
    /// Fraction of segments whose detections all belong to one person.
    /// Clutter (no identity) never counts as pure.
    pub purity: f64,
}

pub fn segment_stats(segments: &[TrackletSegment], gt: impl Fn(u64) -> Option<u32>) -> SegmentStats {
    let mut length_histogram = BTreeMap::new();
    let mut per_camera = BTreeMap::new();
    let mut pure = 0usize;
    for s in segments {
        *length_histogram.entry(s.len()).or_insert(0) += 1;
        *per_camera.entry(s.camera_id).or_insert(0) += 1;
        let first = s.det_ids.first().and_then(|&d| gt(d));
        if first.is_some() && s.det_ids.iter().all(|&d| gt(d) == first) {
            pure += 1;
        }
    }
    SegmentStats {
        segments: segments.len(),
        detections: segments.iter().map(TrackletSegment::len).sum(),
        length_histogram,
        per_camera,
        purity: if segments.is_empty() {
            1.0
        } else {
            pure as f64 / segments.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn affinity_examples() {
        let e = m(&[vec![0.6, 0.8]]);
        assert_eq!(affinity(&e, &e).unwrap().as_slice(), &[1.0]);
        let basis = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(affinity(&basis, &basis).unwrap(), Matrix::identity(2));
        let empty = Matrix::<f64>::zeros(0, 2);
        assert_eq!(affinity(&empty, &basis).unwrap().shape(), (0, 2));
        assert_eq!(affinity(&basis, &empty).unwrap().shape(), (2, 0));
        assert!(mutual_matches(&affinity(&empty, &basis).unwrap()).is_empty());
        assert!(affinity(&basis, &m(&[vec![1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn mutual_match_examples() {
        let a = m(&[vec![0.9, 0.2, 0.1], vec![0.3, 0.8, 0.4]]);
        let got: HashSet<_> = mutual_matches(&a).into_iter().collect();
        let want: HashSet<_> = [Match { row: 0, col: 0 }, Match { row: 1, col: 1 }].into();
        assert_eq!(got, want);
        assert_eq!(mutual_matches(&m(&[vec![-0.3]])), vec![Match { row: 0, col: 0 }]);
        assert!(mutual_matches(&m(&[vec![0.5, 0.5]])).is_empty());
    }

    #[test]
    fn similarity_floor_drops_weak_matches() {
        let a = m(&[vec![0.1]]);
        let loose = MutualNearestNeighbor::default();
        let strict = MutualNearestNeighbor {
            min_similarity: Some(0.5),
        };
        assert_eq!(Associator::<f64>::associate(&loose, &a).len(), 1);
        assert!(Associator::<f64>::associate(&strict, &a).is_empty());
    }

    fn frame(cam: u32, frame: u32, ids: &[u64], rows: &[Vec<f64>]) -> FrameEmbeddings<f64> {
        FrameEmbeddings {
            camera_id: cam,
            frame,
            det_ids: ids.to_vec(),
            embeddings: if rows.is_empty() {
                Matrix::zeros(0, 2)
            } else {
                m(rows)
            },
        }
    }

    #[test]
    fn chains_identical_detections() {
        let e = vec![vec![0.6, 0.8]];
        let frames = [frame(0, 0, &[1], &e), frame(0, 1, &[2], &e), frame(0, 2, &[3], &e)];
        let segs = assemble_from_embeddings(&frames, &MutualNearestNeighbor::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].det_ids, vec![1, 2, 3]);
    }

    #[test]
    fn gaps_split_segments() {
        let e = vec![vec![1.0, 0.0]];
        let frames = [frame(0, 0, &[1], &e), frame(0, 2, &[2], &e), frame(0, 4, &[3], &e)];
        let segs = assemble_from_embeddings(&frames, &MutualNearestNeighbor::default()).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn cameras_do_not_chain_and_ids_are_ordered() {
        let e = vec![vec![1.0, 0.0]];
        let frames = [frame(0, 5, &[1], &e), frame(1, 6, &[2], &e)];
        let segs = assemble_from_embeddings(&frames, &MutualNearestNeighbor::default()).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].segment_id, segs[0].camera_id), (0, 0));
        assert_eq!((segs[1].segment_id, segs[1].camera_id), (1, 1));
        let unordered = [frame(1, 0, &[1], &e), frame(0, 0, &[2], &e)];
        assert!(assemble_from_embeddings(&unordered, &MutualNearestNeighbor::default()).is_err());
    }

    fn seg(id: u64, len: usize) -> TrackletSegment {
        TrackletSegment {
            segment_id: id,
            camera_id: 0,
            start_frame: 0,
            det_ids: (0..len as u64).map(|d| id * 100 + d).collect(),
        }
    }

    #[test]
    fn filter_examples() {
        let segs: Vec<_> = [1, 4, 5, 9].iter().enumerate().map(|(i, &l)| seg(i as u64, l)).collect();
        assert_eq!(filter_segments(&segs, 1).unwrap(), segs);
        assert!(filter_segments(&segs, 10).unwrap().is_empty());
        let kept: Vec<usize> = filter_segments(&segs, 5).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(kept, vec![5, 9]);
        assert!(filter_segments(&segs, 0).is_err());
    }

    #[test]
    fn stats_of_singletons() {
        let segs: Vec<_> = (0..5).map(|i| seg(i, 1)).collect();
        let stats = segment_stats(&segs, |d| Some((d / 100) as u32));
        assert_eq!(stats.length_histogram, BTreeMap::from([(1, 5)]));
        assert_eq!(stats.purity, 1.0);
        assert_eq!(stats.per_camera.values().sum::<usize>(), 5);
        // clutter singletons are not pure
        let stats = segment_stats(&segs, |_| None);
        assert_eq!(stats.purity, 0.0);
    }

    #[test]
    fn mixed_segment_is_impure() {
        let segs = vec![seg(0, 3), seg(1, 2)];
        let stats = segment_stats(&segs, |d| if d == 2 { Some(99) } else { Some((d / 100) as u32) });
        assert_eq!(stats.purity, 0.5);
        assert_eq!(stats.detections, 5);
    }
}
