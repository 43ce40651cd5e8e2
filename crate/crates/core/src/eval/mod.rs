//! Retrieval metrics over a query/gallery split: cumulative match
//! characteristic and mean average precision under Euclidean ranking.

mod ablation;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ccr::CcrProjector;
use crate::encoder::EncoderParams;
use crate::error::{invalid, Result};
use crate::linalg::{Matrix, Scalar};
use crate::synth::{Detection, EvalSplit};
use crate::tracklet::embed_rows;

pub use ablation::{ablation_grid, AblationRow, AblationTable, Axis};

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Drop gallery items sharing both identity and camera with the query.
    pub cross_camera_filter: bool,
    pub query_fraction: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            cross_camera_filter: true,
            query_fraction: 0.2,
        }
    }
}

/// Identity and camera of one query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub id: u32,
    pub camera: u32,
}

impl<T> From<&Detection<T>> for Label {
    fn from(d: &Detection<T>) -> Self {
        Label {
            id: d.gt_id.expect("evaluation detections carry identities"),
            camera: d.camera_id,
        }
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Gallery indices by ascending distance to `query`, ties by index, with
/// rejected items removed.
pub fn rank_gallery<T: Scalar>(query: &[T], gallery: &Matrix<T>, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..gallery.rows())
        .filter(|&g| keep(g))
        .map(|g| (sq_dist(query, gallery.row(g)), g))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, g)| g).collect()
}

/// `CMC@k` for each `k`: the share of queries whose first hit is at rank ≤ k.
/// Each entry of `hits` flags relevance along one query's ranking.
pub fn cmc_curve(hits: &[Vec<bool>], ks: &[usize]) -> Vec<f64> {
    let first: Vec<Option<usize>> = hits.iter().map(|h| h.iter().position(|&x| x)).collect();
    ks.iter()
        .map(|&k| {
            if first.is_empty() {
                return 0.0;
            }
            let n = first.iter().filter(|f| matches!(f, Some(r) if *r < k)).count();
            n as f64 / first.len() as f64
        })
        .collect()
}

/// Precision at each relevant rank, averaged. Zero without relevant items.
pub fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut total = 0.0;
    for (rank, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            total += found as f64 / (rank + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        total / found as f64
    }
}

pub fn mean_ap(hits: &[Vec<bool>]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().map(|h| average_precision(h)).sum::<f64>() / hits.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub queries: usize,
    /// Queries with no relevant gallery item after filtering.
    pub skipped_queries: usize,
    pub gallery: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == k).map(|i| self.cmc[i])
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1).unwrap_or(f64::NAN)
    }

    /// Digest of the metric values, for bit-exact comparisons.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.cmc.iter().chain([&self.map]).chain(&self.per_query_ap) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "run", "Rank-1", "Rank-5", "Rank-10", "mAP", "queries"
        )
    }

    pub fn table_row(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8.1} {:>8}",
            self.label,
            pct(self.rank(1)),
            pct(self.rank(5)),
            pct(self.rank(10)),
            100.0 * self.map,
            self.queries
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        write!(f, "{}", self.table_row())
    }
}

/// Ranks every query against the gallery and scores the result.
pub fn evaluate_embeddings<T: Scalar>(
    query: &Matrix<T>,
    query_labels: &[Label],
    gallery: &Matrix<T>,
    gallery_labels: &[Label],
    protocol: &EvalProtocol,
    ks: &[usize],
) -> Result<EvalReport> {
    if query.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(invalid!("labels do not match embedding rows"));
    }
    if query.cols() != gallery.cols() {
        return Err(invalid!("query dimension {} vs gallery {}", query.cols(), gallery.cols()));
    }
    if !query.is_finite() || !gallery.is_finite() {
        return Err(invalid!("non-finite embeddings"));
    }
    let hits: Vec<Option<Vec<bool>>> = (0..query.rows())
        .into_par_iter()
        .map(|q| {
            let ql = query_labels[q];
            let keep = |g: usize| {
                let gl = gallery_labels[g];
                !(protocol.cross_camera_filter && gl.id == ql.id && gl.camera == ql.camera)
            };
            let ranked = rank_gallery(query.row(q), gallery, keep);
            let flags: Vec<bool> = ranked.iter().map(|&g| gallery_labels[g].id == ql.id).collect();
            flags.iter().any(|&h| h).then_some(flags)
        })
        .collect();
    let skipped = hits.iter().filter(|h| h.is_none()).count();
    let hits: Vec<Vec<bool>> = hits.into_iter().flatten().collect();
    Ok(EvalReport {
        label: String::new(),
        ranks: ks.to_vec(),
        cmc: cmc_curve(&hits, ks),
        map: mean_ap(&hits),
        per_query_ap: hits.iter().map(|h| average_precision(h)).collect(),
        queries: hits.len(),
        skipped_queries: skipped,
        gallery: gallery.rows(),
        config_fingerprint: String::new(),
    })
}

/// Embeds the split with `encoder`, optionally projects both sides through
/// `projector`, and scores the retrieval.
pub fn evaluate<T: Scalar>(
    encoder: &EncoderParams<T>,
    projector: Option<&CcrProjector<T>>,
    renormalize: bool,
    split: &EvalSplit<T>,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let embed = |dets: &[Detection<T>]| -> Result<Matrix<T>> {
        let rows: Vec<Vec<T>> = dets.iter().map(|d| d.observation.clone()).collect();
        let x = if rows.is_empty() {
            Matrix::zeros(0, encoder.input_dim())
        } else {
            Matrix::from_rows(&rows)?
        };
        let mut e = embed_rows(encoder, &x)?;
        if let Some(p) = projector {
            e = p.apply_rows(&e)?;
            if renormalize {
                e.normalize_rows()?;
            }
        }
        Ok(e)
    };
    let q = embed(&split.query)?;
    let g = embed(&split.gallery)?;
    let ql: Vec<Label> = split.query.iter().map(Label::from).collect();
    let gl: Vec<Label> = split.gallery.iter().map(Label::from).collect();
    evaluate_embeddings(&q, &ql, &g, &gl, protocol, &DEFAULT_RANKS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        let g = Matrix::from_rows(&[vec![2.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(rank_gallery(&[0.0], &g, |_| true), vec![1, 0, 2]);
        let single = Matrix::from_rows(&[vec![7.0, 1.0]]).unwrap();
        assert_eq!(rank_gallery(&[0.0, 0.0], &single, |_| true), vec![0]);
        let g = Matrix::from_rows(&[vec![0.1, 0.0], vec![0.5, 0.5], vec![0.0, 0.1]]).unwrap();
        assert_eq!(rank_gallery(&[0.5, 0.5], &g, |_| true)[0], 1);
        // equal distances fall back to gallery order
        assert_eq!(rank_gallery(&[0.0, 0.0], &g, |_| true), vec![0, 2, 1]);
        assert!(rank_gallery(&[0.0, 0.0], &g, |_| false).is_empty());
    }

    #[test]
    fn cmc_and_map_examples() {
        let perfect = vec![vec![true, false], vec![true, true, false]];
        assert_eq!(cmc_curve(&perfect, &[1]), vec![1.0]);
        assert_eq!(mean_ap(&perfect), 1.0);
        let hits = vec![vec![true, false, false], vec![false, false, true]];
        assert_eq!(cmc_curve(&hits, &[1, 3]), vec![0.5, 1.0]);
        assert!((mean_ap(&hits) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn filter_removes_same_camera_matches() {
        let q = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let ql = [Label { id: 1, camera: 0 }];
        let gl = [
            Label { id: 1, camera: 0 },
            Label { id: 2, camera: 1 },
            Label { id: 1, camera: 2 },
        ];
        let on = EvalProtocol::default();
        let r = evaluate_embeddings(&q, &ql, &g, &gl, &on, &[1, 2]).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0]);
        assert!((r.map - 0.5).abs() < 1e-15);
        let off = EvalProtocol {
            cross_camera_filter: false,
            ..on
        };
        let r = evaluate_embeddings(&q, &ql, &g, &gl, &off, &[1]).unwrap();
        assert_eq!(r.cmc, vec![1.0]);
    }

    #[test]
    fn queries_without_matches_are_skipped() {
        let q = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let ql = [Label { id: 1, camera: 0 }, Label { id: 2, camera: 0 }];
        let gl = [Label { id: 1, camera: 1 }];
        let r = evaluate_embeddings(&q, &ql, &g, &gl, &EvalProtocol::default(), &DEFAULT_RANKS).unwrap();
        assert_eq!((r.queries, r.skipped_queries), (1, 1));
        assert_eq!(r.rank1(), 1.0);
    }
}
