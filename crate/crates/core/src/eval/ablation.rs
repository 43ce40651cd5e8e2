use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{invalid, Error, Result};
use crate::linalg::Scalar;
use crate::pipeline::experiment::{finish_from_cid, fresh_encoder, mine_segments, train_cid, StageSeed};
use crate::pipeline::{run_method, run_steps, PipelineConfig, Prepared, Steps};
use crate::tracklet::SegmentStats;

/// Experiment axis with the values swept along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Steps,
    MinLen(Vec<usize>),
    DataFraction(Vec<f64>),
    /// Hidden layer widths per grid point.
    ModelSize(Vec<Vec<usize>>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Steps => "steps",
            Axis::MinLen(_) => "min_len",
            Axis::DataFraction(_) => "data_fraction",
            Axis::ModelSize(_) => "model_size",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Axis::Steps => Ok(()),
            Axis::MinLen(v) if v.is_empty() || v.contains(&0) => Err(invalid!("min_len values must be >= 1")),
            Axis::DataFraction(v) if v.is_empty() || v.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) => {
                Err(invalid!("data fractions must lie in (0, 1]"))
            }
            Axis::ModelSize(v) if v.is_empty() || v.iter().any(|h| h.contains(&0)) => {
                Err(invalid!("model sizes need positive widths"))
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    /// Axis name with its default grid.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(Axis::Steps),
            "min_len" => Ok(Axis::MinLen(vec![1, 3, 5, 9])),
            "data_fraction" => Ok(Axis::DataFraction(vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0])),
            "model_size" => Ok(Axis::ModelSize(vec![vec![64], vec![128], vec![256], vec![512]])),
            other => Err(invalid!(
                "unknown axis {other:?}; expected steps, min_len, data_fraction or model_size"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    /// Numeric position for plotting (grid index for categorical axes).
    pub x: f64,
    pub report: EvalReport,
    pub segment_stats: Option<SegmentStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn rank1(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.report.rank1()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("axis: {}  seed: {}\n", self.axis, self.seed);
        let _ = writeln!(out, "{:<14} {} {:>8}", self.axis, EvalReport::table_header(), "purity");
        for r in &self.rows {
            let purity = r.segment_stats.as_ref().map_or("-".into(), |s| format!("{:.3}", s.purity));
            let _ = writeln!(out, "{:<14} {} {:>8}", r.value, r.report.table_row(), purity);
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "axis": self.axis,
                    "value": r.value,
                    "x": r.x,
                    "rank1": r.report.rank(1),
                    "rank5": r.report.rank(5),
                    "rank10": r.report.rank(10),
                    "map": r.report.map,
                    "purity": r.segment_stats.as_ref().map(|s| s.purity),
                    "segments": r.segment_stats.as_ref().map(|s| s.segments),
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }

    /// Whitespace-separated `x rank1 map` lines.
    pub fn to_series(&self) -> String {
        let mut out = format!("# x rank1 map ({})\n", self.axis);
        for r in &self.rows {
            let _ = writeln!(out, "{} {:.6} {:.6}", r.x, r.report.rank1(), r.report.map);
        }
        out
    }
}

fn row<T: Scalar>(value: String, x: f64, o: crate::pipeline::Outcome<T>) -> AblationRow {
    let mut report = o.report;
    report.label = value.clone();
    AblationRow {
        value,
        x,
        report,
        segment_stats: o.segment_stats,
    }
}

/// One pipeline run per grid point with a shared seed. Points along the
/// `min_len` axis share the CID stage and the mined segments.
pub fn ablation_grid<T: Scalar>(base: &PipelineConfig, axis: &Axis) -> Result<AblationTable> {
    base.validate()?;
    axis.validate()?;
    let mut rows = Vec::new();
    match axis {
        Axis::Steps => {
            let prep = Prepared::<T>::new(base)?;
            for (i, (steps, o)) in run_steps(base, &prep, &Steps::ALL)?.into_iter().enumerate() {
                rows.push(row(steps.label().to_string(), i as f64, o));
            }
        }
        Axis::MinLen(values) => {
            let prep = Prepared::<T>::new(base)?;
            let (cid, curve) = train_cid(base, fresh_encoder::<T>(base, StageSeed::EncoderInit)?, &prep.table, |_| {})?;
            let raw = mine_segments(base, &prep.train, &cid.query)?;
            for &min_len in values {
                let mut cfg = base.clone();
                cfg.tracklet.min_len = min_len;
                let o = finish_from_cid(&cfg, &prep, cid.clone(), &raw, curve.clone())?;
                rows.push(row(min_len.to_string(), min_len as f64, o));
            }
        }
        Axis::DataFraction(values) => {
            for &f in values {
                let cfg = PipelineConfig {
                    data_fraction: f,
                    ..base.clone()
                };
                let prep = Prepared::<T>::new(&cfg)?;
                rows.push(row(format!("{f}"), f, run_method(&cfg, &prep)?));
            }
        }
        Axis::ModelSize(values) => {
            let prep = Prepared::<T>::new(base)?;
            for hidden in values {
                let mut cfg = base.clone();
                cfg.encoder.hidden = hidden.clone();
                let params = cfg.architecture().0.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
                let label = hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
                rows.push(row(label, params as f64, run_method(&cfg, &prep)?));
            }
        }
    }
    Ok(AblationTable {
        axis: axis.name().to_string(),
        seed: base.seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_defaults() {
        assert_eq!("steps".parse::<Axis>().unwrap(), Axis::Steps);
        assert_eq!(
            "data_fraction".parse::<Axis>().unwrap(),
            Axis::DataFraction(vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0])
        );
        match "min_len".parse::<Axis>().unwrap() {
            Axis::MinLen(v) => assert!(v.contains(&5)),
            other => panic!("{other:?}"),
        }
        assert!("depth".parse::<Axis>().is_err());
        assert!(Axis::MinLen(vec![0, 3]).validate().is_err());
        assert!(Axis::DataFraction(vec![1.5]).validate().is_err());
    }
}
