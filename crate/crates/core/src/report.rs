//! Evaluation records, certified-accuracy curves and summary statistics.

use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::classifiers::Label;
use crate::error::{Error, Result};
use crate::numeric::percentile_linear;

/// Outcome for one input.
///
/// Misclassified inputs carry `radius = 0` and `log10_cc = 0`, as do
/// abstentions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub length: usize,
    pub true_label: Label,
    pub predicted_label: Label,
    pub radius: usize,
    pub log10_cc: f64,
    pub abstained: bool,
    pub t1_lb: f64,
    pub t2_ub: f64,
    /// Wall-clock time, recorded only when timing is requested so that
    /// output stays reproducible by default.
    pub seconds: Option<f64>,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.true_label == self.predicted_label
    }

    pub fn metric(&self, mode: CurveMode) -> f64 {
        match mode {
            CurveMode::Radius => self.radius as f64,
            CurveMode::LogCardinality => self.log10_cc,
        }
    }
}

pub fn write_records<W: Write>(mut out: W, records: &[EvalRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("results line {}: {e}", i + 1)))?,
        );
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveMode {
    Radius,
    LogCardinality,
}

impl FromStr for CurveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radius" | "by-radius" => Ok(CurveMode::Radius),
            "log-cardinality" | "by-log-cardinality" | "cc" => Ok(CurveMode::LogCardinality),
            _ => Err(Error::invalid(format!("unknown curve mode `{s}` (radius, log-cardinality)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Fraction of records that are correct with metric at least `c`, for each
/// threshold `c` (ascending).
pub fn certified_accuracy_curve(records: &[EvalRecord], thresholds: &[f64], mode: CurveMode) -> Result<Vec<CurvePoint>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no evaluation records".into()));
    }
    if thresholds.iter().any(|t| t.is_nan()) || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be ascending"));
    }
    let mut metrics: Vec<f64> = records.iter().filter(|r| r.correct()).map(|r| r.metric(mode)).collect();
    metrics.sort_by(f64::total_cmp);
    let n = records.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&c| {
            let below = metrics.partition_point(|&m| m < c);
            CurvePoint {
                threshold: c,
                accuracy: (metrics.len() - below) as f64 / n,
            }
        })
        .collect())
}

/// Thresholds covering the observed range: integer radii `0..=max`, or
/// `steps + 1` evenly spaced log-cardinalities from 0 to the maximum.
pub fn default_thresholds(records: &[EvalRecord], mode: CurveMode, steps: usize) -> Vec<f64> {
    let max = records.iter().map(|r| r.metric(mode)).fold(0.0, f64::max);
    match mode {
        CurveMode::Radius => (0..=max as usize).map(|r| r as f64).collect(),
        CurveMode::LogCardinality => {
            let steps = steps.max(1);
            (0..=steps).map(|i| max * i as f64 / steps as f64).collect()
        }
    }
}

pub fn write_curve_csv<W: Write>(mut out: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(out, "threshold,accuracy")?;
    for p in curve {
        writeln!(out, "{},{}", p.threshold, p.accuracy)?;
    }
    out.flush()?;
    Ok(())
}

/// Which order statistic stands for the typical log-cardinality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogCcStatistic {
    Median,
    /// Used when the median is zero. Taken on the side of larger
    /// cardinalities (the 75th percentile), since the lower quartile of a
    /// non-negative sample with zero median is itself zero.
    Q1,
}

/// Statistics over a group of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub clean_accuracy: f64,
    pub mean_cr: f64,
    /// Standard error of the mean radius, `sd / √n` with the sample sd.
    pub mean_cr_se: f64,
    pub log_cc: f64,
    pub log_cc_statistic: LogCcStatistic,
}

impl GroupStats {
    pub fn of(records: &[EvalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("no evaluation records".into()));
        }
        let n = records.len() as f64;
        let clean = records.iter().filter(|r| r.correct()).count() as f64 / n;
        let radii: Vec<f64> = records.iter().map(|r| r.radius as f64).collect();
        let mean = radii.iter().sum::<f64>() / n;
        let se = if records.len() > 1 {
            let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        let mut cc: Vec<f64> = records.iter().map(|r| r.log10_cc).collect();
        cc.sort_by(f64::total_cmp);
        let median = percentile_linear(&cc, 50.0);
        let (log_cc, log_cc_statistic) = if median == 0.0 {
            (percentile_linear(&cc, 75.0), LogCcStatistic::Q1)
        } else {
            (median, LogCcStatistic::Median)
        };
        Ok(GroupStats {
            count: records.len(),
            clean_accuracy: clean,
            mean_cr: mean,
            mean_cr_se: se,
            log_cc,
            log_cc_statistic,
        })
    }
}

/// Records whose lengths fall between two length quartiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileStats {
    /// Inclusive length range `(lo, hi]`, with the first group closed below.
    pub min_length: f64,
    pub max_length: f64,
    pub stats: Option<GroupStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub overall: GroupStats,
    /// Distance between standardized radii and lengths; absent when either
    /// has zero variance.
    pub wasserstein: Option<f64>,
    pub quartiles: Vec<QuartileStats>,
}

impl Summary {
    /// Single-level JSON object, with quartile groups prefixed `q1_` to `q4_`.
    pub fn to_flat_json(&self) -> Value {
        let mut map = Map::new();
        let put_group = |map: &mut Map<String, Value>, prefix: &str, g: &GroupStats| {
            map.insert(format!("{prefix}count"), g.count.into());
            map.insert(format!("{prefix}clean_accuracy"), g.clean_accuracy.into());
            map.insert(format!("{prefix}mean_cr"), g.mean_cr.into());
            map.insert(format!("{prefix}mean_cr_se"), g.mean_cr_se.into());
            map.insert(format!("{prefix}log_cc"), g.log_cc.into());
            map.insert(
                format!("{prefix}log_cc_statistic"),
                serde_json::to_value(g.log_cc_statistic).expect("enum serializes"),
            );
        };
        put_group(&mut map, "", &self.overall);
        map.insert("wasserstein".into(), self.wasserstein.into());
        for (i, q) in self.quartiles.iter().enumerate() {
            let prefix = format!("q{}_", i + 1);
            map.insert(format!("{prefix}min_length"), q.min_length.into());
            map.insert(format!("{prefix}max_length"), q.max_length.into());
            match &q.stats {
                Some(g) => put_group(&mut map, &prefix, g),
                None => {
                    map.insert(format!("{prefix}count"), 0.into());
                }
            }
        }
        Value::Object(map)
    }
}

/// Overall statistics, the radius/length Wasserstein distance and a
/// breakdown by length quartile.
pub fn summary_stats(records: &[EvalRecord]) -> Result<Summary> {
    let overall = GroupStats::of(records)?;
    let radii: Vec<f64> = records.iter().map(|r| r.radius as f64).collect();
    let lengths: Vec<f64> = records.iter().map(|r| r.length as f64).collect();
    let wasserstein = match wasserstein_standardized(&radii, &lengths) {
        Ok(w) => Some(w),
        Err(Error::DegenerateInput(_)) | Err(Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };

    let mut sorted = lengths.clone();
    sorted.sort_by(f64::total_cmp);
    let cuts = [
        f64::NEG_INFINITY,
        percentile_linear(&sorted, 25.0),
        percentile_linear(&sorted, 50.0),
        percentile_linear(&sorted, 75.0),
        f64::INFINITY,
    ];
    let quartiles = cuts
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let group: Vec<EvalRecord> = records
                .iter()
                .filter(|r| {
                    let l = r.length as f64;
                    l > w[0] && l <= w[1]
                })
                .cloned()
                .collect();
            let (min_length, max_length) = (if i == 0 { sorted[0] } else { w[0] }, w[1].min(*sorted.last().unwrap()));
            Ok(QuartileStats {
                min_length,
                max_length,
                stats: if group.is_empty() { None } else { Some(GroupStats::of(&group)?) },
            })
        })
        .collect::<Result<_>>()?;
    Ok(Summary {
        overall,
        wasserstein,
        quartiles,
    })
}

fn standardize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateInput("sample has zero variance".into()));
    }
    let mut z: Vec<f64> = v.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    Ok(z)
}

/// 1-Wasserstein distance between the z-scored samples `a` and `b` (population
/// sd), which for equal sizes is the mean absolute gap between order
/// statistics.
pub fn wasserstein_standardized(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("sample sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("need at least two observations"));
    }
    let (za, zb) = (standardize(a)?, standardize(b)?);
    Ok(za.iter().zip(&zb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
