//! Request-level efficiency metrics and frontier emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::KvPrecision;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effort {
    High,
    Medium,
    Low,
}

impl fmt::Display for Effort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Effort::High => "high",
            Effort::Medium => "medium",
            Effort::Low => "low",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model_id: String,
    pub kv_precision: KvPrecision,
    pub effort: Effort,
    pub max_throughput: f64,
    pub avg_tokens_per_request: f64,
    pub suite_avg_accuracy: f64,
    /// Benchmark suite the token average was measured on.
    pub suite_id: String,
    #[serde(default)]
    pub per_benchmark: BTreeMap<String, f64>,
}

impl RunRecord {
    /// `model/precision/effort`, the key used to name a baseline.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.model_id, self.kv_precision, self.effort)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("max_throughput", self.max_throughput), ("avg_tokens_per_request", self.avg_tokens_per_request)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NonPositive(format!("{} {name} = {v}", self.key())));
            }
        }
        let accs = std::iter::once(self.suite_avg_accuracy).chain(self.per_benchmark.values().copied());
        for a in accs {
            if !(0.0..=100.0).contains(&a) {
                return Err(Error::InvalidInput(format!("{} accuracy {a} outside [0, 100]", self.key())));
            }
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositive(format!("{name} = {v}")))
    }
}

/// Requests per unit time relative to the baseline: throughput over tokens
/// per request, normalized.
pub fn relative_request_rate(r: &RunRecord, baseline: &RunRecord) -> Result<f64> {
    r.validate()?;
    baseline.validate()?;
    Ok(request_rate(r.max_throughput, r.avg_tokens_per_request)
        / request_rate(baseline.max_throughput, baseline.avg_tokens_per_request))
}

fn request_rate(throughput: f64, tokens: f64) -> f64 {
    throughput / tokens
}

pub fn effort_length_ratio(len_high: f64, len_low: f64) -> Result<f64> {
    positive("high-effort length", len_high)?;
    positive("low-effort length", len_low)?;
    Ok(len_high / len_low)
}

/// Child suite average as a percentage of the parent's.
pub fn accuracy_retention(child_avg: f64, parent_avg: f64) -> Result<f64> {
    positive("parent accuracy", parent_avg)?;
    if !(child_avg.is_finite() && child_avg >= 0.0) {
        return Err(Error::InvalidInput(format!("child accuracy {child_avg}")));
    }
    Ok(100.0 * child_avg / parent_avg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub model: String,
    pub kv_precision: KvPrecision,
    pub effort: Effort,
    pub relative_request_rate: f64,
    pub avg_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPointJson {
    #[serde(flatten)]
    pub point: FrontierPoint,
    pub suite_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierJson {
    pub baseline: String,
    pub suites: Vec<String>,
    /// True when token averages come from more than one benchmark suite.
    pub mixed_suites: bool,
    pub points: Vec<FrontierPointJson>,
}

pub fn read_records_jsonl(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
    }
    Ok(out)
}

pub fn write_records_jsonl(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One point per (model, precision, effort), sorted in that order, and the
/// JSON mirror that carries suite tags.
pub fn compute_frontier(records: &[RunRecord], baseline_id: &str) -> Result<(Vec<FrontierPoint>, FrontierJson)> {
    let mut by_key: BTreeMap<(String, KvPrecision, Effort), &RunRecord> = BTreeMap::new();
    for r in records {
        r.validate()?;
        if by_key.insert((r.model_id.clone(), r.kv_precision, r.effort), r).is_some() {
            return Err(Error::InvalidInput(format!("duplicate record {}", r.key())));
        }
    }
    let baseline = records
        .iter()
        .find(|r| r.key() == baseline_id)
        .ok_or_else(|| Error::MissingBaseline(baseline_id.to_string()))?;
    let suites: BTreeSet<String> = records.iter().map(|r| r.suite_id.clone()).collect();
    if suites.len() > 1 {
        log::warn!("frontier mixes token averages from suites {suites:?}");
    }
    let mut points = Vec::with_capacity(by_key.len());
    let mut json_points = Vec::with_capacity(by_key.len());
    for r in by_key.values() {
        let point = FrontierPoint {
            model: r.model_id.clone(),
            kv_precision: r.kv_precision,
            effort: r.effort,
            relative_request_rate: relative_request_rate(r, baseline)?,
            avg_accuracy: r.suite_avg_accuracy,
        };
        json_points.push(FrontierPointJson { point: point.clone(), suite_id: r.suite_id.clone() });
        points.push(point);
    }
    let json = FrontierJson {
        baseline: baseline_id.to_string(),
        mixed_suites: suites.len() > 1,
        suites: suites.into_iter().collect(),
        points: json_points,
    };
    Ok((points, json))
}

pub const FRONTIER_CSV: &str = "frontier.csv";
pub const FRONTIER_JSON: &str = "frontier.json";

/// Writes `frontier.csv` and `frontier.json` into `out_dir`.
pub fn emit_frontier(records: &[RunRecord], baseline_id: &str, out_dir: impl AsRef<Path>) -> Result<Vec<FrontierPoint>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (points, json) = compute_frontier(records, baseline_id)?;
    write_frontier_csv(dir.join(FRONTIER_CSV), &points)?;
    crate::library::save_json(&dir.join(FRONTIER_JSON), &json)?;
    Ok(points)
}

pub fn write_frontier_csv(path: impl AsRef<Path>, points: &[FrontierPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_frontier_csv(path: impl AsRef<Path>) -> Result<Vec<FrontierPoint>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, tp: f64, tok: f64) -> RunRecord {
        RunRecord {
            model_id: model.into(),
            kv_precision: KvPrecision::Bf16,
            effort: Effort::High,
            max_throughput: tp,
            avg_tokens_per_request: tok,
            suite_avg_accuracy: 50.0,
            suite_id: "s".into(),
            per_benchmark: BTreeMap::new(),
        }
    }

    #[test]
    fn self_rate_is_one() {
        let r = rec("a", 4.0, 12.7);
        assert_eq!(relative_request_rate(&r, &r).unwrap(), 1.0);
    }

    #[test]
    fn doubling_both_is_erased() {
        assert_eq!(relative_request_rate(&rec("a", 8.0, 25.4), &rec("b", 4.0, 12.7)).unwrap(), 1.0);
    }

    #[test]
    fn nonpositive_rejected() {
        assert!(relative_request_rate(&rec("a", 0.0, 1.0), &rec("b", 1.0, 1.0)).is_err());
        assert!(effort_length_ratio(1.0, 0.0).is_err());
        assert!(accuracy_retention(50.0, 0.0).is_err());
    }

    #[test]
    fn missing_baseline_named() {
        let err = compute_frontier(&[rec("a", 1.0, 1.0)], "b/bf16/high").unwrap_err();
        assert!(matches!(err, Error::MissingBaseline(ref k) if k == "b/bf16/high"));
    }

    #[test]
    fn retention_examples() {
        assert_eq!(accuracy_retention(40.0, 40.0).unwrap(), 100.0);
        assert!((effort_length_ratio(13.05, 1.35).unwrap() - 9.667).abs() < 1e-3);
    }
}
