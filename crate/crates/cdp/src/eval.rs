//! Bicluster scoring and benchmark aggregation.
//!
//! Biclusters are compared as full cell sets (row set x column set). The
//! set-level score averages each bicluster's best match in the other set
//! and takes the minimum over the two directions, so extra or missing
//! biclusters on either side pull the score down.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::conjoin::Bicluster;
use crate::error::{Error, Result};

/// All cells covered by a bicluster.
pub type CellSet = HashSet<(usize, usize)>;

pub fn cells(b: &Bicluster) -> CellSet {
    b.rows
        .iter()
        .flat_map(|&r| b.cols.iter().map(move |&c| (r, c)))
        .collect()
}

/// |a intersect b| / |a union b|; zero when both sets are empty.
pub fn jaccard_pair(a: &CellSet, b: &CellSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Mean over `from` of the best cell-set match in `to`.
fn directed(from: &[CellSet], to: &[CellSet]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| to.iter().map(|b| jaccard_pair(a, b)).fold(0.0f64, f64::max))
        .sum();
    total / from.len() as f64
}

/// Symmetric set-of-biclusters similarity: the smaller of the two directed
/// average-best-match values. An empty set on either side scores zero.
pub fn jaccard_score(b1: &[Bicluster], b2: &[Bicluster]) -> f64 {
    if b1.is_empty() || b2.is_empty() {
        log::warn!("comparing against an empty bicluster set scores 0");
        return 0.0;
    }
    let s1: Vec<CellSet> = b1.iter().map(cells).collect();
    let s2: Vec<CellSet> = b2.iter().map(cells).collect();
    directed(&s1, &s2).min(directed(&s2, &s1))
}

pub fn save_biclusters(path: &Path, set: &[Bicluster]) -> Result<()> {
    let text = serde_json::to_string_pretty(set).expect("biclusters serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_biclusters(path: &Path) -> Result<Vec<Bicluster>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// One benchmark run's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub case_id: u32,
    pub method: String,
    pub seed: u64,
    pub jaccard: f64,
    pub runtime_s: f64,
    /// Failed runs keep a zero score so they still weigh on the aggregate.
    pub failed: bool,
}

/// Aggregate over seeds for one (case, method) pair.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    #[serde(rename = "case")]
    pub case_id: u32,
    pub method: String,
    pub seeds: usize,
    pub mean_jaccard: f64,
    pub sd_jaccard: f64,
    pub mean_runtime_s: f64,
}

fn mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    xs.sum::<f64>() / n as f64
}

fn sample_sd(xs: impl Iterator<Item = f64> + Clone, mean: f64) -> f64 {
    let n = xs.clone().count();
    if n < 2 {
        return 0.0;
    }
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Groups records by (case, method) in ascending order and aggregates
/// mean/sd of the score and mean runtime.
pub fn benchmark_report(records: &[RunRecord]) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::NothingToReport);
    }
    let mut keys: Vec<(u32, &str)> = records
        .iter()
        .map(|r| (r.case_id, r.method.as_str()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let rows = keys
        .into_iter()
        .map(|(case_id, method)| {
            let group: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.case_id == case_id && r.method == method)
                .collect();
            let scores = group.iter().map(|r| r.jaccard);
            let m = mean(scores.clone());
            ReportRow {
                case_id,
                method: method.to_string(),
                seeds: group.len(),
                mean_jaccard: m,
                sd_jaccard: sample_sd(scores, m),
                mean_runtime_s: mean(group.iter().map(|r| r.runtime_s)),
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from("case,method,seeds,mean_jaccard,sd_jaccard,mean_runtime_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.case_id, r.method, r.seeds, r.mean_jaccard, r.sd_jaccard, r.mean_runtime_s
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_report_json(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(rows).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
