//! Human-readable tables, run comparison and the JSONL results format.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::taxonomy::data_lines;

const ABLATION: &str = include_str!("../data/ablation_components.tsv");

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    /// One row per taxonomy category, sorted by name; AP in percent.
    pub rows: Vec<(String, Option<f64>)>,
}

impl CategoryReport {
    /// Three `Category / AP` column pairs per line; `nan` for categories
    /// without ground truth.
    pub fn to_table(&self) -> String {
        let mut s = String::from("Category\tAP\tCategory\tAP\tCategory\tAP\n");
        for chunk in self.rows.chunks(3) {
            let cells: Vec<String> = chunk
                .iter()
                .map(|(n, ap)| match ap {
                    Some(v) => format!("{n}\t{v:.3}"),
                    None => format!("{n}\tnan"),
                })
                .collect();
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        s
    }
}

pub fn per_category_report(r: &EvalResult) -> CategoryReport {
    let mut rows: Vec<(String, Option<f64>)> = r.categories.iter().map(|c| (c.name.clone(), c.mean_ap().map(|v| v * 100.0))).collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    CategoryReport { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

/// Deltas for metrics present in both lists, largest `|delta|` first.
pub fn compare_metrics(a: &[(String, f64)], b: &[(String, f64)]) -> Vec<MetricDelta> {
    let mut out: Vec<MetricDelta> = a
        .iter()
        .filter_map(|(m, va)| {
            b.iter().find(|(n, _)| n == m).map(|(_, vb)| MetricDelta { metric: m.clone(), a: *va, b: *vb, delta: vb - va })
        })
        .collect();
    out.sort_by(|x, y| y.delta.abs().total_cmp(&x.delta.abs()).then_with(|| x.metric.cmp(&y.metric)));
    out
}

pub fn compare_runs(a: &EvalResult, b: &EvalResult) -> Result<Vec<MetricDelta>> {
    if a.taxonomy_id != b.taxonomy_id || a.config != b.config || a.mode != b.mode {
        return Err(Error::TaxonomyMismatch(format!(
            "runs differ in taxonomy, mode or config ({} {:?} vs {} {:?})",
            a.taxonomy_id, a.mode, b.taxonomy_id, b.mode
        )));
    }
    Ok(compare_metrics(&a.metrics(), &b.metrics()))
}

pub fn delta_table(d: &[MetricDelta]) -> String {
    let mut s = String::from("metric\ta\tb\tdelta\n");
    for m in d {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{:+.4}", m.metric, m.a, m.b, m.delta);
    }
    s
}

/// Published component ablation rows: run name and named metrics (percent).
pub fn ablation_fixture() -> Vec<(String, Vec<(String, f64)>)> {
    let header: Vec<&str> = ABLATION.lines().find_map(|l| l.strip_prefix("# run\t")).expect("header").split('\t').collect();
    data_lines(ABLATION)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let metrics = header.iter().zip(&f[1..]).map(|(h, v)| (h.to_string(), v.parse().unwrap())).collect();
            (f[0].to_string(), metrics)
        })
        .collect()
}

/// Append one JSON line per result.
pub fn write_results_jsonl(path: &Path, results: &[EvalResult]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in results {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<EvalResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
