//! Metrics files and ablation tables.
//!
//! Run tables store values in shortest round-trip form, so summaries
//! regenerated from a stored table are byte-identical to the originals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::MetricsRecord;
use crate::error::{Error, Result};

pub const RUNS_HEADER: &str = "method,mode,shots,seed,session,miou_b,miou_n,hm";
pub const SUMMARY_HEADER: &str =
    "method,mode,shots,seeds,miou_b_mean,miou_b_std,miou_n_mean,miou_n_std,hm_mean,hm_std";
pub const SERIES_HEADER: &str = "lambda,hm_mean,hm_std,seeds";

/// `metrics_{method}_{mode}_{K}shot_seed{seed}.jsonl`.
pub fn metrics_file_name(method: &str, mode: &str, shots: usize, seed: u64) -> String {
    format!("metrics_{method}_{mode}_{shots}shot_seed{seed}.jsonl")
}

/// One JSON object per line.
pub fn metrics_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::InvalidConfig(format!("bad metrics line: {e}")))
        })
        .collect()
}

pub fn runs_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method, r.mode, r.shots, r.seed, r.session, r.miou_b, r.miou_n, r.hm
        );
    }
    out
}

pub fn parse_runs_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let bad = |n: usize, m: &str| Error::InvalidConfig(format!("runs table line {n}: {m}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RUNS_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(bad(n + 1, "expected 8 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 1, "bad number"));
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(n + 1, "bad integer"));
            Ok(MetricsRecord {
                method: f[0].to_string(),
                mode: f[1].to_string(),
                shots: int(f[2])? as usize,
                seed: int(f[3])?,
                session: int(f[4])? as usize,
                miou_b: num(f[5])?,
                miou_n: num(f[6])?,
                hm: num(f[7])?,
                per_class: BTreeMap::new(),
            })
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mode: String,
    pub shots: usize,
    pub seeds: usize,
    pub miou_b: (f64, f64),
    pub miou_n: (f64, f64),
    pub hm: (f64, f64),
}

/// Aggregates run records per method, keeping first-appearance order.
/// Records are sorted by seed within a method first, so the result does not
/// depend on the order runs finished in.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.method.clone(), r.mode.clone(), r.shots);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let mut rs = groups[&key].clone();
            rs.sort_by_key(|r| r.seed);
            let col = |f: fn(&MetricsRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                method: key.0,
                mode: key.1,
                shots: key.2,
                seeds: rs.len(),
                miou_b: col(|r| r.miou_b),
                miou_n: col(|r| r.miou_n),
                hm: col(|r| r.hm),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.method, r.mode, r.shots, r.seeds, r.miou_b.0, r.miou_b.1, r.miou_n.0, r.miou_n.1, r.hm.0, r.hm.1
        );
    }
    out
}

/// Readable table: one row per method with `mean ± std` cells.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<22} {:>16} {:>16} {:>16}\n", "method", "mIoU-B", "mIoU-N", "HM");
    for r in rows {
        let cell = |v: (f64, f64)| format!("{:.2} ± {:.2}", v.0, v.1);
        let _ = writeln!(
            out,
            "{:<22} {:>16} {:>16} {:>16}",
            r.method,
            cell(r.miou_b),
            cell(r.miou_n),
            cell(r.hm)
        );
    }
    out
}

/// Method label of a sweep row.
pub fn sweep_label(lambda: f64) -> String {
    format!("ours(lambda={lambda})")
}

/// `(λ, mean HM, std HM, seeds)` for every sweep row, in table order.
pub fn lambda_series(rows: &[SummaryRow]) -> Vec<(f64, f64, f64, usize)> {
    rows.iter()
        .filter_map(|r| {
            let l = r.method.strip_prefix("ours(lambda=")?.strip_suffix(')')?;
            Some((l.parse().ok()?, r.hm.0, r.hm.1, r.seeds))
        })
        .collect()
}

pub fn series_csv(series: &[(f64, f64, f64, usize)]) -> String {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for (l, m, s, n) in series {
        let _ = writeln!(out, "{l},{m:.4},{s:.4},{n}");
    }
    out
}

/// λ with the highest mean HM; the first one wins ties.
pub fn argmax_lambda(series: &[(f64, f64, f64, usize)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(l, m, _, _) in series {
        if best.map_or(true, |(_, bm)| m > bm) {
            best = Some((l, m));
        }
    }
    best.map(|b| b.0)
}
