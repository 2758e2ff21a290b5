//! Report serialization: JSON, CSV and an aligned text table.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{relative_change, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Table => "txt",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Config(format!("unknown report format `{other}` (json, csv, table)"))),
        }
    }
}

fn json_string<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Renders a report. Output depends only on the report's contents.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    report.validate()?;
    match format {
        ReportFormat::Json => json_string(report),
        ReportFormat::Csv => Ok(report_csv(report)),
        ReportFormat::Table => Ok(report_table(report)),
    }
}

fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from("row,metric,k,value\n");
    let mut emit = |row: &str, metric: &str, values: &[f64]| {
        for (k, v) in r.ks.iter().zip(values) {
            let _ = writeln!(out, "{row},{metric},{k},{v:.6}");
        }
    };
    emit("mean", "recall", &r.mean.recall);
    emit("mean", "ndcg", &r.mean.ndcg);
    emit("std", "recall", &r.std.recall);
    emit("std", "ndcg", &r.std.ndcg);
    for s in &r.per_seed {
        let row = format!("seed-{}", s.seed);
        emit(&row, "recall", &s.recall);
        emit(&row, "ndcg", &s.ndcg);
    }
    out
}

/// Left-aligned first column, right-aligned rest, two-space gaps.
fn align(rows: &[Vec<String>]) -> String {
    let n = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == 0 {
                    format!("{c:<w$}", w = widths[j])
                } else {
                    format!("{c:>w$}", w = widths[j])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn report_table(r: &EvalReport) -> String {
    let mut rows = vec![std::iter::once("Metric".to_string())
        .chain(r.ks.iter().map(|k| format!("@{k}")))
        .collect::<Vec<_>>()];
    for (name, mean, std) in [
        ("Recall", &r.mean.recall, &r.std.recall),
        ("NDCG", &r.mean.ndcg, &r.std.ndcg),
    ] {
        rows.push(
            std::iter::once(name.to_string())
                .chain(mean.iter().zip(std).map(|(m, s)| format!("{m:.4} ± {s:.4}")))
                .collect(),
        );
    }
    let mut out = align(&rows);
    let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "seeds: {}  config: {}", seeds.join(","), &r.config_digest);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessRow {
    pub resolution: usize,
    pub report: EvalReport,
}

/// Relative change of one resolution against the highest one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRow {
    pub resolution: usize,
    pub baseline: usize,
    /// Aligned with the reports' `ks`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub dataset: String,
    pub model: String,
    pub rows: Vec<HarnessRow>,
    pub relative_change: Vec<RelativeRow>,
}

impl HarnessReport {
    /// Rows sorted by descending resolution; one relative-change row per
    /// resolution below the highest.
    pub fn new(dataset: &str, model: &str, mut rows: Vec<HarnessRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("resolution harness produced no rows".into()));
        }
        for r in &rows {
            r.report.validate()?;
        }
        rows.sort_by(|a, b| b.resolution.cmp(&a.resolution));
        let high = &rows[0];
        let rel = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).map(|(l, h)| relative_change(*l, *h)).collect();
        let relative_change = rows[1..]
            .iter()
            .map(|r| RelativeRow {
                resolution: r.resolution,
                baseline: high.resolution,
                recall: rel(&r.report.mean.recall, &high.report.mean.recall),
                ndcg: rel(&r.report.mean.ndcg, &high.report.mean.ndcg),
            })
            .collect();
        Ok(HarnessReport {
            dataset: dataset.to_string(),
            model: model.to_string(),
            rows,
            relative_change,
        })
    }

    fn header(&self) -> Vec<String> {
        let ks = &self.rows[0].report.ks;
        ["Dataset", "Models", "Resolution"]
            .into_iter()
            .map(String::from)
            .chain(ks.iter().map(|k| format!("R@{k}")))
            .chain(ks.iter().map(|k| format!("N@{k}")))
            .collect()
    }

    fn cells(&self, fmt_abs: impl Fn(f64) -> String, fmt_rel: impl Fn(f64) -> String) -> Vec<Vec<String>> {
        let mut out = vec![self.header()];
        for r in &self.rows {
            out.push(
                [self.dataset.clone(), self.model.clone(), r.resolution.to_string()]
                    .into_iter()
                    .chain(r.report.mean.recall.iter().chain(&r.report.mean.ndcg).map(|v| fmt_abs(*v)))
                    .collect(),
            );
        }
        for r in &self.relative_change {
            out.push(
                [
                    self.dataset.clone(),
                    "Rel. Change (%)".to_string(),
                    format!("{} vs {}", r.resolution, r.baseline),
                ]
                .into_iter()
                .chain(r.recall.iter().chain(&r.ndcg).map(|v| fmt_rel(*v)))
                .collect(),
            );
        }
        out
    }

    pub fn emit(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Json => json_string(self)?,
            ReportFormat::Csv => {
                let mut s = String::new();
                for row in self.cells(|v| format!("{v:.6}"), |v| format!("{v:.6}")) {
                    s.push_str(&row.join(","));
                    s.push('\n');
                }
                s
            }
            ReportFormat::Table => align(&self.cells(|v| format!("{v:.4}"), |v| format!("{v:+.2}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{MetricSet, SeedMetrics};

    pub(crate) fn report(recall: [f64; 3]) -> EvalReport {
        EvalReport {
            ks: vec![5, 10, 20],
            seeds: vec![0, 1],
            per_seed: vec![
                SeedMetrics {
                    seed: 0,
                    users: 3,
                    recall: recall.to_vec(),
                    ndcg: recall.iter().map(|r| r / 2.0).collect(),
                },
                SeedMetrics {
                    seed: 1,
                    users: 3,
                    recall: recall.to_vec(),
                    ndcg: recall.iter().map(|r| r / 2.0).collect(),
                },
            ],
            mean: MetricSet {
                recall: recall.to_vec(),
                ndcg: recall.iter().map(|r| r / 2.0).collect(),
            },
            std: MetricSet {
                recall: vec![0.0; 3],
                ndcg: vec![0.0; 3],
            },
            config_digest: "abc".into(),
        }
    }

    #[test]
    fn json_and_csv_agree_to_six_decimals() {
        let r = report([0.123456789, 0.2, 1.0 / 3.0]);
        let back: EvalReport = serde_json::from_str(&emit_report(&r, ReportFormat::Json).unwrap()).unwrap();
        let csv = emit_report(&r, ReportFormat::Csv).unwrap();
        for line in csv.lines().skip(1).filter(|l| l.starts_with("mean,recall")) {
            let f: Vec<&str> = line.split(',').collect();
            let j = back.k_index(f[2].parse().unwrap()).unwrap();
            let v: f64 = f[3].parse().unwrap();
            assert!((v - back.mean.recall[j]).abs() <= 5e-7);
        }
    }

    #[test]
    fn empty_seed_report_is_a_contract_violation() {
        let mut r = report([0.1, 0.2, 0.3]);
        r.seeds.clear();
        r.per_seed.clear();
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Table] {
            assert!(matches!(emit_report(&r, f), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn table_shows_mean_and_std() {
        let t = emit_report(&report([0.1, 0.2, 0.3]), ReportFormat::Table).unwrap();
        assert!(t.contains("0.1000 ± 0.0000"));
        assert!(t.lines().next().unwrap().contains("@20"));
    }

    #[test]
    fn unknown_format_is_a_config_error() {
        assert!(matches!("xml".parse::<ReportFormat>(), Err(Error::Config(_))));
        assert_eq!("table".parse::<ReportFormat>().unwrap(), ReportFormat::Table);
    }

    #[test]
    fn harness_table_has_relative_change_row() {
        let rows = vec![
            HarnessRow {
                resolution: 256,
                report: report([0.1, 0.2, 0.3]),
            },
            HarnessRow {
                resolution: 1024,
                report: report([0.2, 0.25, 0.3]),
            },
        ];
        let h = HarnessReport::new("synthetic", "unimodal", rows).unwrap();
        assert_eq!(h.rows[0].resolution, 1024);
        assert_eq!(h.relative_change.len(), 1);
        assert!((h.relative_change[0].recall[0] + 50.0).abs() < 1e-12);
        assert_eq!(h.relative_change[0].recall[2], 0.0);
        let t = h.emit(ReportFormat::Table).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("Dataset") && lines[0].contains("N@20"));
        assert!(lines[3].contains("Rel. Change (%)") && lines[3].contains("-50.00") && lines[3].contains("+0.00"));
    }

    #[test]
    fn single_resolution_has_no_relative_row() {
        let h = HarnessReport::new(
            "d",
            "m",
            vec![HarnessRow {
                resolution: 1024,
                report: report([0.1, 0.2, 0.3]),
            }],
        )
        .unwrap();
        assert!(h.relative_change.is_empty());
        assert_eq!(h.emit(ReportFormat::Table).unwrap().lines().count(), 2);
    }
}
