use std::fmt::Write as _;
use std::path::Path;

use super::artifacts::{load_graph, Metrics, GRAPH_FILE, METRICS_FILE};
use crate::accounting::cost;
use crate::error::Result;

pub const REPORT_HEADER: &str = "variant,capacity_mb,flops,accuracy";
/// Lists the variants a run is expected to produce, one per line.
pub const EXPECTED_FILE: &str = "variants.txt";

/// One report line; `None` marks a run that is missing or incomplete.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub result: Option<RowValues>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowValues {
    pub capacity_mb: f64,
    pub flops: u64,
    pub accuracy: f64,
}

/// Collects every variant directory under `dir`. Capacity and FLOPS are
/// recomputed from the stored graphs; accuracy comes from the metrics file.
pub fn collect(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows: Vec<ReportRow> = Vec::new();
    if !dir.exists() {
        return Ok(rows);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let metrics = path.join(METRICS_FILE);
        if !path.is_dir() || !metrics.exists() {
            continue;
        }
        let m = Metrics::load(&metrics)?;
        let graph_path = path.join(GRAPH_FILE);
        let result = if graph_path.exists() {
            let c = cost(&load_graph(&graph_path)?, m.input_size)?;
            Some(RowValues {
                capacity_mb: c.capacity_mb,
                flops: c.total_flops,
                accuracy: m.accuracy,
            })
        } else {
            None
        };
        rows.push(ReportRow {
            variant: m.variant,
            result,
        });
    }
    let expected = dir.join(EXPECTED_FILE);
    if expected.exists() {
        for v in std::fs::read_to_string(expected)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
        {
            if !rows.iter().any(|r| r.variant == v) {
                rows.push(ReportRow {
                    variant: v.to_string(),
                    result: None,
                });
            }
        }
    }
    rows.sort_by(|a, b| a.variant.cmp(&b.variant));
    Ok(rows)
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        match r.result {
            Some(v) => {
                let _ = writeln!(out, "{},{:.4},{},{:.6}", r.variant, v.capacity_mb, v.flops, v.accuracy);
            }
            None => {
                let _ = writeln!(out, "{},absent,absent,absent", r.variant);
            }
        }
    }
    out
}

pub fn report(dir: &Path) -> Result<String> {
    Ok(to_csv(&collect(dir)?))
}
