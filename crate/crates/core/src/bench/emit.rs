use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};

use super::sweep::SweepResult;

pub const CSV_HEADER: [&str; 12] = [
    "method",
    "ratio_k",
    "ratio_v",
    "window",
    "quant_mode",
    "seed",
    "mean_logit_err",
    "cosine",
    "bytes_total",
    "achieved_ratio",
    "exact_rate",
    "error",
];

/// One CSV line. Metric fields are `None` for errored cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub ratio_k: f64,
    pub ratio_v: f64,
    pub window: usize,
    pub quant_mode: String,
    pub seed: u64,
    pub mean_logit_err: Option<f64>,
    pub cosine: Option<f64>,
    pub bytes_total: Option<usize>,
    pub achieved_ratio: Option<f64>,
    pub exact_rate: Option<f64>,
    pub error: Option<String>,
}

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn csv_rows(result: &SweepResult) -> Vec<CsvRow> {
    result
        .rows
        .iter()
        .map(|r| {
            let m = r.outcome.as_ref().ok();
            CsvRow {
                method: r.cell.label(),
                ratio_k: r.cell.ratio_k,
                ratio_v: r.cell.ratio_v,
                window: r.cell.window,
                quant_mode: r.cell.quant_mode.as_str().to_string(),
                seed: r.seed,
                mean_logit_err: m.map(|m| m.fidelity.mean_logit_err),
                cosine: m.map(|m| m.fidelity.attention_cosine),
                bytes_total: m.map(|m| m.stats.bytes_total),
                achieved_ratio: m.map(|m| m.stats.achieved_ratio),
                exact_rate: m.map(|m| m.exact_rate()),
                error: r.outcome.as_ref().err().map(|e| one_line(e)),
            }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> CskvError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CskvError::io(path, io),
        other => CskvError::Format(format!("{}: {other:?}", path.display())),
    }
}

/// One row per (cell, seed); header only when the result is empty.
pub fn emit_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for row in csv_rows(result) {
        w.serialize(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CskvError::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub fit: String,
    pub layer: usize,
    pub target: String,
    /// `(step, loss)` pairs.
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeries {
    pub method: String,
    pub ratio_k: f64,
    pub ratio_v: f64,
    pub window: usize,
    pub quant_mode: String,
    pub seed: u64,
    /// Relative logit error per decode position.
    pub logit_errors: Vec<f64>,
    pub layer_residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub loss_curves: Vec<CurveSeries>,
    pub cells: Vec<CellSeries>,
}

/// Loss curves of every fit and per-position error series of every cell.
/// Wall-clock fields are left out so the file is reproducible.
pub fn plot_data(result: &SweepResult) -> PlotData {
    let mut loss_curves = Vec::new();
    for f in &result.fits {
        let Some(report) = &f.report else { continue };
        for l in &report.layers {
            for (target, t) in [("k", &l.key), ("v", &l.value)] {
                loss_curves.push(CurveSeries {
                    fit: f.label.clone(),
                    layer: l.layer,
                    target: target.to_string(),
                    points: t.curve.iter().map(|p| (p.step, p.loss)).collect(),
                });
            }
        }
    }
    let cells = result
        .rows
        .iter()
        .filter_map(|r| {
            let m = r.outcome.as_ref().ok()?;
            Some(CellSeries {
                method: r.cell.label(),
                ratio_k: r.cell.ratio_k,
                ratio_v: r.cell.ratio_v,
                window: r.cell.window,
                quant_mode: r.cell.quant_mode.as_str().to_string(),
                seed: r.seed,
                logit_errors: m.fidelity.logit_errors.clone(),
                layer_residuals: m.fidelity.layer_residuals.clone(),
            })
        })
        .collect();
    PlotData { loss_curves, cells }
}

pub fn emit_plot_data(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&plot_data(result))?;
    std::fs::write(path, text).map_err(|e| CskvError::io(path, e))
}

/// Seed-averaged metrics of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub ratio_k: f64,
    pub ratio_v: f64,
    pub window: usize,
    pub quant_mode: String,
    pub seeds: usize,
    pub errors: usize,
    pub mean_logit_err: f64,
    pub cosine: f64,
    pub bytes_total: f64,
    pub achieved_ratio: f64,
    pub exact_rate: f64,
}

/// Groups rows by configuration (first-seen order) and averages over the
/// seeds that succeeded.
pub fn summarize(rows: &[CsvRow]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        let key = format!(
            "{}|{}|{}|{}|{}",
            r.method, r.ratio_k, r.ratio_v, r.window, r.quant_mode
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .iter()
        .map(|k| {
            let g = &groups[k];
            let ok: Vec<&&CsvRow> = g.iter().filter(|r| r.error.is_none()).collect();
            let avg = |f: &dyn Fn(&CsvRow) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            SummaryRow {
                method: g[0].method.clone(),
                ratio_k: g[0].ratio_k,
                ratio_v: g[0].ratio_v,
                window: g[0].window,
                quant_mode: g[0].quant_mode.clone(),
                seeds: g.len(),
                errors: g.len() - ok.len(),
                mean_logit_err: avg(&|r| r.mean_logit_err),
                cosine: avg(&|r| r.cosine),
                bytes_total: avg(&|r| r.bytes_total.map(|b| b as f64)),
                achieved_ratio: avg(&|r| r.achieved_ratio),
                exact_rate: avg(&|r| r.exact_rate),
            }
        })
        .collect()
}

/// Fixed-width table, or `no data` for an empty summary.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    if rows.is_empty() {
        return "no data\n".to_string();
    }
    let mut out = format!(
        "{:<14} {:>8} {:>8} {:>6} {:>6} {:>5} {:>4} {:>12} {:>8} {:>12} {:>8} {:>6}\n",
        "method",
        "ratio_k",
        "ratio_v",
        "window",
        "quant",
        "seeds",
        "err",
        "logit_err",
        "cosine",
        "bytes",
        "ratio",
        "exact"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>8.4} {:>8.4} {:>6} {:>6} {:>5} {:>4} {:>12.4e} {:>8.5} {:>12.0} {:>8.4} {:>6.3}\n",
            r.method,
            r.ratio_k,
            r.ratio_v,
            r.window,
            r.quant_mode,
            r.seeds,
            r.errors,
            r.mean_logit_err,
            r.cosine,
            r.bytes_total,
            r.achieved_ratio,
            r.exact_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_result_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        emit_csv(&SweepResult::default(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, format!("{}\n", CSV_HEADER.join(",")));
        assert!(read_csv(&p).unwrap().is_empty());
        assert_eq!(render_summary(&summarize(&[])), "no data\n");
    }

    #[test]
    fn summary_averages_successful_seeds() {
        let row = |seed, err: Option<f64>| CsvRow {
            method: "cskv".into(),
            ratio_k: 0.5,
            ratio_v: 0.5,
            window: 8,
            quant_mode: "none".into(),
            seed,
            mean_logit_err: err,
            cosine: err.map(|_| 0.9),
            bytes_total: err.map(|_| 100),
            achieved_ratio: err.map(|_| 0.25),
            exact_rate: err.map(|_| 1.0),
            error: if err.is_none() {
                Some("boom".into())
            } else {
                None
            },
        };
        let s = summarize(&[row(0, Some(0.1)), row(1, Some(0.3)), row(2, None)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].seeds, 3);
        assert_eq!(s[0].errors, 1);
        assert!((s[0].mean_logit_err - 0.2).abs() < 1e-15);
        assert!(render_summary(&s).contains("cskv"));
    }
}
