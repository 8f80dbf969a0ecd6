//! Result rows as CSV and aligned text.

use std::path::Path;

use petl_core::accounting::ComplexityRow;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// CSV header, in column order.
pub const COLUMNS: [&str; 12] = [
    "method",
    "arch",
    "use_layers",
    "hyperparams",
    "trainable_params",
    "metric_name",
    "value",
    "ci_low",
    "ci_high",
    "train_ms_per_step_ratio",
    "infer_ratio",
    "seed",
];

fn fixed<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

fn fixed_opt<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => fixed(v, s),
        None => s.serialize_str(""),
    }
}

fn parse_opt<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    let s = String::deserialize(d)?;
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(serde::de::Error::custom)
}

/// One evaluated configuration. Timing ratios are relative to full
/// fine-tuning of the same architecture and empty when not measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub arch: String,
    pub use_layers: usize,
    pub hyperparams: String,
    pub trainable_params: u64,
    pub metric_name: String,
    #[serde(serialize_with = "fixed")]
    pub value: f64,
    #[serde(serialize_with = "fixed")]
    pub ci_low: f64,
    #[serde(serialize_with = "fixed")]
    pub ci_high: f64,
    #[serde(serialize_with = "fixed_opt", deserialize_with = "parse_opt")]
    pub train_ms_per_step_ratio: Option<f64>,
    #[serde(serialize_with = "fixed_opt", deserialize_with = "parse_opt")]
    pub infer_ratio: Option<f64>,
    pub seed: u64,
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(|e| Error::Report(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Report(e.to_string()))?;
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Report(format!("unexpected header: {header:?}")));
    }
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Report(e.to_string()))
}

/// Columns padded to a common width; numbers right-aligned.
pub fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let numeric = |s: &str| !s.is_empty() && s.parse::<f64>().is_ok();
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| {
                if numeric(c) {
                    format!("{c:>w$}")
                } else {
                    format!("{c:<w$}")
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_default()
}

pub fn rows_text(rows: &[ReportRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.arch.clone(),
                r.use_layers.to_string(),
                r.hyperparams.clone(),
                r.trainable_params.to_string(),
                r.metric_name.clone(),
                format!("{:.4}", r.value),
                format!("{:.4}", r.ci_low),
                format!("{:.4}", r.ci_high),
                opt(r.train_ms_per_step_ratio),
                opt(r.infer_ratio),
                r.seed.to_string(),
            ]
        })
        .collect();
    aligned(&COLUMNS, &cells)
}

pub const COMPLEXITY_COLUMNS: [&str; 6] = ["arch", "method", "hyperparams", "trainable", "ratio_pct", "note"];

pub fn complexity_text(rows: &[ComplexityRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.arch.clone(),
                r.method.clone(),
                r.hyperparams.clone(),
                r.trainable.to_string(),
                format!("{:.4}", 100.0 * r.ratio),
                r.annotation.clone().unwrap_or_default(),
            ]
        })
        .collect();
    aligned(&COMPLEXITY_COLUMNS, &cells)
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Report(e.to_string());
    w.write_record(COMPLEXITY_COLUMNS).map_err(err)?;
    for r in rows {
        w.write_record([
            r.arch.clone(),
            r.method.clone(),
            r.hyperparams.clone(),
            r.trainable.to_string(),
            format!("{:.6}", 100.0 * r.ratio),
            r.annotation.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

/// Writes `report.csv` and `report.txt` into `dir`.
pub fn emit(rows: &[ReportRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, to_csv(rows)?).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, rows_text(rows)).map_err(|e| Error::io(&txt_path, e))?;
    Ok(())
}

/// Reads every `report.csv` under `dir` (recursively), in path order.
pub fn collect(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "report.csv") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        rows.extend(from_csv(&text)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ReportRow {
        ReportRow {
            method: "lora".into(),
            arch: "transformer-d32-l2".into(),
            use_layers: 2,
            hyperparams: "rank=2;scope=all".into(),
            trainable_params: 1152,
            metric_name: "accuracy".into(),
            value: 0.8125,
            ci_low: 0.75,
            ci_high: 0.875,
            train_ms_per_step_ratio: None,
            infer_ratio: Some(1.0),
            seed: 3,
        }
    }

    #[test]
    fn csv_round_trip_is_byte_stable() {
        let text = to_csv(&[row(), row()]).unwrap();
        let parsed = from_csv(&text).unwrap();
        assert_eq!(parsed[0], row());
        assert_eq!(to_csv(&parsed).unwrap(), text);
        assert!(text.lines().nth(1).unwrap().contains("0.812500"));
    }

    #[test]
    fn empty_report_has_only_the_header() {
        assert_eq!(to_csv(&[]).unwrap(), format!("{}\n", COLUMNS.join(",")));
    }

    #[test]
    fn aligned_pads_columns() {
        let t = aligned(&["a", "num"], &[vec!["xyz".into(), "1".into()], vec!["q".into(), "100".into()]]);
        assert_eq!(t, "a    num\nxyz    1\nq    100\n");
    }
}
