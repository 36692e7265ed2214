//! Tabular output for metric rows: CSV with a header, or JSON lines.

use std::io::Write;

use clap::ValueEnum;
use duo_core::MetricRow;
use serde::Deserialize;
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Column name for a selective-accuracy target, e.g. `0.98 -> sac_98`, `0.995 -> sac_99.5`.
pub fn sac_column(target: f64) -> String {
    let pct = (target * 100.0 * 1e6).round() / 1e6;
    format!("sac_{pct}")
}

fn columns(targets: &[f64]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "schema_version",
        "dataset",
        "split",
        "large_model",
        "small_model",
        "balance",
        "mode",
        "measure",
        "accuracy",
        "macro_f1",
        "nll",
        "brier",
        "ece",
        "auroc",
        "aurc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(targets.iter().map(|&t| sac_column(t)));
    cols
}

fn values(row: &MetricRow) -> Vec<Value> {
    let mut v = vec![
        Value::from(SCHEMA_VERSION),
        Value::from(row.dataset.clone()),
        Value::from(row.split.clone()),
        Value::from(row.large_model.clone()),
        Value::from(row.small_model.clone()),
        Value::from(row.balance),
        Value::from(row.mode.clone()),
        Value::from(row.measure.clone()),
        Value::from(row.accuracy),
        Value::from(row.macro_f1),
        Value::from(row.nll),
        Value::from(row.brier),
        Value::from(row.ece),
        Value::from(row.auroc),
        Value::from(row.aurc),
    ];
    v.extend(row.sac.iter().map(|&(_, c)| Value::from(c)));
    v
}

fn csv_field(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Writes `rows`, all of which were evaluated with the same `targets`.
pub fn write_rows<W: Write>(
    out: W,
    rows: &[MetricRow],
    targets: &[f64],
    format: Format,
) -> std::io::Result<()> {
    let cols = columns(targets);
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(&cols)?;
            for row in rows {
                w.write_record(values(row).iter().map(csv_field))?;
            }
            w.flush()
        }
        Format::Json => {
            let mut out = out;
            for row in rows {
                let obj: Map<String, Value> = cols.iter().cloned().zip(values(row)).collect();
                serde_json::to_writer(&mut out, &obj)?;
                out.write_all(b"\n")?;
            }
            out.flush()
        }
    }
}
