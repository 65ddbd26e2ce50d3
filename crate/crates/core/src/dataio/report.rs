use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fitting::FitResult;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Marker for types that can appear as rows of a report.
pub trait ReportRecord: Serialize {}

impl<T: Serialize> ReportRecord for T {}

/// Per-mode fit summary as emitted by the fit commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitRecord {
    pub f0_hz: f64,
    pub qi: f64,
    pub qe: f64,
    pub qi_sigma: f64,
    pub qe_sigma: f64,
    pub residual_rms: f64,
    pub converged: bool,
}

impl From<&FitResult> for FitRecord {
    fn from(r: &FitResult) -> Self {
        Self {
            f0_hz: r.mode.f0,
            qi: r.mode.qi,
            qe: r.mode.qe,
            qi_sigma: r.sigma.qi,
            qe_sigma: r.sigma.qe,
            residual_rms: r.residual_norm,
            converged: r.converged,
        }
    }
}

/// One row of figure data: measured value and model value at `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub y_fit: f64,
}

/// serde_json maps NaN and infinities to `null`; optional fields are skipped
/// rather than nulled, so any `null` here is a non-finite number.
fn find_null(value: &Value, path: &str) -> Option<String> {
    match value {
        Value::Null => Some(path.to_string()),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .find_map(|(i, v)| find_null(v, &format!("{path}[{i}]"))),
        Value::Object(map) => map.iter().find_map(|(k, v)| {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            find_null(v, &p)
        }),
        _ => None,
    }
}

fn flatten(value: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &key, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Renders `records` as a versioned JSON document or as CSV.
///
/// Field order follows the record's declaration order. Nested structures are
/// flattened to dotted column names in CSV.
pub fn write_report<R: ReportRecord>(kind: &str, records: &[R], format: ReportFormat) -> Result<String> {
    let values = records
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for (i, v) in values.iter().enumerate() {
        if let Some(path) = find_null(v, "") {
            return Err(Error::NonFinite(format!("{kind}[{i}].{path}")));
        }
    }

    match format {
        ReportFormat::Json => {
            let mut doc = Map::new();
            doc.insert("schema_version".into(), REPORT_SCHEMA_VERSION.into());
            doc.insert("kind".into(), kind.into());
            doc.insert("records".into(), Value::Array(values));
            let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
            text.push('\n');
            Ok(text)
        }
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            let mut header: Option<Vec<String>> = None;
            for v in &values {
                let mut cells = Vec::new();
                flatten(v, "", &mut cells);
                let names: Vec<String> = cells.iter().map(|(k, _)| k.clone()).collect();
                match &header {
                    None => {
                        writer.write_record(&names)?;
                        header = Some(names);
                    }
                    Some(h) if *h != names => {
                        return Err(Error::invalid("records", "rows do not share the same columns"));
                    }
                    Some(_) => {}
                }
                writer.write_record(cells.iter().map(|(_, c)| c))?;
            }
            let body = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            let mut text = format!("# schema_version={REPORT_SCHEMA_VERSION} kind={kind}\n");
            text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
            Ok(text)
        }
    }
}

pub fn write_report_to<R: ReportRecord>(path: &Path, kind: &str, records: &[R], format: ReportFormat) -> Result<()> {
    let text = write_report(kind, records, format)?;
    std::fs::write(path, text).map_err(|source| Error::File { path: path.to_path_buf(), source })
}
