use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DeviceGeometry;

const BUNDLED_TABLE: &str = include_str!("../../assets/device_table.json");

/// One measured resonator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRecord {
    pub name: String,
    pub geometry: DeviceGeometry,
    /// Mean measured mode frequency (Hz).
    pub f0_meas: f64,
    pub qe_meas: f64,
    pub qi_meas: f64,
    /// Tabulated `Qi * f0` (Hz).
    pub qi_f0_product: f64,
}

impl DeviceRecord {
    /// Relative deviation of the tabulated product from `qi_meas * f0_meas`.
    pub fn product_mismatch(&self) -> f64 {
        (self.qi_f0_product - self.qi_meas * self.f0_meas).abs() / self.qi_f0_product
    }
}

/// Flat on-disk row shared by the JSON and CSV layouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DeviceRow {
    name: String,
    a_m: f64,
    aperture_m: f64,
    nt: u32,
    ng: u32,
    m_half_waves: u32,
    film_thickness_m: f64,
    f0_meas_hz: f64,
    qe_meas: f64,
    qi_meas: f64,
    qi_f0_product_hz: f64,
}

#[derive(Deserialize)]
struct TableDocument {
    #[serde(default)]
    schema_version: Option<u32>,
    devices: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceTable {
    pub records: Vec<DeviceRecord>,
    pub warnings: Vec<String>,
}

impl DeviceTable {
    pub fn get(&self, name: &str) -> Option<&DeviceRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Records whose name starts with `prefix`, in table order.
    pub fn series(&self, prefix: &str) -> Vec<&DeviceRecord> {
        self.records.iter().filter(|r| r.name.starts_with(prefix)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Json,
    Csv,
}

fn into_record(row: DeviceRow, index: usize, warnings: &mut Vec<String>) -> Result<DeviceRecord> {
    let schema = |field: &str, message: String| Error::Schema { row: index, field: field.into(), message };
    let geometry = DeviceGeometry {
        a_m: row.a_m,
        aperture_m: row.aperture_m,
        nt: row.nt,
        ng: row.ng,
        m_half_waves: row.m_half_waves,
        film_thickness_m: row.film_thickness_m,
    };
    geometry.validate().map_err(|e| match e {
        Error::Validation { field, reason } => schema(&field, reason),
        other => other,
    })?;
    for (field, v) in [
        ("f0_meas_hz", row.f0_meas_hz),
        ("qe_meas", row.qe_meas),
        ("qi_meas", row.qi_meas),
        ("qi_f0_product_hz", row.qi_f0_product_hz),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(schema(field, format!("must be finite and positive, got {v}")));
        }
    }
    let record = DeviceRecord {
        name: row.name,
        geometry,
        f0_meas: row.f0_meas_hz,
        qe_meas: row.qe_meas,
        qi_meas: row.qi_meas,
        qi_f0_product: row.qi_f0_product_hz,
    };
    let mismatch = record.product_mismatch();
    if mismatch >= 0.01 {
        warnings.push(format!(
            "{}: tabulated Qi*f0 differs from qi_meas*f0_meas by {:.1}%",
            record.name,
            100.0 * mismatch
        ));
    }
    Ok(record)
}

/// Parses a device table from text. Warnings are logged and kept in
/// [`DeviceTable::warnings`].
pub fn parse_device_table(text: &str, format: TableFormat) -> Result<DeviceTable> {
    let table = parse_quietly(text, format)?;
    for w in &table.warnings {
        log::warn!("{w}");
    }
    Ok(table)
}

fn parse_quietly(text: &str, format: TableFormat) -> Result<DeviceTable> {
    let mut table = DeviceTable::default();
    if text.trim().is_empty() {
        table.warnings.push("device table is empty".into());
        return Ok(table);
    }
    match format {
        TableFormat::Json => {
            let doc: TableDocument = serde_json::from_str(text)?;
            if let Some(v) = doc.schema_version {
                if v != 1 {
                    return Err(Error::Unsupported(format!("device table schema version {v}")));
                }
            }
            for (i, value) in doc.devices.into_iter().enumerate() {
                let row: DeviceRow = serde_json::from_value(value).map_err(|e| Error::Schema {
                    row: i,
                    field: missing_field(&e.to_string()),
                    message: e.to_string(),
                })?;
                let record = into_record(row, i, &mut table.warnings)?;
                table.records.push(record);
            }
        }
        TableFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            for (i, row) in reader.deserialize::<DeviceRow>().enumerate() {
                let row = row.map_err(|e| Error::Schema {
                    row: i,
                    field: missing_field(&e.to_string()),
                    message: e.to_string(),
                })?;
                let record = into_record(row, i, &mut table.warnings)?;
                table.records.push(record);
            }
        }
    }
    if table.records.is_empty() {
        table.warnings.push("device table is empty".into());
    }
    Ok(table)
}

/// Best-effort field name from a serde error message.
fn missing_field(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "?".to_string())
}

pub fn load_device_table(path: &Path) -> Result<DeviceTable> {
    let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    parse_device_table(&text, if is_csv { TableFormat::Csv } else { TableFormat::Json })
}

/// The table of 18 devices shipped with the crate.
///
/// Five rows carry a tabulated `Qi * f0` that is off by more than 1% from the
/// product of the other two columns; those warnings are kept but not logged.
pub fn bundled_device_table() -> DeviceTable {
    parse_quietly(BUNDLED_TABLE, TableFormat::Json).expect("bundled device table is valid")
}
