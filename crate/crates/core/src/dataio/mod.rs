//! File formats: complex traces (Touchstone `.s1p`, CSV), the device table
//! and report documents.

mod report;
mod table;
mod trace;

pub use report::{
    write_report, write_report_to, FitRecord, PlotPoint, ReportFormat, ReportRecord, REPORT_SCHEMA_VERSION,
};
pub use table::{load_device_table, parse_device_table, bundled_device_table, DeviceRecord, DeviceTable, TableFormat};
pub use trace::{
    parse_csv_trace, parse_touchstone, read_trace, render_csv_trace, render_touchstone, write_trace, TraceFormat,
};
