use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::response::{ComplexTrace, TraceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    TouchstoneS1p,
    Csv,
}

impl TraceFormat {
    /// Format implied by a file extension (`.s1p`/`.sNp` or `.csv`).
    pub fn from_path(path: &Path) -> Option<TraceFormat> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        if ext == "csv" {
            Some(TraceFormat::Csv)
        } else if ext.starts_with('s') && ext.ends_with('p') {
            Some(TraceFormat::TouchstoneS1p)
        } else {
            None
        }
    }
}

pub fn read_trace(path: &Path, format: TraceFormat) -> Result<ComplexTrace> {
    if format == TraceFormat::TouchstoneS1p {
        if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
            let ext = ext.to_ascii_lowercase();
            if ext.starts_with('s') && ext.ends_with('p') && ext != "s1p" {
                return Err(Error::Unsupported(format!(
                    "{}: only one-port (.s1p) files are supported",
                    path.display()
                )));
            }
        }
    }
    let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    match format {
        TraceFormat::TouchstoneS1p => parse_touchstone(&text),
        TraceFormat::Csv => parse_csv_trace(&text),
    }
}

pub fn write_trace(path: &Path, trace: &ComplexTrace, format: TraceFormat) -> Result<()> {
    let text = match format {
        TraceFormat::TouchstoneS1p => render_touchstone(trace),
        TraceFormat::Csv => render_csv_trace(trace),
    };
    fs::write(path, text).map_err(|source| Error::File { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, Copy)]
enum NumberFormat {
    Ri,
    Ma,
    Db,
}

fn parse_number(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("`{token}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value `{token}`") });
    }
    Ok(v)
}

fn check_increasing(freqs: &[f64], f: f64, line: usize) -> Result<()> {
    match freqs.last() {
        Some(&prev) if f <= prev => Err(Error::NonMonotone { line }),
        _ => Ok(()),
    }
}

/// Parses a Touchstone v1 one-port file.
pub fn parse_touchstone(text: &str) -> Result<ComplexTrace> {
    let mut scale = 1e9;
    let mut format = NumberFormat::Ma;
    let mut seen_options = false;
    let mut freqs = Vec::new();
    let mut s11 = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('!').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            return Err(Error::Unsupported(format!(
                "line {line}: Touchstone v2 keyword `{content}`"
            )));
        }
        if let Some(options) = content.strip_prefix('#') {
            if seen_options {
                continue;
            }
            seen_options = true;
            let mut tokens = options.split_whitespace();
            while let Some(tok) = tokens.next() {
                match tok.to_ascii_uppercase().as_str() {
                    "HZ" => scale = 1.0,
                    "KHZ" => scale = 1e3,
                    "MHZ" => scale = 1e6,
                    "GHZ" => scale = 1e9,
                    "S" => {}
                    "Y" | "Z" | "H" | "G" => {
                        return Err(Error::Unsupported(format!(
                            "line {line}: only S parameters are supported, got `{tok}`"
                        )))
                    }
                    "RI" => format = NumberFormat::Ri,
                    "MA" => format = NumberFormat::Ma,
                    "DB" => format = NumberFormat::Db,
                    "R" => {
                        // reference impedance is read and ignored
                        let z = tokens.next().ok_or_else(|| Error::Parse {
                            line,
                            message: "missing reference impedance after `R`".into(),
                        })?;
                        parse_number(z, line)?;
                    }
                    other => {
                        return Err(Error::Parse { line, message: format!("unknown option `{other}`") })
                    }
                }
            }
            continue;
        }

        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 3 {
            if tokens.len() > 3 && tokens.len() % 2 == 1 {
                return Err(Error::Unsupported(format!(
                    "line {line}: {} parameter pairs per frequency, only one-port data is supported",
                    (tokens.len() - 1) / 2
                )));
            }
            return Err(Error::Parse {
                line,
                message: format!("expected 3 values, found {}", tokens.len()),
            });
        }
        let f = parse_number(tokens[0], line)? * scale;
        let a = parse_number(tokens[1], line)?;
        let b = parse_number(tokens[2], line)?;
        check_increasing(&freqs, f, line)?;
        let z = match format {
            NumberFormat::Ri => Complex64::new(a, b),
            NumberFormat::Ma => Complex64::from_polar(a, b.to_radians()),
            NumberFormat::Db => Complex64::from_polar(10f64.powf(a / 20.0), b.to_radians()),
        };
        freqs.push(f);
        s11.push(z);
    }
    ComplexTrace::new(freqs, s11, TraceMeta::default())
}

#[derive(Deserialize)]
struct CsvRow {
    freq_hz: f64,
    re: f64,
    im: f64,
}

/// Parses CSV with header `freq_hz,re,im`; lines starting with `#` are skipped.
pub fn parse_csv_trace(text: &str) -> Result<ComplexTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["freq_hz", "re", "im"] {
        let line = reader.position().line().max(1) as usize;
        return Err(Error::Parse {
            line,
            message: format!("expected header `freq_hz,re,im`, found `{}`", names.join(",")),
        });
    }

    let mut freqs = Vec::new();
    let mut s11 = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        for v in [row.freq_hz, row.re, row.im] {
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value {v}") });
            }
        }
        check_increasing(&freqs, row.freq_hz, line)?;
        freqs.push(row.freq_hz);
        s11.push(Complex64::new(row.re, row.im));
    }
    ComplexTrace::new(freqs, s11, TraceMeta::default())
}

pub fn render_csv_trace(trace: &ComplexTrace) -> String {
    let mut out = String::from("freq_hz,re,im\n");
    for (f, z) in trace.freqs().iter().zip(trace.s11()) {
        out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", f, z.re, z.im));
    }
    out
}

pub fn render_touchstone(trace: &ComplexTrace) -> String {
    let mut out = String::from("! one-port reflection, real/imaginary\n# Hz S RI R 50\n");
    for (f, z) in trace.freqs().iter().zip(trace.s11()) {
        out.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", f, z.re, z.im));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_point_ri_file() {
        let text = "! test\n# Hz S RI R 50\n1e9 0.5 -0.25\n2e9 1 0 ! trailing\n\n3e9 -1 1e-3\n";
        let t = parse_touchstone(text).unwrap();
        assert_eq!(t.freqs(), &[1e9, 2e9, 3e9]);
        assert_eq!(t.s11(), &[Complex64::new(0.5, -0.25), Complex64::new(1.0, 0.0), Complex64::new(-1.0, 1e-3)]);
    }

    #[test]
    fn magnitude_angle_file() {
        let text = "# MHz S MA R 50\n100 1 0\n200 1 0\n";
        let t = parse_touchstone(text).unwrap();
        assert_eq!(t.freqs(), &[100e6, 200e6]);
        assert!(t.s11().iter().all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn db_format_and_default_options() {
        let t = parse_touchstone("# kHz DB\n1 -20 90\n2 0 180\n").unwrap();
        assert!((t.s11()[0] - Complex64::new(0.0, 0.1)).norm() < 1e-15);
        assert!((t.s11()[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
        // GHz and MA are the defaults without an option line
        let t = parse_touchstone("1 0.5 0\n2 0.5 0\n").unwrap();
        assert_eq!(t.freqs(), &[1e9, 2e9]);
    }

    #[test]
    fn touchstone_errors() {
        match parse_touchstone("# Hz S RI R 50\n1 0 0\n2 x 0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_touchstone("# Hz S RI R 50\n2 0 0\n1 0 0\n"),
            Err(Error::NonMonotone { line: 3 })
        ));
        assert!(matches!(
            parse_touchstone("# Hz S RI R 50\n1 0 0 0 0 0 0 0 0\n"),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(parse_touchstone("# Hz Z RI R 50\n1 0 0\n"), Err(Error::Unsupported(_))));
        assert!(matches!(parse_touchstone("[Version] 2.0\n"), Err(Error::Unsupported(_))));
        assert!(matches!(parse_touchstone("# Hz S RI\n1 nan 0\n2 0 0\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn csv_trace() {
        let text = "# comment\nfreq_hz,re,im\n1e9,0.5,0.1\n# another\n2e9,0.25,-0.1\n";
        let t = parse_csv_trace(text).unwrap();
        assert_eq!(t.freqs(), &[1e9, 2e9]);
        assert_eq!(t.s11()[1], Complex64::new(0.25, -0.1));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match parse_csv_trace("freq_hz,re,im\n1,0,0\n2,zz,0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv_trace("freq_hz,re,im\n2,0,0\n1,0,0\n"), Err(Error::NonMonotone { line: 3 })));
        assert!(matches!(parse_csv_trace("f,re,im\n1,0,0\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_csv_trace("freq_hz,re,im\n1,inf,0\n2,0,0\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn s2p_extension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.s2p");
        std::fs::write(&path, "# Hz S RI\n1 0 0\n").unwrap();
        assert!(matches!(read_trace(&path, TraceFormat::TouchstoneS1p), Err(Error::Unsupported(_))));
        assert!(matches!(read_trace(&dir.path().join("missing.csv"), TraceFormat::Csv), Err(Error::File { .. })));
    }

    fn trace_strategy() -> impl Strategy<Value = ComplexTrace> {
        (2usize..40, 1.0..1e10f64).prop_flat_map(|(n, f0)| {
            (
                proptest::collection::vec(1e-6..1e3f64, n),
                proptest::collection::vec((-1e3..1e3f64, -1e3..1e3f64), n),
            )
                .prop_map(move |(steps, vals)| {
                    let mut f = f0;
                    let freqs = steps
                        .iter()
                        .map(|s| {
                            f += s;
                            f
                        })
                        .collect();
                    let s11 = vals.into_iter().map(|(a, b)| Complex64::new(a, b)).collect();
                    ComplexTrace::new(freqs, s11, TraceMeta::default()).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(t in trace_strategy()) {
            prop_assert_eq!(&parse_csv_trace(&render_csv_trace(&t)).unwrap(), &t);
            prop_assert_eq!(&parse_touchstone(&render_touchstone(&t)).unwrap(), &t);
        }
    }
}
