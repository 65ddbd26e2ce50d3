use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sawres::dataio::{
    bundled_device_table, load_device_table, read_trace, write_report, write_trace, DeviceRecord, DeviceTable,
    FitRecord, PlotPoint, ReportFormat, TraceFormat,
};
use sawres::fitting::{bootstrap_sigma, fit_multimode, fit_resonance, FitConfig};
use sawres::geometry::{derive_params, grating_q, mode_frequencies, DerivedParams, DeviceGeometry, MaterialParams, ModeWindow};
use sawres::loss::{
    dbm_to_watts, fit_powerlaw, fit_rs_alpha, fit_tls, tls_qi, CavityPoint, TlsContext, TlsPoint,
};
use sawres::response::{linear_grid, synth_trace, BackgroundModel, ModeParams, TraceMeta};
use sawres::Error;

/// Seed used by every randomized operation unless `--seed` is given.
const DEFAULT_SEED: u64 = 1729;

#[derive(Parser)]
#[command(name = "sawres", version, about = "Design, simulate and characterize SAW Fabry-Perot resonators")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Material JSON (v_m_per_s, rho_kg_per_m3, rs_mag, temperature_k). Defaults to ST-X quartz at 10 mK.
    #[arg(long, global = true, value_name = "FILE")]
    material: Option<PathBuf>,
    /// Seed for noise and resampling.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output file. Reports go to stdout when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Derived cavity quantities and mode count for one geometry.
    Design(DesignArgs),
    /// Synthesize a reflection trace.
    Synth(SynthArgs),
    /// Fit a single resonance.
    Fit(FitArgs),
    /// Detect and fit every resonance in a trace.
    FitMultimode(MultimodeArgs),
    /// Extract loss parameters from a device series or a power sweep.
    #[command(subcommand)]
    Extract(ExtractCommand),
    /// Print the device table.
    Table(TableArgs),
}

#[derive(Args)]
struct DeviceSource {
    /// Device name from the table (e.g. p1, r6, q7).
    #[arg(long, conflicts_with = "geometry")]
    device: Option<String>,
    /// Geometry JSON (a_m, aperture_m, nt, ng, m_half_waves, film_thickness_m).
    #[arg(long, value_name = "FILE")]
    geometry: Option<PathBuf>,
    /// Device table (JSON or CSV). Defaults to the bundled table.
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    source: DeviceSource,
    /// Mode window: default, stopband, idt or LO:HI in Hz.
    #[arg(long, default_value = "default")]
    window: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Comb of a table device (measured Qi, Qe) in the chosen window.
    #[arg(long, conflicts_with_all = ["f0", "modes"])]
    device: Option<String>,
    /// Device table used with --device.
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Mode window for --device: default, stopband, idt or LO:HI in Hz.
    #[arg(long, default_value = "default")]
    window: String,
    /// Single mode: resonance frequency (Hz).
    #[arg(long, requires_all = ["qi", "qe"])]
    f0: Option<f64>,
    #[arg(long)]
    qi: Option<f64>,
    #[arg(long)]
    qe: Option<f64>,
    /// JSON array of {f0, qi, qe}.
    #[arg(long, value_name = "FILE")]
    modes: Option<PathBuf>,
    /// Grid start (Hz). Defaults to 10 linewidths below the lowest mode.
    #[arg(long)]
    start: Option<f64>,
    /// Grid stop (Hz).
    #[arg(long)]
    stop: Option<f64>,
    /// Grid points. Defaults to 20 points per narrowest linewidth, at least 2001.
    #[arg(long)]
    points: Option<usize>,
    /// Complex noise standard deviation, E|n|^2 = sigma^2.
    #[arg(long, default_value_t = 0.0, conflicts_with = "snr_db")]
    noise: f64,
    /// Noise given as SNR relative to the background level (dB).
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    amp0: f64,
    /// Magnitude slope (1/Hz).
    #[arg(long, default_value_t = 0.0)]
    amp_slope: f64,
    /// Phase offset (rad).
    #[arg(long, default_value_t = 0.0)]
    phase0: f64,
    /// Cable delay (s).
    #[arg(long, default_value_t = 0.0)]
    delay: f64,
    /// Trace format; inferred from --out when omitted, CSV on stdout.
    #[arg(long, value_enum)]
    trace_format: Option<TraceKind>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceKind {
    S1p,
    Csv,
}

#[derive(Args)]
struct FitOpts {
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Relative step tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
}

impl FitOpts {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_iter: self.max_iter,
            rel_tolerance: self.tolerance,
            ..FitConfig::default()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Trace file (.s1p or .csv).
    input: PathBuf,
    #[command(flatten)]
    opts: FitOpts,
    /// Replace the linearised Qi/Qe errors by a residual bootstrap with N resamples.
    #[arg(long, value_name = "N")]
    bootstrap: Option<usize>,
}

#[derive(Args)]
struct MultimodeArgs {
    input: PathBuf,
    #[command(flatten)]
    opts: FitOpts,
    /// Half-width of each fit window in linewidths.
    #[arg(long, default_value_t = 10.0)]
    window_linewidths: f64,
    /// Minimum dip prominence in noise standard deviations.
    #[arg(long, default_value_t = 5.0)]
    min_prominence: f64,
}

#[derive(Subcommand)]
enum ExtractCommand {
    /// Mirror reflectivity and propagation loss from a cavity-length series.
    RsAlpha(SeriesArgs),
    /// Qi = c1 (f/GHz)^-c2 over a set of devices.
    Powerlaw(PowerlawArgs),
    /// TLS saturation parameters from a power sweep.
    Tls(TlsArgs),
}

#[derive(Args)]
struct SeriesArgs {
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Name prefix of the series.
    #[arg(long, default_value = "r")]
    series: String,
    /// CSV of (x = d in m, y = Qi, y_fit).
    #[arg(long, value_name = "FILE")]
    plot_data: Option<PathBuf>,
}

#[derive(Args)]
struct PowerlawArgs {
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Comma-separated device names.
    #[arg(long, value_delimiter = ',', default_value = "q1,q2,q3,q4,q5,q6,q7,r6")]
    devices: Vec<String>,
    /// CSV of (x = f0 in Hz, y = Qi, y_fit).
    #[arg(long, value_name = "FILE")]
    plot_data: Option<PathBuf>,
}

#[derive(Args)]
struct TlsArgs {
    /// CSV with columns p_dbm, qi (power at the instrument).
    input: PathBuf,
    /// Line attenuation from instrument to sample (dB).
    #[arg(long)]
    attenuation_db: f64,
    /// Mode frequency (Hz).
    #[arg(long)]
    f0: f64,
    /// CSV of (x = instrument power in dBm, y = Qi, y_fit).
    #[arg(long, value_name = "FILE")]
    plot_data: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
}

#[derive(Serialize)]
struct DesignRecord {
    name: String,
    #[serde(flatten)]
    derived: DerivedParams,
    window_lo_hz: f64,
    window_hi_hz: f64,
    mode_count: usize,
}

#[derive(Deserialize)]
struct PowerRow {
    p_dbm: f64,
    qi: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.to_string(), "kind": e.kind() });
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::NonConvergence { .. } => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> sawres::Result<()> {
    let g = &cli.global;
    let material = load_material(g.material.as_deref())?;
    match &cli.command {
        Command::Design(a) => design(a, &material, g),
        Command::Synth(a) => synth(a, &material, g),
        Command::Fit(a) => fit(a, g),
        Command::FitMultimode(a) => multimode(a, g),
        Command::Extract(ExtractCommand::RsAlpha(a)) => rs_alpha(a, &material, g),
        Command::Extract(ExtractCommand::Powerlaw(a)) => powerlaw(a, g),
        Command::Extract(ExtractCommand::Tls(a)) => tls(a, &material, g),
        Command::Table(a) => table(a, g),
    }
}

fn read_file(path: &Path) -> sawres::Result<String> {
    fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })
}

fn load_material(path: Option<&Path>) -> sawres::Result<MaterialParams> {
    let mat = match path {
        Some(p) => serde_json::from_str(&read_file(p)?)?,
        None => MaterialParams::default(),
    };
    mat.validate()?;
    Ok(mat)
}

fn load_table(path: Option<&Path>) -> sawres::Result<DeviceTable> {
    match path {
        Some(p) => load_device_table(p),
        None => Ok(bundled_device_table()),
    }
}

fn lookup<'a>(table: &'a DeviceTable, name: &str) -> sawres::Result<&'a DeviceRecord> {
    table
        .get(name)
        .ok_or_else(|| Error::invalid("device", format!("no device named {name:?} in the table")))
}

fn parse_window(text: &str) -> sawres::Result<ModeWindow> {
    match text {
        "default" => Ok(ModeWindow::Default),
        "stopband" => Ok(ModeWindow::FirstStopband),
        "idt" => Ok(ModeWindow::IdtBandwidth),
        other => {
            let bad = || Error::invalid("window", format!("expected default, stopband, idt or LO:HI, got {other:?}"));
            let (lo, hi) = other.split_once(':').ok_or_else(bad)?;
            let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(bad());
            }
            Ok(ModeWindow::Explicit { lo, hi })
        }
    }
}

/// Writes a report to `--out`, or to stdout.
fn emit<R: Serialize>(g: &GlobalOpts, kind: &str, records: &[R]) -> sawres::Result<()> {
    let text = write_report(kind, records, g.format.into())?;
    match &g.out {
        Some(path) => fs::write(path, text).map_err(|source| Error::File { path: path.clone(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_plot(path: Option<&Path>, kind: &str, points: &[PlotPoint]) -> sawres::Result<()> {
    if let Some(path) = path {
        let text = write_report(kind, points, ReportFormat::Csv)?;
        fs::write(path, text).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    }
    Ok(())
}

fn design(a: &DesignArgs, mat: &MaterialParams, g: &GlobalOpts) -> sawres::Result<()> {
    let (name, geom) = match (&a.source.device, &a.source.geometry) {
        (_, Some(path)) => {
            let geom: DeviceGeometry = serde_json::from_str(&read_file(path)?)?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("geometry").to_string();
            (name, geom)
        }
        (Some(name), None) => {
            let table = load_table(a.source.table.as_deref())?;
            (name.clone(), lookup(&table, name)?.geometry)
        }
        (None, None) => return Err(Error::invalid("device", "give --device or --geometry")),
    };
    let derived = derive_params(&geom, mat)?;
    let window = parse_window(&a.window)?;
    let (lo, hi) = window.bounds(&derived);
    let modes = mode_frequencies(&derived, window);

    let rows = [
        ("lambda0 (m)", derived.lambda0_m),
        ("f0 (Hz)", derived.f0_hz),
        ("d (m)", derived.mirror_spacing_m),
        ("Lp (m)", derived.lp_m),
        ("Lc (m)", derived.lc_m),
        ("FSR (Hz)", derived.fsr_hz),
        ("R", derived.reflectivity),
        ("stopband (Hz)", derived.df_1sb_hz),
        ("IDT band (Hz)", derived.df_idt_hz),
        ("Qg", derived.qg),
        ("window lo (Hz)", lo),
        ("window hi (Hz)", hi),
    ];
    println!("{name}");
    for (label, v) in rows {
        println!("  {label:<16} {v:.6e}");
    }
    println!("  {:<16} {}", "modes", modes.len());

    let record = DesignRecord {
        name,
        derived,
        window_lo_hz: lo,
        window_hi_hz: hi,
        mode_count: modes.len(),
    };
    emit(g, "design", &[record])
}

fn synth(a: &SynthArgs, mat: &MaterialParams, g: &GlobalOpts) -> sawres::Result<()> {
    let modes: Vec<ModeParams> = if let Some(name) = &a.device {
        let table = load_table(a.table.as_deref())?;
        let rec = lookup(&table, name)?;
        let derived = derive_params(&rec.geometry, mat)?;
        mode_frequencies(&derived, parse_window(&a.window)?)
            .into_iter()
            .map(|f| ModeParams::new(f, rec.qi_meas, rec.qe_meas))
            .collect()
    } else if let Some(path) = &a.modes {
        serde_json::from_str(&read_file(path)?)?
    } else if let (Some(f0), Some(qi), Some(qe)) = (a.f0, a.qi, a.qe) {
        vec![ModeParams::new(f0, qi, qe)]
    } else {
        return Err(Error::invalid("modes", "give --device, --modes or --f0/--qi/--qe"));
    };
    if modes.is_empty() {
        return Err(Error::invalid("modes", "no modes to synthesize"));
    }
    for m in &modes {
        m.validate()?;
    }

    let lo_mode = modes.iter().min_by(|x, y| x.f0.total_cmp(&y.f0)).unwrap();
    let hi_mode = modes.iter().max_by(|x, y| x.f0.total_cmp(&y.f0)).unwrap();
    let narrowest = modes.iter().map(|m| m.linewidth()).fold(f64::INFINITY, f64::min);
    let start = a.start.unwrap_or(lo_mode.f0 - 10.0 * lo_mode.linewidth());
    let stop = a.stop.unwrap_or(hi_mode.f0 + 10.0 * hi_mode.linewidth());
    let points = a
        .points
        .unwrap_or_else(|| (((stop - start) / narrowest * 20.0).ceil() as usize + 1).max(2001));
    let grid = linear_grid(start, stop, points)?;

    let bg = BackgroundModel {
        amp0: a.amp0,
        amp_slope: a.amp_slope,
        phase0: a.phase0,
        delay: a.delay,
        f_ref: 0.5 * (start + stop),
    };
    let sigma = match a.snr_db {
        Some(snr) => a.amp0 * 10f64.powf(-snr / 20.0),
        None => a.noise,
    };
    let mut trace = synth_trace(&modes, &bg, &grid, sigma, g.seed)?;
    trace.meta = TraceMeta { temperature_k: Some(mat.temperature), ..TraceMeta::default() };
    log::info!("{} modes on {} points, noise sigma {sigma:e}", modes.len(), points);

    let format = match (a.trace_format, &g.out) {
        (Some(TraceKind::S1p), _) => TraceFormat::TouchstoneS1p,
        (Some(TraceKind::Csv), _) => TraceFormat::Csv,
        (None, Some(path)) => TraceFormat::from_path(path).unwrap_or(TraceFormat::Csv),
        (None, None) => TraceFormat::Csv,
    };
    match &g.out {
        Some(path) => write_trace(path, &trace, format),
        None => {
            let text = match format {
                TraceFormat::TouchstoneS1p => sawres::dataio::render_touchstone(&trace),
                TraceFormat::Csv => sawres::dataio::render_csv_trace(&trace),
            };
            print!("{text}");
            Ok(())
        }
    }
}

fn load_trace(path: &Path) -> sawres::Result<sawres::ComplexTrace> {
    let format = TraceFormat::from_path(path).ok_or_else(|| {
        Error::Unsupported(format!("{}: unknown trace extension, use .s1p or .csv", path.display()))
    })?;
    read_trace(path, format)
}

fn fit(a: &FitArgs, g: &GlobalOpts) -> sawres::Result<()> {
    let trace = load_trace(&a.input)?;
    let config = a.opts.config();
    let result = fit_resonance(&trace, &config, None)?;
    if !result.converged {
        return Err(Error::NonConvergence { iterations: result.n_iter });
    }
    let mut record = FitRecord::from(&result);
    if let Some(n) = a.bootstrap {
        let (_, qi_sd, qe_sd) = bootstrap_sigma(&trace, &result, &config, n, g.seed)?;
        record.qi_sigma = qi_sd;
        record.qe_sigma = qe_sd;
    }
    log::info!("converged in {} iterations", result.n_iter);
    emit(g, "fit", &[record])
}

fn multimode(a: &MultimodeArgs, g: &GlobalOpts) -> sawres::Result<()> {
    let trace = load_trace(&a.input)?;
    let config = FitConfig {
        window_linewidths: a.window_linewidths,
        min_prominence_sigma: a.min_prominence,
        ..a.opts.config()
    };
    let fits = fit_multimode(&trace, &config)?;
    if let Some(bad) = fits.iter().find(|f| !f.converged) {
        return Err(Error::NonConvergence { iterations: bad.n_iter });
    }
    let records: Vec<FitRecord> = fits.iter().map(FitRecord::from).collect();
    log::info!("{} modes fitted", records.len());
    emit(g, "fit_multimode", &records)
}

fn rs_alpha(a: &SeriesArgs, mat: &MaterialParams, g: &GlobalOpts) -> sawres::Result<()> {
    let table = load_table(a.table.as_deref())?;
    let series = table.series(&a.series);
    let Some(first) = series.first() else {
        return Err(Error::InsufficientData(format!("no devices named {}*", a.series)));
    };
    let template = first.geometry;
    let points: Vec<CavityPoint> = series
        .iter()
        .map(|r| CavityPoint { d_m: r.geometry.mirror_spacing(), f0_hz: r.f0_meas, qi: r.qi_meas })
        .collect();
    let fit = fit_rs_alpha(&points, &template, mat)?;

    let plot: Vec<PlotPoint> = points
        .iter()
        .map(|p| {
            let lambda0 = template.wavelength();
            let lc = p.d_m + 2.0 * template.a_m / fit.rs_mag;
            let inv = 1.0 / grating_q(lc, lambda0, fit.rs_mag, template.ng)
                + mat.v * fit.alpha_p / (std::f64::consts::PI * p.f0_hz);
            PlotPoint { x: p.d_m, y: p.qi, y_fit: 1.0 / inv }
        })
        .collect();
    write_plot(a.plot_data.as_deref(), "rs_alpha_plot", &plot)?;
    emit(g, "rs_alpha", &[fit])
}

fn powerlaw(a: &PowerlawArgs, g: &GlobalOpts) -> sawres::Result<()> {
    let table = load_table(a.table.as_deref())?;
    let mut points = Vec::with_capacity(a.devices.len());
    for name in &a.devices {
        let r = lookup(&table, name.trim())?;
        points.push((r.f0_meas, r.qi_meas));
    }
    let fit = fit_powerlaw(&points)?;
    let plot: Vec<PlotPoint> = points
        .iter()
        .map(|&(f, q)| PlotPoint { x: f, y: q, y_fit: fit.law.eval(f) })
        .collect();
    write_plot(a.plot_data.as_deref(), "powerlaw_plot", &plot)?;
    emit(g, "powerlaw", &[fit])
}

fn tls(a: &TlsArgs, mat: &MaterialParams, g: &GlobalOpts) -> sawres::Result<()> {
    let text = read_file(&a.input)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    for (i, row) in reader.deserialize::<PowerRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse { line: e.position().map_or(i + 2, |p| p.line() as usize), message: e.to_string() })?;
        points.push(TlsPoint { p_dbm_at_instrument: row.p_dbm, qi: row.qi });
    }
    let ctx = TlsContext { rho: mat.rho, v: mat.v, f0: a.f0, temperature: mat.temperature };
    let fit = fit_tls(&points, a.attenuation_db, ctx)?;

    let plot = points
        .iter()
        .map(|p| {
            let q = tls_qi(dbm_to_watts(p.p_dbm_at_instrument - a.attenuation_db), &fit.params)?;
            Ok(PlotPoint { x: p.p_dbm_at_instrument, y: p.qi, y_fit: q })
        })
        .collect::<sawres::Result<Vec<_>>>()?;
    write_plot(a.plot_data.as_deref(), "tls_plot", &plot)?;
    emit(g, "tls", &[fit])
}

/// Orders `r2` before `r10`.
fn natural_key(name: &str) -> (String, u64, String) {
    let split = name.find(|c: char| c.is_ascii_digit()).unwrap_or(name.len());
    let (prefix, rest) = name.split_at(split);
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let tail = rest[digits.len()..].to_string();
    (prefix.to_string(), digits.parse().unwrap_or(0), tail)
}

fn table(a: &TableArgs, g: &GlobalOpts) -> sawres::Result<()> {
    let table = load_table(a.table.as_deref())?;
    let mut records = table.records.clone();
    records.sort_by_key(|r| natural_key(&r.name));
    emit(g, "device_table", &records)
}
