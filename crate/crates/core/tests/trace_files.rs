use std::fs;

use num_complex::Complex64;

use sawres::dataio::{read_trace, write_trace, TraceFormat};
use sawres::response::{linear_grid, synth_trace, BackgroundModel, ModeParams};
use sawres::Error;

#[test]
fn synthesized_trace_survives_both_formats() {
    let mode = ModeParams::new(0.52e9, 4.53e5, 1.16e5);
    let grid = linear_grid(mode.f0 - 20e3, mode.f0 + 20e3, 501).unwrap();
    let bg = BackgroundModel { amp0: 0.9, amp_slope: 0.0, phase0: 0.3, delay: 10e-9, f_ref: mode.f0 };
    let trace = synth_trace(&[mode], &bg, &grid, 1e-3, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("t.s1p", TraceFormat::TouchstoneS1p), ("t.csv", TraceFormat::Csv)] {
        let path = dir.path().join(name);
        write_trace(&path, &trace, format).unwrap();
        let back = read_trace(&path, format).unwrap();
        assert_eq!(back.freqs(), trace.freqs());
        assert_eq!(back.s11(), trace.s11());
    }
}

#[test]
fn magnitude_angle_file_in_megahertz() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ma.s1p");
    fs::write(&path, "! vna export\n# MHz S MA R 50\n100 1 0\n101 1 0\n102 1 0\n").unwrap();
    let t = read_trace(&path, TraceFormat::TouchstoneS1p).unwrap();
    assert_eq!(t.freqs(), &[100e6, 101e6, 102e6]);
    assert!(t.s11().iter().all(|z| *z == Complex64::new(1.0, 0.0)));
}

#[test]
fn missing_and_multiport_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.s1p");
    match read_trace(&missing, TraceFormat::TouchstoneS1p) {
        Err(e @ Error::File { .. }) => assert!(e.to_string().contains("absent.s1p")),
        other => panic!("{other:?}"),
    }
    let two_port = dir.path().join("x.s2p");
    fs::write(&two_port, "# GHz S RI R 50\n1 0 0 0 0 0 0 0 0\n").unwrap();
    assert!(matches!(read_trace(&two_port, TraceFormat::TouchstoneS1p), Err(Error::Unsupported(_))));
}
