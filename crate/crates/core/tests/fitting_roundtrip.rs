use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sawres::dataio::bundled_device_table;
use sawres::fitting::{fit_multimode, fit_resonance, mean_central_qi, FitConfig};
use sawres::geometry::{derive_params, mode_frequencies, MaterialParams, ModeWindow};
use sawres::response::{linear_grid, synth_trace, BackgroundModel, ComplexTrace, ModeParams};

fn single(mode: &ModeParams, bg: &BackgroundModel, noise: f64, seed: u64) -> ComplexTrace {
    let lw = mode.linewidth();
    let grid = linear_grid(mode.f0 - 10.0 * lw, mode.f0 + 10.0 * lw, 2001).unwrap();
    synth_trace(&[*mode], bg, &grid, noise, seed).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b
}

#[test]
fn p1_with_background_and_noise() {
    let truth = ModeParams::new(0.52e9, 4.53e5, 1.16e5);
    let bg = BackgroundModel { amp0: 0.6, amp_slope: 2e-6, phase0: -1.1, delay: 35e-9, f_ref: truth.f0 };
    let fit = fit_resonance(&single(&truth, &bg, 1e-3, 11), &FitConfig::default(), None).unwrap();
    assert!(fit.converged);
    assert!(rel(fit.mode.qi, truth.qi) < 0.01, "qi {}", fit.mode.qi);
    assert!(rel(fit.mode.qe, truth.qe) < 0.01, "qe {}", fit.mode.qe);
    assert!((fit.mode.f0 - truth.f0).abs() < 0.01 * truth.linewidth());
    assert!(rel(fit.bg.rereferenced(truth.f0).amp0, 0.6) < 0.01);
}

#[test]
fn swapped_starting_guess_recovers() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let config = FitConfig::default();
    for k in 0..100 {
        let qi = 10f64.powf(rng.random_range(4.0..6.0));
        let qe = qi * 10f64.powf(rng.random_range(-1.0..1.0));
        let truth = ModeParams::new(rng.random_range(0.5e9..5e9), qi, qe);
        let bg = BackgroundModel { f_ref: truth.f0, phase0: rng.random_range(-3.0..3.0), ..BackgroundModel::unit() };
        let trace = single(&truth, &bg, 1e-3, 300 + k);
        let swapped = ModeParams::new(truth.f0, truth.qe, truth.qi);
        let fit = fit_resonance(&trace, &config, Some((swapped, bg))).unwrap();
        assert!(rel(fit.mode.qi, qi) < 0.02, "case {k}: qi {} vs {qi}", fit.mode.qi);
        assert!(rel(fit.mode.qe, qe) < 0.02, "case {k}: qe {} vs {qe}", fit.mode.qe);
    }
}

#[test]
fn error_bars_cover_the_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let config = FitConfig::default();
    let mut covered = 0;
    let mut qi_err = Vec::new();
    let n = 200;
    for k in 0..n {
        let qi = 10f64.powf(rng.random_range(4.0..6.0));
        let qe = qi * 10f64.powf(rng.random_range(-0.5..0.5));
        let truth = ModeParams::new(rng.random_range(1e9..4e9), qi, qe);
        let bg = BackgroundModel { f_ref: truth.f0, ..BackgroundModel::unit() };
        let fit = fit_resonance(&single(&truth, &bg, 0.02, 900 + k), &config, None).unwrap();
        if (fit.mode.qi - qi).abs() <= fit.sigma.qi {
            covered += 1;
        }
        qi_err.push(rel(fit.mode.qi, qi));
    }
    qi_err.sort_by(f64::total_cmp);
    assert!(qi_err[n as usize / 2] < 0.02, "median {}", qi_err[n as usize / 2]);
    // a correct 1-sigma band covers about 68%
    assert!(covered as f64 / n as f64 >= 0.6, "coverage {covered}/{n}");
}

#[test]
fn global_scale_and_phase_leave_q_unchanged() {
    let truth = ModeParams::new(3.09e9, 7.47e4, 6.57e5);
    let bg = BackgroundModel { f_ref: truth.f0, ..BackgroundModel::unit() };
    let trace = single(&truth, &bg, 5e-4, 4);
    let config = FitConfig::default();
    let a = fit_resonance(&trace, &config, None).unwrap();
    let b = fit_resonance(&trace.scaled(Complex64::from_polar(0.37, 2.1)), &config, None).unwrap();
    assert!(rel(b.mode.qi, a.mode.qi) < 1e-6);
    assert!(rel(b.mode.qe, a.mode.qe) < 1e-6);
    assert!((b.mode.f0 - a.mode.f0).abs() < 1e-6 * truth.linewidth());
}

#[test]
fn central_modes_of_an_r6_comb() {
    let table = bundled_device_table();
    let r6 = table.get("r6").unwrap();
    let derived = derive_params(&r6.geometry, &MaterialParams::ST_X_QUARTZ).unwrap();
    let span = 9.0 * derived.fsr_hz;
    let window = ModeWindow::Explicit { lo: derived.f0_hz - span / 2.0, hi: derived.f0_hz + span / 2.0 };
    let modes: Vec<ModeParams> = mode_frequencies(&derived, window)
        .into_iter()
        .map(|f| ModeParams::new(f, r6.qi_meas, r6.qe_meas))
        .collect();
    assert_eq!(modes.len(), 9);
    let grid = linear_grid(derived.f0_hz - span / 2.0 - 1e6, derived.f0_hz + span / 2.0 + 1e6, 40_001).unwrap();
    let trace = synth_trace(&modes, &BackgroundModel::unit(), &grid, 1e-3, 8).unwrap();
    let fits = fit_multimode(&trace, &FitConfig::default()).unwrap();
    assert_eq!(fits.len(), 9);
    let mean = mean_central_qi(&fits, derived.f0_hz, 5).unwrap();
    assert!(rel(mean, r6.qi_meas) < 0.01, "mean {mean}");
}

#[test]
fn linewidth_matches_loaded_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..20 {
        let qi = 10f64.powf(rng.random_range(4.0..6.0));
        let truth = ModeParams::new(2e9, qi, qi * rng.random_range(0.5..2.0));
        let bg = BackgroundModel { f_ref: truth.f0, ..BackgroundModel::unit() };
        let fit = fit_resonance(&single(&truth, &bg, 1e-4, k), &FitConfig::default(), None).unwrap();
        assert!(rel(fit.mode.linewidth(), truth.f0 / truth.loaded_q()) < 0.01);
    }
}
