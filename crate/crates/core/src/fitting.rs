//! Nonlinear least-squares extraction of resonance parameters from complex
//! reflection traces.
//!
//! The fitted model is `bg(f) * s11(f; f0, Qi, Qe)` with complex residuals, so
//! phase information fixes which of `Qi`, `Qe` is the larger one. Internally
//! the fit runs on normalised parameters
//!
//! | index | parameter                          |
//! |-------|------------------------------------|
//! | 0     | `(f0 - f_ref) / w`                 |
//! | 1     | `ln Qi`                            |
//! | 2     | `ln Qe`                            |
//! | 3     | `amp0`                             |
//! | 4     | `amp_slope * w`                    |
//! | 5     | `phase0`                           |
//! | 6     | `2 pi delay w`                     |
//!
//! where `f_ref` and `w` are the centre and half-span of the fitted window.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, LeastSquaresProblem, LmConfig};
use crate::response::{BackgroundModel, ComplexTrace, ModeParams};

pub const N_PARAMS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Relative parameter step at which the fit is considered converged.
    pub rel_tolerance: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Half-width of each per-mode window, in loaded linewidths.
    pub window_linewidths: f64,
    /// Minimum dip prominence for multimode detection, in noise standard deviations.
    pub min_prominence_sigma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tolerance: 1e-10,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            window_linewidths: 10.0,
            min_prominence_sigma: 5.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        for (name, v) in [
            ("rel_tolerance", self.rel_tolerance),
            ("lambda_init", self.lambda_init),
            ("window_linewidths", self.window_linewidths),
            ("min_prominence_sigma", self.min_prominence_sigma),
        ] {
            crate::error::require_positive(name, v)?;
        }
        if !(self.lambda_up > 1.0) {
            return Err(Error::invalid("lambda_up", "must exceed 1"));
        }
        if !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::invalid("lambda_down", "must lie in (0, 1)"));
        }
        Ok(())
    }

    fn lm(&self) -> LmConfig {
        LmConfig {
            max_iter: self.max_iter,
            xtol: self.rel_tolerance,
            lambda_init: self.lambda_init,
            lambda_up: self.lambda_up,
            lambda_down: self.lambda_down,
            ..LmConfig::default()
        }
    }
}

/// One-standard-error uncertainties in physical units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSigma {
    pub f0: f64,
    pub qi: f64,
    pub qe: f64,
    pub amp0: f64,
    pub amp_slope: f64,
    pub phase0: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub mode: ModeParams,
    pub bg: BackgroundModel,
    pub sigma: FitSigma,
    /// RMS of the complex residual `|model - data|`.
    pub residual_norm: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub cost_history: Vec<f64>,
    /// Set by [`fit_multimode`] when this mode's window overlaps a neighbour's.
    pub overlaps_neighbor: bool,
}

/// Resonance-plus-background model bound to one trace.
pub struct ResonanceModel<'a> {
    freqs: &'a [f64],
    data: &'a [Complex64],
    f_ref: f64,
    half_span: f64,
}

impl<'a> ResonanceModel<'a> {
    pub fn new(trace: &'a ComplexTrace) -> Self {
        let freqs = trace.freqs();
        let (lo, hi) = (freqs[0], freqs[freqs.len() - 1]);
        Self {
            freqs,
            data: trace.s11(),
            f_ref: 0.5 * (lo + hi),
            half_span: 0.5 * (hi - lo),
        }
    }

    pub fn f_ref(&self) -> f64 {
        self.f_ref
    }

    pub fn encode(&self, mode: &ModeParams, bg: &BackgroundModel) -> DVector<f64> {
        let bg = bg.rereferenced(self.f_ref);
        let w = self.half_span;
        DVector::from_vec(vec![
            (mode.f0 - self.f_ref) / w,
            mode.qi.ln(),
            mode.qe.ln(),
            bg.amp0,
            bg.amp_slope * w,
            bg.phase0,
            2.0 * PI * bg.delay * w,
        ])
    }

    pub fn decode(&self, x: &DVector<f64>) -> (ModeParams, BackgroundModel) {
        let w = self.half_span;
        let mode = ModeParams::new(self.f_ref + x[0] * w, x[1].exp(), x[2].exp());
        let bg = BackgroundModel {
            amp0: x[3],
            amp_slope: x[4] / w,
            phase0: x[5],
            delay: x[6] / (2.0 * PI * w),
            f_ref: self.f_ref,
        };
        (mode, bg)
    }

    /// Model value at `f` and its gradient with respect to the normalised parameters.
    fn point(&self, f: f64, x: &DVector<f64>) -> (Complex64, [Complex64; N_PARAMS]) {
        let w = self.half_span;
        let u = (f - self.f_ref) / w;
        let qi = x[1].exp();
        let k = (x[1] - x[2]).exp();
        // detuning in window units avoids cancelling against f0 at the Hz level
        let c = Complex64::new(0.0, 2.0 * qi * (u - x[0]) * w / f);
        let num = Complex64::new(1.0 - k, 0.0) + c;
        let den = Complex64::new(1.0 + k, 0.0) + c;
        let s = num / den;
        let den2 = den * den;

        let rot = Complex64::from_polar(1.0, x[5] - x[6] * u);
        let mag = x[3] + x[4] * u;
        let bg = rot * mag;
        let model = bg * s;

        let ds_df0n = Complex64::new(0.0, -2.0 * qi * w / f) * (2.0 * k) / den2;
        let ds_lqi = Complex64::new(-2.0 * k, 0.0) / den2;
        let ds_lqe = (Complex64::new(1.0, 0.0) + c) * (2.0 * k) / den2;
        let i = Complex64::i();
        let grad = [
            bg * ds_df0n,
            bg * ds_lqi,
            bg * ds_lqe,
            rot * s,
            rot * s * u,
            i * model,
            -i * model * u,
        ];
        (model, grad)
    }

    pub fn eval(&self, f: f64, x: &DVector<f64>) -> Complex64 {
        self.point(f, x).0
    }
}

impl LeastSquaresProblem for ResonanceModel<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(2 * self.freqs.len());
        for (i, (&f, &z)) in self.freqs.iter().zip(self.data).enumerate() {
            let d = self.eval(f, x) - z;
            r[2 * i] = d.re;
            r[2 * i + 1] = d.im;
        }
        r
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.freqs.len(), N_PARAMS);
        for (i, &f) in self.freqs.iter().enumerate() {
            let (_, grad) = self.point(f, x);
            for (p, g) in grad.iter().enumerate() {
                j[(2 * i, p)] = g.re;
                j[(2 * i + 1, p)] = g.im;
            }
        }
        j
    }
}

/// Noise standard deviation from second differences, robust to a few dips.
///
/// For white complex noise of variance `s^2` the second difference has
/// variance `6 s^2` and a Rayleigh-distributed modulus with median
/// `s sqrt(6 ln 2)`.
pub fn estimate_noise(s11: &[Complex64]) -> f64 {
    if s11.len() < 3 {
        return 0.0;
    }
    let mut d2: Vec<f64> = s11
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).norm())
        .collect();
    let mid = d2.len() / 2;
    let (_, median, _) = d2.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *median / (6.0 * std::f64::consts::LN_2).sqrt()
}

fn smoothing_half_width(n: usize) -> usize {
    (n / 500).min(10)
}

fn moving_average<T>(values: &[T], half: usize) -> Vec<T>
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Div<f64, Output = T> + Default,
{
    if half == 0 {
        return values.to_vec();
    }
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let sum = values[lo..hi].iter().fold(T::default(), |acc, v| acc + *v);
            sum / (hi - lo) as f64
        })
        .collect()
}

fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Unwrapped phase of a short, smoothly varying block.
fn unwrapped_phase(block: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(block.len());
    let mut acc = block[0].arg();
    out.push(acc);
    for w in block.windows(2) {
        acc += (w[1] / w[0]).arg();
        out.push(acc);
    }
    out
}

fn background_guess(freqs: &[f64], s11: &[Complex64], f_ref: f64, half_span: f64) -> BackgroundModel {
    let n = freqs.len();
    let edge = (n / 10).max(3).min(n / 2).max(1);
    let left = 0..edge;
    let right = n - edge..n;

    let idx: Vec<usize> = left.clone().chain(right.clone()).collect();
    let xs: Vec<f64> = idx.iter().map(|&i| (freqs[i] - f_ref) / half_span).collect();
    let mags: Vec<f64> = idx.iter().map(|&i| s11[i].norm()).collect();
    let (mut amp0, mut slope_n) = linear_regression(&xs, &mags);
    if !(amp0 > 0.0) || (amp0 - slope_n.abs()) <= 0.0 {
        amp0 = mags.iter().sum::<f64>() / mags.len() as f64;
        slope_n = 0.0;
    }

    // Local phase slopes pick the 2 pi branch of the edge-to-edge secant; the
    // secant itself is insensitive to a full phase wrap through the resonance.
    let block_stats = |range: std::ops::Range<usize>| {
        let ph = unwrapped_phase(&s11[range.clone()]);
        let x: Vec<f64> = range.clone().map(|i| (freqs[i] - f_ref) / half_span).collect();
        let (_, slope) = linear_regression(&x, &ph);
        let mean_x = x.iter().sum::<f64>() / x.len() as f64;
        let mean_z: Complex64 = s11[range].iter().map(|z| z / z.norm().max(1e-300)).sum();
        (slope, mean_x, mean_z.arg())
    };
    let (sl, xl, pl) = block_stats(left);
    let (sr, xr, pr) = block_stats(right);
    let mut delay_n = 0.0;
    if xr > xl {
        let local = -0.5 * (sl + sr);
        let secant = wrap_phase(pr - pl);
        let dx = xr - xl;
        // choose secant + 2 pi m closest to the local-slope prediction of -delay_n dx
        let target = -local * dx;
        let m = ((target - secant) / (2.0 * PI)).round();
        delay_n = -(secant + 2.0 * PI * m) / dx;
    }

    let phase_sum: Complex64 = idx
        .iter()
        .zip(&xs)
        .map(|(&i, &x)| {
            let z = s11[i] / s11[i].norm().max(1e-300);
            z * Complex64::from_polar(1.0, delay_n * x)
        })
        .sum();

    BackgroundModel {
        amp0,
        amp_slope: slope_n / half_span,
        phase0: phase_sum.arg(),
        delay: delay_n / (2.0 * PI * half_span),
        f_ref,
    }
}

/// First index from `start` stepping by `dir` where `level` is reached,
/// with the crossing frequency linearly interpolated.
fn crossing(freqs: &[f64], values: &[f64], start: usize, level: f64, forward: bool) -> Option<f64> {
    let n = values.len();
    let mut prev = start;
    loop {
        let next = if forward {
            if prev + 1 >= n {
                return None;
            }
            prev + 1
        } else {
            if prev == 0 {
                return None;
            }
            prev - 1
        };
        if values[next] >= level {
            let (v0, v1) = (values[prev], values[next]);
            let t = if v1 > v0 { (level - v0) / (v1 - v0) } else { 0.5 };
            return Some(freqs[prev] + t.clamp(0.0, 1.0) * (freqs[next] - freqs[prev]));
        }
        prev = next;
    }
}

/// Starting values for [`fit_resonance`] from a trace holding a single dip.
pub fn initial_guess(trace: &ComplexTrace) -> Result<(ModeParams, BackgroundModel)> {
    let freqs = trace.freqs();
    let n = freqs.len();
    let (lo, hi) = (freqs[0], freqs[n - 1]);
    let f_ref = 0.5 * (lo + hi);
    let half_span = 0.5 * (hi - lo);

    let bg = background_guess(freqs, trace.s11(), f_ref, half_span);
    let z: Vec<Complex64> = freqs
        .iter()
        .zip(trace.s11())
        .map(|(&f, &s)| {
            let b = bg.eval(f);
            if b.norm() > 1e-300 {
                s / b
            } else {
                s
            }
        })
        .collect();

    let noise = estimate_noise(&z);
    let half = smoothing_half_width(n);
    let smooth = moving_average(&z, half);
    let power: Vec<f64> = smooth.iter().map(|v| v.norm_sqr()).collect();

    let (imin, &pmin) = power
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("trace has at least two points");
    let depth = 1.0 - pmin.sqrt();
    if !(depth > 3.0 * noise) || depth < 1e-9 {
        return Err(Error::NoDipFound { depth, noise });
    }

    let z0 = smooth[imin];
    let d = z0.norm().min(1.0 - 1e-12);
    let beta = if z0.re < 0.0 { -d } else { d };
    let ratio = (1.0 - beta) / (1.0 + beta);

    let level = 0.5 * (1.0 + d * d);
    let f0 = freqs[imin];
    let left = crossing(freqs, &power, imin, level, false).map(|f| f0 - f);
    let right = crossing(freqs, &power, imin, level, true).map(|f| f - f0);
    let fwhm = match (left, right) {
        (Some(l), Some(r)) => l + r,
        (Some(h), None) | (None, Some(h)) => 2.0 * h,
        (None, None) => half_span,
    };
    let min_step = freqs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let fwhm = fwhm.max(min_step);

    let ql = f0 / fwhm;
    let qi = ql * (1.0 + ratio);
    let qe = qi / ratio;
    Ok((ModeParams::new(f0, qi, qe), bg))
}

fn fit_from(
    model: &ResonanceModel<'_>,
    mode: &ModeParams,
    bg: &BackgroundModel,
    config: &FitConfig,
) -> Result<lm::LmReport> {
    let x0 = model.encode(mode, bg);
    lm::minimize(model, x0, &config.lm())
}

/// Fits one resonance plus background to `trace`.
pub fn fit_resonance(
    trace: &ComplexTrace,
    config: &FitConfig,
    guess: Option<(ModeParams, BackgroundModel)>,
) -> Result<FitResult> {
    config.validate()?;
    let (mode0, bg0) = match guess {
        Some(g) => {
            g.0.validate()?;
            g.1.validate()?;
            g
        }
        None => initial_guess(trace)?,
    };
    let model = ResonanceModel::new(trace);
    let primary = fit_from(&model, &mode0, &bg0, config);

    // The opposite coupling branch (Qi <-> Qe at equal loaded Q) is a local
    // minimum of the magnitude; start from it too and keep the better fit.
    let mirrored = ModeParams::new(mode0.f0, mode0.qe, mode0.qi);
    let alt = fit_from(&model, &mirrored, &bg0, config);
    let report = match (primary, alt) {
        (Ok(p), Ok(a)) if a.converged && (a.cost < p.cost || !p.converged) => a,
        (Ok(p), _) => p,
        (Err(_), Ok(a)) => a,
        (Err(e), Err(_)) => return Err(e),
    };

    let (mode, bg) = model.decode(&report.x);
    let cov = report.covariance()?;
    let sd = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let w = 0.5 * (trace.freqs()[trace.len() - 1] - trace.freqs()[0]);
    let sigma = FitSigma {
        f0: sd(0) * w,
        qi: sd(1) * mode.qi,
        qe: sd(2) * mode.qe,
        amp0: sd(3),
        amp_slope: sd(4) / w,
        phase0: sd(5),
        delay: sd(6) / (2.0 * PI * w),
    };

    Ok(FitResult {
        mode,
        bg,
        sigma,
        residual_norm: (2.0 * report.cost / trace.len() as f64).sqrt(),
        n_iter: report.n_iter,
        converged: report.converged,
        cost_history: report.cost_history,
        overlaps_neighbor: false,
    })
}

/// A dip located by prominence in a magnitude trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dip {
    pub index: usize,
    pub freq: f64,
    pub prominence: f64,
    /// Estimated full width at half depth (Hz).
    pub width: f64,
}

/// Prominence of each interior local minimum of `values`.
fn minima_prominence(values: &[f64]) -> Vec<(usize, f64)> {
    let n = values.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let v = values[i];
        if !(v < values[i - 1] && v <= values[i + 1]) {
            continue;
        }
        let mut left_max = v;
        for j in (0..i).rev() {
            if values[j] < v {
                break;
            }
            left_max = left_max.max(values[j]);
        }
        let mut right_max = v;
        for &vj in &values[i + 1..] {
            if vj < v {
                break;
            }
            right_max = right_max.max(vj);
        }
        out.push((i, left_max.min(right_max) - v));
    }
    out
}

/// Finds resonance dips in the magnitude of `trace`.
pub fn detect_dips(trace: &ComplexTrace, config: &FitConfig) -> Vec<Dip> {
    let freqs = trace.freqs();
    let n = freqs.len();
    let noise = estimate_noise(trace.s11());
    let smooth = moving_average(trace.s11(), smoothing_half_width(n));
    let mag: Vec<f64> = smooth.iter().map(|z| z.norm()).collect();
    let scale = mag.iter().cloned().fold(0.0, f64::max);
    let threshold = (config.min_prominence_sigma * noise).max(1e-9 * scale);

    let mut dips: Vec<Dip> = minima_prominence(&mag)
        .into_iter()
        .filter(|&(_, p)| p > threshold)
        .map(|(i, p)| {
            let base = mag[i] + p;
            let level = 0.5 * (mag[i] * mag[i] + base * base);
            let power: Vec<f64> = mag.iter().map(|m| m * m).collect();
            let l = crossing(freqs, &power, i, level, false).map(|f| freqs[i] - f);
            let r = crossing(freqs, &power, i, level, true).map(|f| f - freqs[i]);
            let width = match (l, r) {
                (Some(a), Some(b)) => a + b,
                (Some(h), None) | (None, Some(h)) => 2.0 * h,
                (None, None) => freqs[n - 1] - freqs[0],
            };
            Dip { index: i, freq: freqs[i], prominence: p, width }
        })
        .collect();
    dips.sort_by(|a, b| a.freq.total_cmp(&b.freq));
    dips
}

/// Detects every dip and fits each in its own window.
pub fn fit_multimode(trace: &ComplexTrace, config: &FitConfig) -> Result<Vec<FitResult>> {
    config.validate()?;
    let dips = detect_dips(trace, config);
    if dips.len() <= 1 {
        return Ok(vec![fit_resonance(trace, config, None)?]);
    }

    let windows: Vec<(f64, f64)> = dips
        .iter()
        .map(|d| {
            let half = config.window_linewidths * d.width;
            (d.freq - half, d.freq + half)
        })
        .collect();
    let overlaps: Vec<bool> = (0..windows.len())
        .map(|i| {
            let left = i > 0 && windows[i - 1].1 > windows[i].0;
            let right = i + 1 < windows.len() && windows[i].1 > windows[i + 1].0;
            left || right
        })
        .collect();

    let mut results = windows
        .par_iter()
        .zip(overlaps.par_iter())
        .map(|(&(lo, hi), &overlap)| {
            let sub = trace.window(lo, hi).ok_or_else(|| {
                Error::InsufficientData(format!("window [{lo}, {hi}] Hz holds fewer than 2 points"))
            })?;
            let mut fit = fit_resonance(&sub, config, None)?;
            if overlap {
                log::warn!("fit window around {:.6e} Hz overlaps a neighbouring mode", fit.mode.f0);
            }
            fit.overlaps_neighbor = overlap;
            Ok(fit)
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| a.mode.f0.total_cmp(&b.mode.f0));
    Ok(results)
}

/// Mean `Qi` of the `count` fits closest to `center` in frequency.
pub fn mean_central_qi(fits: &[FitResult], center: f64, count: usize) -> Option<f64> {
    if fits.is_empty() || count == 0 {
        return None;
    }
    let mut by_distance: Vec<&FitResult> = fits.iter().collect();
    by_distance.sort_by(|a, b| (a.mode.f0 - center).abs().total_cmp(&(b.mode.f0 - center).abs()));
    let chosen = &by_distance[..count.min(by_distance.len())];
    Some(chosen.iter().map(|f| f.mode.qi).sum::<f64>() / chosen.len() as f64)
}

/// Standard deviations of `(f0, Qi, Qe)` from a residual bootstrap.
pub fn bootstrap_sigma(
    trace: &ComplexTrace,
    fit: &FitResult,
    config: &FitConfig,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    if resamples < 2 {
        return Err(Error::invalid("resamples", "need at least 2"));
    }
    let model = ResonanceModel::new(trace);
    let x = model.encode(&fit.mode, &fit.bg);
    let clean: Vec<Complex64> = trace.freqs().iter().map(|&f| model.eval(f, &x)).collect();
    let residuals: Vec<Complex64> = clean.iter().zip(trace.s11()).map(|(m, d)| d - m).collect();

    let samples = (0..resamples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let s11: Vec<Complex64> = clean
                .iter()
                .map(|m| m + residuals[rng.random_range(0..residuals.len())])
                .collect();
            let t = ComplexTrace::new(trace.freqs().to_vec(), s11, trace.meta)?;
            let f = fit_resonance(&t, config, Some((fit.mode, fit.bg)))?;
            Ok((f.mode.f0, f.mode.qi, f.mode.qe))
        })
        .collect::<Result<Vec<_>>>()?;

    let sd = |get: fn(&(f64, f64, f64)) -> f64| {
        let n = samples.len() as f64;
        let mean = samples.iter().map(get).sum::<f64>() / n;
        (samples.iter().map(|s| (get(s) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((sd(|s| s.0), sd(|s| s.1), sd(|s| s.2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response::{linear_grid, synth_trace, TraceMeta};

    fn window_trace(mode: &ModeParams, bg: &BackgroundModel, points: usize, noise: f64, seed: u64) -> ComplexTrace {
        let lw = mode.linewidth();
        let grid = linear_grid(mode.f0 - 10.0 * lw, mode.f0 + 10.0 * lw, points).unwrap();
        synth_trace(&[*mode], bg, &grid, noise, seed).unwrap()
    }

    #[test]
    fn guess_on_noiseless_mode() {
        let m = ModeParams::new(0.524e9, 4.53e5, 1.16e5);
        let bg = BackgroundModel { amp0: 0.5, amp_slope: 0.0, phase0: 0.7, delay: 40e-9, f_ref: m.f0 };
        let t = window_trace(&m, &bg, 1001, 0.0, 0);
        let (g, _) = initial_guess(&t).unwrap();
        assert!((g.f0 - m.f0).abs() / m.f0 < 0.2);
        assert!((g.qi / m.qi - 1.0).abs() < 0.2, "qi guess {}", g.qi);
        assert!((g.qe / m.qe - 1.0).abs() < 0.2, "qe guess {}", g.qe);
    }

    #[test]
    fn guess_for_critical_coupling() {
        let m = ModeParams::new(3.0e9, 5e4, 5e4);
        let t = window_trace(&m, &BackgroundModel::unit(), 1001, 0.0, 0);
        let (g, _) = initial_guess(&t).unwrap();
        assert!((g.qi / g.qe - 1.0).abs() < 0.1, "{g:?}");
    }

    #[test]
    fn flat_trace_has_no_dip() {
        let grid = linear_grid(1e9, 1.001e9, 101).unwrap();
        let t = synth_trace(&[], &BackgroundModel::unit(), &grid, 0.0, 0).unwrap();
        assert!(matches!(initial_guess(&t), Err(Error::NoDipFound { .. })));
        let noisy = synth_trace(&[], &BackgroundModel::unit(), &grid, 0.01, 4).unwrap();
        assert!(matches!(initial_guess(&noisy), Err(Error::NoDipFound { .. })));
    }

    #[test]
    fn noiseless_round_trip_is_exact() {
        let m = ModeParams::new(3.1e9, 7.47e4, 6.57e5);
        let bg = BackgroundModel { amp0: 0.8, amp_slope: 2e-7, phase0: -2.0, delay: 35e-9, f_ref: 3.1e9 };
        let t = window_trace(&m, &bg, 801, 0.0, 0);
        let fit = fit_resonance(&t, &FitConfig::default(), None).unwrap();
        assert!(fit.converged);
        assert!((fit.mode.qi / m.qi - 1.0).abs() < 1e-8, "{:?}", fit.mode);
        assert!((fit.mode.qe / m.qe - 1.0).abs() < 1e-8);
        assert!((fit.mode.f0 - m.f0).abs() / m.f0 < 1e-12);
        assert!((fit.bg.delay - bg.delay).abs() < 1e-12);
        assert!(fit.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn swapped_guess_recovers_truth() {
        let m = ModeParams::new(2.0e9, 1.7e5, 2.4e5);
        let t = window_trace(&m, &BackgroundModel::unit(), 601, 1e-3, 11);
        let swapped = (ModeParams::new(m.f0, m.qe, m.qi), BackgroundModel::unit());
        let fit = fit_resonance(&t, &FitConfig::default(), Some(swapped)).unwrap();
        assert!((fit.mode.qi / m.qi - 1.0).abs() < 0.02, "{:?}", fit.mode);
        assert!((fit.mode.qe / m.qe - 1.0).abs() < 0.02);
    }

    #[test]
    fn bad_config_rejected() {
        let m = ModeParams::new(3.0e9, 5e4, 8e4);
        let t = window_trace(&m, &BackgroundModel::unit(), 201, 0.0, 0);
        let cfg = FitConfig { max_iter: 0, ..FitConfig::default() };
        assert!(fit_resonance(&t, &cfg, None).is_err());
    }

    #[test]
    fn single_mode_multimode_matches_single_fit() {
        let m = ModeParams::new(3.0e9, 5e4, 8e4);
        let t = window_trace(&m, &BackgroundModel::unit(), 801, 1e-3, 2);
        let cfg = FitConfig::default();
        let single = fit_resonance(&t, &cfg, None).unwrap();
        let multi = fit_multimode(&t, &cfg).unwrap();
        assert_eq!(multi.len(), 1);
        assert_eq!(multi[0], single);
    }

    #[test]
    fn noise_estimate_tracks_injected_noise() {
        let grid = linear_grid(1e9, 1.001e9, 5001).unwrap();
        let t = synth_trace(&[], &BackgroundModel::unit(), &grid, 0.02, 8).unwrap();
        let s = estimate_noise(t.s11());
        assert!((s / 0.02 - 1.0).abs() < 0.1, "{s}");
    }

    #[test]
    fn bootstrap_is_seeded() {
        let m = ModeParams::new(3.0e9, 5e4, 8e4);
        let t = window_trace(&m, &BackgroundModel::unit(), 401, 5e-3, 2);
        let cfg = FitConfig::default();
        let fit = fit_resonance(&t, &cfg, None).unwrap();
        let a = bootstrap_sigma(&t, &fit, &cfg, 20, 7).unwrap();
        let b = bootstrap_sigma(&t, &fit, &cfg, 20, 7).unwrap();
        assert_eq!(a, b);
        // bootstrap and linearised errors agree to within a factor of two
        assert!(a.1 > 0.5 * fit.sigma.qi && a.1 < 2.0 * fit.sigma.qi, "{a:?} vs {:?}", fit.sigma);
    }

    #[test]
    fn window_helper() {
        let grid = linear_grid(1.0, 10.0, 10).unwrap();
        let t = ComplexTrace::new(grid, vec![Complex64::new(1.0, 0.0); 10], TraceMeta::default()).unwrap();
        assert_eq!(t.window(2.5, 5.0).unwrap().freqs(), &[3.0, 4.0, 5.0]);
        assert!(t.window(2.5, 3.5).is_none());
    }
}
