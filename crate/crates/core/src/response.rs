//! One-port reflection of a resonator mode, multimode traces and the
//! measurement-setup background.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{require_finite, require_non_negative, require_positive, Error, Result};

/// Resonant frequency and internal/external quality factors of one mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    pub f0: f64,
    pub qi: f64,
    pub qe: f64,
}

impl ModeParams {
    pub fn new(f0: f64, qi: f64, qe: f64) -> Self {
        Self { f0, qi, qe }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("f0", self.f0)?;
        require_positive("qi", self.qi)?;
        require_positive("qe", self.qe)
    }

    /// `1/Ql = 1/Qi + 1/Qe`.
    pub fn loaded_q(&self) -> f64 {
        1.0 / (1.0 / self.qi + 1.0 / self.qe)
    }

    /// Full width of the dip, `f0 / Ql`.
    pub fn linewidth(&self) -> f64 {
        self.f0 / self.loaded_q()
    }
}

/// Reflection coefficient of a single mode measured through the IDT port.
pub fn s11_single(f: f64, mode: &ModeParams) -> Complex64 {
    let ratio = mode.qi / mode.qe;
    let detuning = Complex64::new(0.0, 2.0 * mode.qi * (f - mode.f0) / f);
    (Complex64::new(1.0 - ratio, 0.0) + detuning) / (Complex64::new(1.0 + ratio, 0.0) + detuning)
}

/// Setup response: affine magnitude and linear phase about a reference frequency.
///
/// `bg(f) = (amp0 + amp_slope (f - f_ref)) * exp(i (phase0 - 2 pi delay (f - f_ref)))`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub amp0: f64,
    /// Magnitude slope (1/Hz).
    pub amp_slope: f64,
    /// Phase at `f_ref` (rad).
    pub phase0: f64,
    /// Group delay (s).
    pub delay: f64,
    /// Frequency the magnitude and phase are referenced to; not a fit parameter.
    #[serde(default)]
    pub f_ref: f64,
}

impl BackgroundModel {
    pub fn unit() -> Self {
        Self {
            amp0: 1.0,
            amp_slope: 0.0,
            phase0: 0.0,
            delay: 0.0,
            f_ref: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("amp0", self.amp0)?;
        require_finite("amp_slope", self.amp_slope)?;
        require_finite("phase0", self.phase0)?;
        require_finite("delay", self.delay)?;
        require_finite("f_ref", self.f_ref)
    }

    pub fn eval(&self, f: f64) -> Complex64 {
        let df = f - self.f_ref;
        let mag = self.amp0 + self.amp_slope * df;
        Complex64::from_polar(mag, self.phase0 - 2.0 * PI * self.delay * df)
    }

    /// Same background, re-expressed about a different reference frequency.
    pub fn rereferenced(&self, f_ref: f64) -> Self {
        let shift = f_ref - self.f_ref;
        Self {
            amp0: self.amp0 + self.amp_slope * shift,
            amp_slope: self.amp_slope,
            phase0: self.phase0 - 2.0 * PI * self.delay * shift,
            delay: self.delay,
            f_ref,
        }
    }
}

impl Default for BackgroundModel {
    fn default() -> Self {
        Self::unit()
    }
}

/// Acquisition metadata carried alongside a trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    /// Drive power at the instrument port (dBm).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drive_power_dbm: Option<f64>,
    /// Line attenuation between instrument and sample (dB, positive for loss).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attenuation_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature_k: Option<f64>,
}

/// Complex reflection samples on a strictly increasing frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTrace {
    freqs: Vec<f64>,
    s11: Vec<Complex64>,
    pub meta: TraceMeta,
}

impl ComplexTrace {
    pub fn new(freqs: Vec<f64>, s11: Vec<Complex64>, meta: TraceMeta) -> Result<Self> {
        if freqs.len() != s11.len() {
            return Err(Error::invalid(
                "s11",
                format!("{} samples for {} frequencies", s11.len(), freqs.len()),
            ));
        }
        if freqs.len() < 2 {
            return Err(Error::invalid("freqs", "a trace needs at least 2 points"));
        }
        for (i, f) in freqs.iter().enumerate() {
            if !f.is_finite() {
                return Err(Error::invalid("freqs", format!("non-finite frequency at index {i}")));
            }
        }
        if let Some(i) = freqs.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "freqs",
                format!("not strictly increasing at index {}", i + 1),
            ));
        }
        if let Some(i) = s11.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("s11", format!("non-finite sample at index {i}")));
        }
        Ok(Self { freqs, s11, meta })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn s11(&self) -> &[Complex64] {
        &self.s11
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Points with `lo <= f <= hi`, or `None` if fewer than two remain.
    pub fn window(&self, lo: f64, hi: f64) -> Option<ComplexTrace> {
        let start = self.freqs.partition_point(|&f| f < lo);
        let end = self.freqs.partition_point(|&f| f <= hi);
        if end < start + 2 {
            return None;
        }
        Some(ComplexTrace {
            freqs: self.freqs[start..end].to_vec(),
            s11: self.s11[start..end].to_vec(),
            meta: self.meta,
        })
    }

    /// Multiplies every sample by `factor`.
    pub fn scaled(&self, factor: Complex64) -> ComplexTrace {
        ComplexTrace {
            freqs: self.freqs.clone(),
            s11: self.s11.iter().map(|z| z * factor).collect(),
            meta: self.meta,
        }
    }
}

/// Uniform grid of `points` frequencies covering `[start, stop]`.
pub fn linear_grid(start: f64, stop: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::invalid("points", "a grid needs at least 2 points"));
    }
    require_positive("start", start)?;
    require_finite("stop", stop)?;
    if stop <= start {
        return Err(Error::invalid("stop", "must exceed start"));
    }
    let step = (stop - start) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| if i == points - 1 { stop } else { start + i as f64 * step })
        .collect())
}

/// Complex Gaussian sample for grid index `index`, with `E|n|^2 = 1`.
///
/// Each index draws from its own ChaCha stream, so a trace can be generated in
/// any order or in parallel and still be bit-identical.
pub fn unit_noise(seed: u64, index: u64) -> Complex64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let re: f64 = StandardNormal.sample(&mut rng);
    let im: f64 = StandardNormal.sample(&mut rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn noiseless_point(f: f64, modes: &[ModeParams], bg: &BackgroundModel) -> Complex64 {
    modes.iter().fold(bg.eval(f), |acc, m| acc * s11_single(f, m))
}

/// Background times the product of single-mode responses, plus seeded noise
/// of complex standard deviation `noise_sigma`.
pub fn synth_trace(
    modes: &[ModeParams],
    bg: &BackgroundModel,
    grid: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<ComplexTrace> {
    for m in modes {
        m.validate()?;
    }
    bg.validate()?;
    require_non_negative("noise_sigma", noise_sigma)?;
    if grid.len() < 2 {
        return Err(Error::invalid("grid", "a grid needs at least 2 points"));
    }
    if grid.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::invalid("grid", "frequencies must be finite and positive"));
    }

    const PARALLEL_THRESHOLD: usize = 16_384;
    let point = |(i, &f): (usize, &f64)| {
        let clean = noiseless_point(f, modes, bg);
        if noise_sigma > 0.0 {
            clean + unit_noise(seed, i as u64) * noise_sigma
        } else {
            clean
        }
    };
    let s11: Vec<Complex64> = if grid.len() >= PARALLEL_THRESHOLD {
        grid.par_iter().enumerate().map(point).collect()
    } else {
        grid.iter().enumerate().map(point).collect()
    };
    ComplexTrace::new(grid.to_vec(), s11, TraceMeta::default())
}

/// Divides the background out of every sample.
pub fn remove_background(trace: &ComplexTrace, bg: &BackgroundModel) -> Result<ComplexTrace> {
    let mut s11 = Vec::with_capacity(trace.len());
    for (&f, &z) in trace.freqs.iter().zip(&trace.s11) {
        let b = bg.eval(f);
        let magnitude = b.norm();
        if !(magnitude >= 1e-12) {
            return Err(Error::SingularBackground { freq_hz: f, magnitude });
        }
        s11.push(z / b);
    }
    Ok(ComplexTrace {
        freqs: trace.freqs.clone(),
        s11,
        meta: trace.meta,
    })
}
