//! Material and device geometry of a one-port SAW resonator and the cavity
//! quantities that follow from them.
//!
//! A resonator is two Bragg mirrors of `ng` electrodes each, separated by
//! `d = m * lambda0 / 2`, with an interdigital transducer of `nt` electrodes in
//! between. Electrodes and gaps are `a = lambda0 / 4` wide. Weak per-electrode
//! reflectivity `|r_s|` lets the standing wave leak into the mirrors by a
//! penetration depth `a / |r_s|`, so the effective cavity is longer than `d`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{require_positive, Error, Result};

/// Substrate and electrode properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// SAW phase velocity.
    #[serde(rename = "v_m_per_s")]
    pub v: f64,
    /// Substrate mass density.
    #[serde(rename = "rho_kg_per_m3")]
    pub rho: f64,
    /// Reflectivity magnitude of a single mirror electrode.
    pub rs_mag: f64,
    #[serde(rename = "temperature_k")]
    pub temperature: f64,
}

impl MaterialParams {
    /// ST-X quartz at dilution-refrigerator temperature.
    pub const ST_X_QUARTZ: MaterialParams = MaterialParams {
        v: 3100.0,
        rho: 2650.0,
        rs_mag: 0.002,
        temperature: 0.010,
    };

    pub fn validate(&self) -> Result<()> {
        require_positive("v_m_per_s", self.v)?;
        require_positive("rho_kg_per_m3", self.rho)?;
        require_positive("rs_mag", self.rs_mag)?;
        if self.rs_mag >= 1.0 {
            return Err(Error::invalid(
                "rs_mag",
                format!("must be below 1, got {}", self.rs_mag),
            ));
        }
        require_positive("temperature_k", self.temperature)
    }

    pub fn with_rs_mag(self, rs_mag: f64) -> Self {
        Self { rs_mag, ..self }
    }
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self::ST_X_QUARTZ
    }
}

/// Lithographic parameters of one resonator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceGeometry {
    /// Electrode and gap width, a quarter wavelength.
    pub a_m: f64,
    /// Transducer aperture W. Metadata only.
    pub aperture_m: f64,
    /// Electrodes in the IDT.
    pub nt: u32,
    /// Electrodes per mirror.
    pub ng: u32,
    /// Mirror separation in half wavelengths, `d / 2a`.
    pub m_half_waves: u32,
    /// Metal film thickness h. Metadata only.
    pub film_thickness_m: f64,
}

impl DeviceGeometry {
    pub fn validate(&self) -> Result<()> {
        require_positive("a_m", self.a_m)?;
        if !self.aperture_m.is_finite() || self.aperture_m < 0.0 {
            return Err(Error::invalid("aperture_m", "must be finite and non-negative"));
        }
        if !self.film_thickness_m.is_finite() || self.film_thickness_m < 0.0 {
            return Err(Error::invalid(
                "film_thickness_m",
                "must be finite and non-negative",
            ));
        }
        if self.nt < 2 {
            return Err(Error::invalid("nt", format!("need at least 2 electrodes, got {}", self.nt)));
        }
        if self.ng < 1 {
            return Err(Error::invalid("ng", "need at least 1 electrode"));
        }
        if self.m_half_waves < 1 {
            return Err(Error::invalid("m_half_waves", "must be at least 1"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        4.0 * self.a_m
    }

    /// Mirror separation `d`.
    pub fn mirror_spacing(&self) -> f64 {
        self.m_half_waves as f64 * 2.0 * self.a_m
    }
}

/// Every cavity quantity computed from a geometry and a material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub lambda0_m: f64,
    /// Nominal centre frequency `v / lambda0`.
    pub f0_hz: f64,
    pub mirror_spacing_m: f64,
    /// Penetration depth into each mirror.
    pub lp_m: f64,
    /// Effective cavity length `d + 2 Lp`.
    pub lc_m: f64,
    pub fsr_hz: f64,
    /// Mirror power reflectivity `tanh(ng |r_s|)`.
    pub reflectivity: f64,
    /// Width of the first mirror stopband.
    pub df_1sb_hz: f64,
    /// IDT bandwidth.
    pub df_idt_hz: f64,
    /// Grating-limited quality factor.
    pub qg: f64,
}

/// `1 - tanh(x)` without cancellation, for `x >= 0`.
pub fn one_minus_tanh(x: f64) -> f64 {
    // 1 - tanh(x) = 2 / (exp(2x) + 1) = 2 exp(-2x) / (1 + exp(-2x))
    let e = (-2.0 * x.abs()).exp();
    if x >= 0.0 {
        2.0 * e / (1.0 + e)
    } else {
        2.0 / (1.0 + e)
    }
}

/// Quality factor limited by transmission through the mirrors.
///
/// For very long gratings `1 - tanh` underflows; the result then saturates at
/// `f64::MAX` rather than becoming infinite.
pub fn grating_q(lc_m: f64, lambda0_m: f64, rs_mag: f64, ng: u32) -> f64 {
    let x = rs_mag * ng as f64;
    let prefactor = PI * lc_m / lambda0_m;
    // ln(1/(1 - tanh x)) = 2x + ln(1 + exp(-2x)) - ln 2
    let ln_inv = 2.0 * x + (-2.0 * x).exp().ln_1p() - std::f64::consts::LN_2;
    let q = (prefactor.ln() + ln_inv).exp();
    if q.is_finite() {
        q
    } else {
        f64::MAX
    }
}

pub fn derive_params(geom: &DeviceGeometry, mat: &MaterialParams) -> Result<DerivedParams> {
    geom.validate()?;
    mat.validate()?;

    let a = geom.a_m;
    let lambda0 = geom.wavelength();
    let f0 = mat.v / lambda0;
    let d = geom.mirror_spacing();
    let lp = a / mat.rs_mag;
    let lc = d + 2.0 * lp;
    let fsr = mat.v / lc;

    Ok(DerivedParams {
        lambda0_m: lambda0,
        f0_hz: f0,
        mirror_spacing_m: d,
        lp_m: lp,
        lc_m: lc,
        fsr_hz: fsr,
        reflectivity: (mat.rs_mag * geom.ng as f64).tanh(),
        df_1sb_hz: 2.0 * f0 * mat.rs_mag / PI,
        df_idt_hz: 1.8 * f0 / geom.nt as f64,
        qg: grating_q(lc, lambda0, mat.rs_mag, geom.ng),
    })
}

/// Frequency band used to select cavity modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModeWindow {
    /// `min(first stopband, IDT bandwidth)` centred on `f0`.
    Default,
    FirstStopband,
    IdtBandwidth,
    /// Closed interval `[lo, hi]` in Hz.
    Explicit { lo: f64, hi: f64 },
}

impl ModeWindow {
    pub fn bounds(&self, derived: &DerivedParams) -> (f64, f64) {
        let centred = |width: f64| (derived.f0_hz - width / 2.0, derived.f0_hz + width / 2.0);
        match *self {
            ModeWindow::Default => centred(derived.df_1sb_hz.min(derived.df_idt_hz)),
            ModeWindow::FirstStopband => centred(derived.df_1sb_hz),
            ModeWindow::IdtBandwidth => centred(derived.df_idt_hz),
            ModeWindow::Explicit { lo, hi } => (lo, hi),
        }
    }
}

/// Longitudinal mode comb `f0 + k FSR` restricted to `window`, ascending.
pub fn mode_frequencies(derived: &DerivedParams, window: ModeWindow) -> Vec<f64> {
    let (lo, hi) = window.bounds(derived);
    if !(lo <= hi) || !derived.fsr_hz.is_finite() || derived.fsr_hz <= 0.0 {
        return Vec::new();
    }
    let f0 = derived.f0_hz;
    let fsr = derived.fsr_hz;
    let k_min = ((lo - f0) / fsr).ceil() as i64;
    let k_max = ((hi - f0) / fsr).floor() as i64;
    (k_min..=k_max).map(|k| f0 + k as f64 * fsr).collect()
}

/// External Q from the scaling law `Qe = c_e * Lc / Nt^2`.
pub fn external_q(geom: &DeviceGeometry, derived: &DerivedParams, c_e: f64) -> Result<f64> {
    require_positive("c_e", c_e)?;
    geom.validate()?;
    let nt = geom.nt as f64;
    Ok(c_e * derived.lc_m / (nt * nt))
}

/// Calibration constant `c_e` that makes [`external_q`] reproduce a measured `qe`.
pub fn calibrate_external_q(qe_meas: f64, geom: &DeviceGeometry, derived: &DerivedParams) -> Result<f64> {
    require_positive("qe_meas", qe_meas)?;
    geom.validate()?;
    let nt = geom.nt as f64;
    Ok(qe_meas * nt * nt / derived.lc_m)
}
