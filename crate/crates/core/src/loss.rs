//! Loss budget of SAW resonators: grating leakage plus propagation loss, the
//! frequency power law of the internal Q, two-level-system (TLS) saturation
//! and a few derived estimators.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::{BOLTZMANN, ELEMENTARY_CHARGE, HBAR, PLANCK};
use crate::error::{require_non_negative, require_positive, Error, Result};
use crate::geometry::{grating_q, DerivedParams, DeviceGeometry, MaterialParams};
use crate::lm::{self, invert_spd, LeastSquaresProblem, LmConfig};
use crate::response::ModeParams;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * (watts / 1e-3).log10()
}

/// Q contributed by a propagation loss `alpha_p` (1/m): `pi f0 / (v alpha_p)`.
pub fn propagation_q(alpha_p: f64, f0: f64, v: f64) -> f64 {
    PI * f0 / (v * alpha_p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    pub qg: f64,
    pub alpha_p: f64,
    pub qi_pred: f64,
}

pub fn loss_budget(derived: &DerivedParams, alpha_p: f64, mat: &MaterialParams) -> Result<LossBudget> {
    require_non_negative("alpha_p", alpha_p)?;
    mat.validate()?;
    let inv = 1.0 / derived.qg + mat.v * alpha_p / (PI * derived.f0_hz);
    Ok(LossBudget {
        qg: derived.qg,
        alpha_p,
        qi_pred: 1.0 / inv,
    })
}

/// Internal Q from grating leakage and propagation loss combined.
pub fn predict_qi(derived: &DerivedParams, alpha_p: f64, mat: &MaterialParams) -> Result<f64> {
    loss_budget(derived, alpha_p, mat).map(|b| b.qi_pred)
}

/// One device of a cavity-length series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityPoint {
    /// Mirror separation d (m).
    pub d_m: f64,
    pub f0_hz: f64,
    pub qi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsAlphaFit {
    pub rs_mag: f64,
    pub rs_sigma: f64,
    pub alpha_p: f64,
    /// Linearised standard error of `alpha_p`; absent when the optimum sits
    /// on the `alpha_p -> 0` boundary and the curvature vanishes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_sigma: Option<f64>,
    /// Profile-likelihood upper limits on `alpha_p` at 1 and 2 standard deviations.
    pub alpha_upper_1sigma: f64,
    pub alpha_upper_2sigma: f64,
    /// RMS of the `ln Q` residuals.
    pub residual_rms: f64,
    pub n_iter: usize,
    pub converged: bool,
}

struct RsAlphaProblem<'a> {
    points: &'a [CavityPoint],
    a_m: f64,
    ng: u32,
    v: f64,
    /// When set, `alpha_p` is held at this value and only `ln rs` is free.
    fixed_alpha: Option<f64>,
}

impl RsAlphaProblem<'_> {
    fn unpack(&self, x: &DVector<f64>) -> (f64, f64) {
        match self.fixed_alpha {
            Some(alpha) => (x[0].exp(), alpha),
            None => (x[0].exp(), x[1].exp()),
        }
    }

    /// `ln Qi` model and its partial derivatives with respect to `ln rs`, `ln alpha`.
    fn eval(&self, p: &CavityPoint, rs: f64, alpha: f64) -> (f64, f64, f64) {
        let lambda0 = 4.0 * self.a_m;
        let lp = self.a_m / rs;
        let lc = p.d_m + 2.0 * lp;
        let qg = grating_q(lc, lambda0, rs, self.ng);
        let inv_g = 1.0 / qg;
        let inv_p = self.v * alpha / (PI * p.f0_hz);
        let inv = inv_g + inv_p;
        // d ln(1/Qg) / d ln rs = -rs dLc/drs / Lc + d ln(1 - tanh(rs Ng)) / d ln rs
        //   dLc/d rs = -2 a / rs^2
        //   d ln(1 - tanh x)/dx = -(1 + tanh x)
        let x = rs * self.ng as f64;
        let dlninvg = 2.0 * lp / lc - (1.0 + x.tanh()) * x;
        let d_lnrs = -(inv_g * dlninvg) / inv;
        let d_lnalpha = -inv_p / inv;
        (-inv.ln(), d_lnrs, d_lnalpha)
    }
}

impl LeastSquaresProblem for RsAlphaProblem<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let (rs, alpha) = self.unpack(x);
        DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| self.eval(p, rs, alpha).0 - p.qi.ln()),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (rs, alpha) = self.unpack(x);
        let cols = if self.fixed_alpha.is_some() { 1 } else { 2 };
        let mut j = DMatrix::zeros(self.points.len(), cols);
        for (i, p) in self.points.iter().enumerate() {
            let (_, drs, dalpha) = self.eval(p, rs, alpha);
            j[(i, 0)] = drs;
            if cols == 2 {
                j[(i, 1)] = dalpha;
            }
        }
        j
    }
}

fn tight_lm() -> LmConfig {
    LmConfig {
        max_iter: 500,
        xtol: 1e-12,
        ftol: 1e-15,
        gtol: 1e-15,
        ..LmConfig::default()
    }
}

/// Fits `|r_s|` and `alpha_p` to internal Q measured over a series of
/// cavity lengths, with relative (log-Q) residuals.
///
/// `template` supplies the electrode width and grating length shared by the
/// series; `mat.v` is the SAW velocity.
pub fn fit_rs_alpha(points: &[CavityPoint], template: &DeviceGeometry, mat: &MaterialParams) -> Result<RsAlphaFit> {
    template.validate()?;
    mat.validate()?;
    for (i, p) in points.iter().enumerate() {
        require_positive(&format!("points[{i}].d_m"), p.d_m)?;
        require_positive(&format!("points[{i}].f0_hz"), p.f0_hz)?;
        require_positive(&format!("points[{i}].qi"), p.qi)?;
    }
    if points.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 devices, got {}",
            points.len()
        )));
    }
    let d_min = points.iter().map(|p| p.d_m).fold(f64::INFINITY, f64::min);
    let d_max = points.iter().map(|p| p.d_m).fold(0.0, f64::max);
    if d_max == d_min {
        return Err(Error::DegenerateFit("all devices have the same mirror spacing".into()));
    }
    if d_max < 5.0 * d_min {
        return Err(Error::InsufficientData(format!(
            "mirror spacing spans a factor {:.2}, need at least 5",
            d_max / d_min
        )));
    }

    let problem = RsAlphaProblem {
        points,
        a_m: template.a_m,
        ng: template.ng,
        v: mat.v,
        fixed_alpha: None,
    };

    // coarse log grid for the starting point
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=40 {
        let ln_rs = (1e-4f64).ln() + i as f64 * (1e-1f64 / 1e-4).ln() / 40.0;
        for j in 0..=40 {
            let ln_alpha = (1e-3f64).ln() + j as f64 * (1e4f64 / 1e-3).ln() / 40.0;
            let x = DVector::from_vec(vec![ln_rs, ln_alpha]);
            let c = problem.residuals(&x).norm_squared();
            if c < best.0 {
                best = (c, ln_rs, ln_alpha);
            }
        }
    }

    let report = lm::minimize(&problem, DVector::from_vec(vec![best.1, best.2]), &tight_lm())?;
    if !report.converged {
        return Err(Error::NonConvergence { iterations: report.n_iter });
    }
    let rs = report.x[0].exp();
    let alpha = report.x[1].exp();
    let dof = (points.len() - 2) as f64;
    let s2 = 2.0 * report.cost / dof;

    let jtj = report.jacobian.transpose() * &report.jacobian;
    let (rs_sigma, alpha_sigma) = match invert_spd(&jtj) {
        Ok(inv) => (rs * (s2 * inv[(0, 0)]).sqrt(), Some(alpha * (s2 * inv[(1, 1)]).sqrt())),
        Err(_) => {
            let c00 = jtj[(0, 0)];
            if !(c00 > 0.0) {
                return Err(Error::DegenerateFit("reflectivity is unconstrained".into()));
            }
            (rs * (s2 / c00).sqrt(), None)
        }
    };

    let profile_cost = |alpha_fixed: f64, ln_rs0: f64| -> Result<(f64, f64)> {
        let sub = RsAlphaProblem { fixed_alpha: Some(alpha_fixed), ..problem };
        let r = lm::minimize(&sub, DVector::from_vec(vec![ln_rs0]), &tight_lm())?;
        Ok((2.0 * r.cost, r.x[0]))
    };
    let chi2_min = 2.0 * report.cost;
    let upper = |delta_chi2: f64| -> Result<f64> {
        let target = chi2_min + delta_chi2 * s2;
        let mut lo = alpha;
        let mut hi = alpha.max(1e-6);
        let mut ln_rs = report.x[0];
        loop {
            let (c, x) = profile_cost(hi, ln_rs)?;
            if c >= target {
                break;
            }
            ln_rs = x;
            lo = hi;
            hi *= 2.0;
            if hi > 1e9 {
                return Ok(f64::INFINITY);
            }
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let (c, _) = profile_cost(mid, ln_rs)?;
            if c >= target {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-10 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    };

    Ok(RsAlphaFit {
        rs_mag: rs,
        rs_sigma,
        alpha_p: alpha,
        alpha_sigma,
        alpha_upper_1sigma: upper(1.0)?,
        alpha_upper_2sigma: upper(4.0)?,
        residual_rms: (2.0 * report.cost / points.len() as f64).sqrt(),
        n_iter: report.n_iter,
        converged: report.converged,
    })
}

/// `Qi = c1 * 10^3 * (f / GHz)^(-c2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    /// Prefactor in units of `10^3 GHz^c2`.
    pub c1: f64,
    pub c2: f64,
}

impl PowerLaw {
    pub fn eval(&self, f_hz: f64) -> f64 {
        self.c1 * 1e3 * (f_hz / 1e9).powf(-self.c2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub law: PowerLaw,
    /// Standard errors; absent for an exactly determined two-point fit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c2_sigma: Option<f64>,
}

/// Ordinary least squares of `ln(Qi / 10^3)` on `ln(f / GHz)`.
///
/// Input pairs are `(f_hz, qi)`.
pub fn fit_powerlaw(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    for (i, &(f, q)) in points.iter().enumerate() {
        require_positive(&format!("points[{i}].f_hz"), f)?;
        require_positive(&format!("points[{i}].qi"), q)?;
    }
    if points.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 points".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| (p.0 / 1e9).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| (p.1 / 1e3).ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 1e-24) {
        return Err(Error::DegenerateFit("all frequencies are equal".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let law = PowerLaw { c1: intercept.exp(), c2: -slope };

    let (c1_sigma, c2_sigma) = if points.len() > 2 {
        let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        let s2 = rss / (n - 2.0);
        let se_slope = (s2 / sxx).sqrt();
        let se_intercept = (s2 * (1.0 / n + mx * mx / sxx)).sqrt();
        (Some(law.c1 * se_intercept), Some(se_slope))
    } else {
        (None, None)
    };
    Ok(PowerLawFit { law, c1_sigma, c2_sigma })
}

/// Which form of the TLS attenuation to evaluate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TlsConvention {
    /// Attenuation per unit length (1/m): the rate expression divided by `v`.
    #[default]
    PerLength,
    /// The rate expression `2 pi^2 f0 n0 gamma^2 / (rho v^2)` as written, in 1/s.
    AsPrinted,
}

/// TLS bath parameters with the context they are evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsParams {
    /// TLS density of states times coupling squared (J/m^3).
    pub n0_gamma2: f64,
    /// Critical power at the sample (W).
    pub p_c: f64,
    /// Q from all remaining, power-independent losses.
    pub q_rl: f64,
    pub rho: f64,
    pub v: f64,
    pub f0: f64,
    pub temperature: f64,
}

impl TlsParams {
    pub fn validate(&self) -> Result<()> {
        require_positive("n0_gamma2", self.n0_gamma2)?;
        require_positive("p_c", self.p_c)?;
        require_positive("q_rl", self.q_rl)?;
        require_positive("rho", self.rho)?;
        require_positive("v", self.v)?;
        require_positive("f0", self.f0)?;
        require_positive("temperature", self.temperature)
    }
}

pub fn thermal_factor(f0: f64, temperature: f64) -> f64 {
    (PLANCK * f0 / (2.0 * BOLTZMANN * temperature)).tanh()
}

/// Zero-power TLS attenuation before the saturation factor.
fn tls_alpha0(ctx: &TlsParams, convention: TlsConvention) -> f64 {
    let rate = 2.0 * PI * PI * ctx.f0 * ctx.n0_gamma2 / (ctx.rho * ctx.v * ctx.v);
    let base = match convention {
        TlsConvention::PerLength => rate / ctx.v,
        TlsConvention::AsPrinted => rate,
    };
    base * thermal_factor(ctx.f0, ctx.temperature)
}

/// TLS loss at drive power `p_at_sample` (W).
pub fn tls_alpha(p_at_sample: f64, ctx: &TlsParams, convention: TlsConvention) -> Result<f64> {
    require_non_negative("p_at_sample", p_at_sample)?;
    ctx.validate()?;
    Ok(tls_alpha0(ctx, convention) / (1.0 + p_at_sample / ctx.p_c).sqrt())
}

/// `Qi = (v alpha_TLS / (pi f0) + 1/Q_rl)^-1` with the per-length attenuation.
pub fn tls_qi(p_at_sample: f64, ctx: &TlsParams) -> Result<f64> {
    let alpha = tls_alpha(p_at_sample, ctx, TlsConvention::PerLength)?;
    Ok(1.0 / (ctx.v * alpha / (PI * ctx.f0) + 1.0 / ctx.q_rl))
}

/// Low-power limit of [`tls_qi`].
pub fn tls_qi0(ctx: &TlsParams) -> Result<f64> {
    tls_qi(0.0, ctx)
}

/// Fixed evaluation context for a TLS fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsContext {
    pub rho: f64,
    pub v: f64,
    pub f0: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsPoint {
    pub p_dbm_at_instrument: f64,
    pub qi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsFit {
    pub params: TlsParams,
    pub n0_gamma2_sigma: f64,
    pub p_c_sigma: f64,
    pub q_rl_sigma: f64,
    /// Critical power referred back to the instrument port (dBm).
    pub p_c_dbm_at_instrument: f64,
    pub qi0: f64,
    pub qi0_over_q_rl: f64,
    pub residual_rms: f64,
    pub n_iter: usize,
    pub converged: bool,
}

struct TlsProblem<'a> {
    powers_w: &'a [f64],
    ln_qi: &'a [f64],
    ctx: TlsContext,
}

impl TlsProblem<'_> {
    /// `v / (pi f0)` times the zero-power attenuation per unit `n0 gamma^2`.
    fn unit_inverse_q(&self) -> f64 {
        let c = &self.ctx;
        2.0 * PI / (c.rho * c.v * c.v) * thermal_factor(c.f0, c.temperature)
    }

    fn eval(&self, p: f64, x: &DVector<f64>) -> (f64, [f64; 3]) {
        let (n, pc, qrl) = (x[0].exp(), x[1].exp(), x[2].exp());
        let sat = 1.0 / (1.0 + p / pc).sqrt();
        let inv_tls = self.unit_inverse_q() * n * sat;
        let inv_rl = 1.0 / qrl;
        let inv = inv_tls + inv_rl;
        // d sat / d ln pc = 0.5 sat (p/pc) / (1 + p/pc)
        let dsat = 0.5 * (p / pc) / (1.0 + p / pc);
        (-inv.ln(), [-inv_tls / inv, -inv_tls * dsat / inv, inv_rl / inv])
    }
}

impl LeastSquaresProblem for TlsProblem<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.powers_w.len(),
            self.powers_w.iter().zip(self.ln_qi).map(|(&p, &q)| self.eval(p, x).0 - q),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.powers_w.len(), 3);
        for (i, &p) in self.powers_w.iter().enumerate() {
            let (_, g) = self.eval(p, x);
            for (k, v) in g.iter().enumerate() {
                j[(i, k)] = *v;
            }
        }
        j
    }
}

/// Fits `(n0 gamma^2, P_c, Q_rl)` to internal Q versus drive power.
///
/// Powers are given at the instrument and referred to the sample by
/// subtracting `attenuation_db` (positive for loss).
pub fn fit_tls(points: &[TlsPoint], attenuation_db: f64, ctx: TlsContext) -> Result<TlsFit> {
    crate::error::require_finite("attenuation_db", attenuation_db)?;
    for (name, v) in [("rho", ctx.rho), ("v", ctx.v), ("f0", ctx.f0), ("temperature", ctx.temperature)] {
        require_positive(name, v)?;
    }
    if points.len() < 4 {
        return Err(Error::InsufficientData(format!("need at least 4 points, got {}", points.len())));
    }
    for (i, p) in points.iter().enumerate() {
        crate::error::require_finite(&format!("points[{i}].p_dbm_at_instrument"), p.p_dbm_at_instrument)?;
        require_positive(&format!("points[{i}].qi"), p.qi)?;
    }
    let powers: Vec<f64> = points
        .iter()
        .map(|p| dbm_to_watts(p.p_dbm_at_instrument - attenuation_db))
        .collect();
    let p_min = powers.iter().cloned().fold(f64::INFINITY, f64::min);
    let p_max = powers.iter().cloned().fold(0.0, f64::max);
    if p_max < 1e3 * p_min {
        return Err(Error::InsufficientData(format!(
            "power span is {:.2} decades, need at least 3",
            (p_max / p_min).log10()
        )));
    }
    let ln_qi: Vec<f64> = points.iter().map(|p| p.qi.ln()).collect();
    let problem = TlsProblem { powers_w: &powers, ln_qi: &ln_qi, ctx };

    // Starting point: Q_rl above the largest Qi, the TLS share from the
    // smallest, P_c where Qi is halfway between.
    let q_lo = points.iter().map(|p| p.qi).fold(f64::INFINITY, f64::min);
    let q_hi = points.iter().map(|p| p.qi).fold(0.0, f64::max);
    let q_rl0 = 1.1 * q_hi;
    let inv_tls0 = (1.0 / q_lo - 1.0 / q_rl0).max(1e-3 / q_lo);
    let n0 = inv_tls0 / problem.unit_inverse_q();
    let mid = 0.5 * (q_lo + q_hi);
    let p_mid = points
        .iter()
        .zip(&powers)
        .min_by(|a, b| (a.0.qi - mid).abs().total_cmp(&(b.0.qi - mid).abs()))
        .map(|(_, &p)| p)
        .unwrap_or(p_min);
    let x0 = DVector::from_vec(vec![n0.ln(), p_mid.ln(), q_rl0.ln()]);

    let report = lm::minimize(&problem, x0, &tight_lm())?;
    if !report.converged {
        return Err(Error::NonConvergence { iterations: report.n_iter });
    }
    let cov = report.covariance()?;
    let params = TlsParams {
        n0_gamma2: report.x[0].exp(),
        p_c: report.x[1].exp(),
        q_rl: report.x[2].exp(),
        rho: ctx.rho,
        v: ctx.v,
        f0: ctx.f0,
        temperature: ctx.temperature,
    };
    let qi0 = tls_qi0(&params)?;
    Ok(TlsFit {
        params,
        n0_gamma2_sigma: params.n0_gamma2 * cov[(0, 0)].sqrt(),
        p_c_sigma: params.p_c * cov[(1, 1)].sqrt(),
        q_rl_sigma: params.q_rl * cov[(2, 2)].sqrt(),
        p_c_dbm_at_instrument: watts_to_dbm(params.p_c) + attenuation_db,
        qi0,
        qi0_over_q_rl: qi0 / params.q_rl,
        residual_rms: (2.0 * report.cost / points.len() as f64).sqrt(),
        n_iter: report.n_iter,
        converged: report.converged,
    })
}

/// Mean phonon number of a resonantly driven one-port mode,
/// `4 Ql^2 P / (Qe hbar w0^2)`.
pub fn phonon_number(p_at_sample: f64, mode: &ModeParams) -> Result<f64> {
    require_non_negative("p_at_sample", p_at_sample)?;
    mode.validate()?;
    let ql = mode.loaded_q();
    let w0 = 2.0 * PI * mode.f0;
    Ok(4.0 * ql * ql * p_at_sample / (mode.qe * HBAR * w0 * w0))
}

/// Phonon mean free path `1 / alpha_p`.
pub fn mean_free_path(alpha_p: f64) -> Result<f64> {
    require_non_negative("alpha_p", alpha_p)?;
    if alpha_p == 0.0 {
        return Err(Error::InfinitePath);
    }
    Ok(1.0 / alpha_p)
}

/// Qubit-resonator coupling `g / 2 pi = e beta V0 / h` (Hz).
pub fn coupling_estimate(beta: f64, v0_rms: f64) -> Result<f64> {
    require_non_negative("beta", beta)?;
    if beta > 1.0 {
        return Err(Error::invalid("beta", format!("must not exceed 1, got {beta}")));
    }
    require_non_negative("v0_rms", v0_rms)?;
    Ok(ELEMENTARY_CHARGE * beta * v0_rms / (2.0 * PI * HBAR))
}

/// Resonator linewidth `f0 / Qi` (Hz).
pub fn linewidth(f0: f64, qi: f64) -> f64 {
    f0 / qi
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    use crate::geometry::derive_params;

    fn r_series(m: u32) -> DeviceGeometry {
        DeviceGeometry { a_m: 250e-9, aperture_m: 1e-4, nt: 71, ng: 1000, m_half_waves: m, film_thickness_m: 30e-9 }
    }

    fn q7_tls() -> TlsParams {
        TlsParams {
            n0_gamma2: 4.5e4,
            p_c: dbm_to_watts(-65.7),
            q_rl: 5.75e4,
            rho: 2650.0,
            v: 3100.0,
            f0: 4.449e9,
            temperature: 0.010,
        }
    }

    #[test]
    fn dbm_conversion() {
        assert_eq!(dbm_to_watts(-30.0), 1e-6);
        assert_relative_eq!(watts_to_dbm(1e-6), -30.0, max_relative = 1e-15);
        assert_relative_eq!(dbm_to_watts(-140.0), 1e-17, max_relative = 1e-12);
    }

    #[test]
    fn lossless_propagation_gives_grating_q() {
        let mat = MaterialParams::default();
        let d = derive_params(&r_series(1929), &mat).unwrap();
        assert_eq!(predict_qi(&d, 0.0, &mat).unwrap(), d.qg);
        assert!(predict_qi(&d, -1.0, &mat).is_err());
    }

    #[test]
    fn r6_and_r9_predictions() {
        let mat = MaterialParams::default();
        let q6 = predict_qi(&derive_params(&r_series(1929), &mat).unwrap(), 12.5, &mat).unwrap();
        let q9 = predict_qi(&derive_params(&r_series(3229), &mat).unwrap(), 12.5, &mat).unwrap();
        assert_relative_eq!(q6, 74_588.280_438_917_772, max_relative = 1e-12);
        assert_relative_eq!(q9, 98_812.937_437_865_23, max_relative = 1e-12);
        assert!((q6 / 74.7e3 - 1.0).abs() < 0.01);
    }

    #[test]
    fn long_cavity_limit() {
        let mat = MaterialParams::default();
        let d = derive_params(&r_series(4_000_000_000), &mat).unwrap();
        let q = predict_qi(&d, 12.5, &mat).unwrap();
        assert_relative_eq!(q, propagation_q(12.5, d.f0_hz, mat.v), max_relative = 1e-3);
    }

    #[test]
    fn rs_alpha_exact_on_model_data() {
        let mat = MaterialParams::default();
        let template = r_series(1);
        let points: Vec<CavityPoint> = [109, 229, 429, 829, 1229, 1929, 2429, 2829, 3229, 3629]
            .iter()
            .map(|&m| {
                let g = r_series(m);
                let d = derive_params(&g, &mat).unwrap();
                CavityPoint { d_m: g.mirror_spacing(), f0_hz: d.f0_hz, qi: predict_qi(&d, 12.5, &mat).unwrap() }
            })
            .collect();
        let fit = fit_rs_alpha(&points, &template, &mat).unwrap();
        assert_relative_eq!(fit.rs_mag, 0.002, max_relative = 1e-6);
        assert_relative_eq!(fit.alpha_p, 12.5, max_relative = 1e-6);
    }

    #[test]
    fn rs_alpha_rejects_degenerate_series() {
        let mat = MaterialParams::default();
        let same = vec![CavityPoint { d_m: 1e-3, f0_hz: 3.1e9, qi: 7e4 }; 5];
        assert!(matches!(fit_rs_alpha(&same, &r_series(1), &mat), Err(Error::DegenerateFit(_))));
        let few = &same[..3];
        assert!(matches!(fit_rs_alpha(few, &r_series(1), &mat), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn rs_alpha_jacobian_matches_differences() {
        let mat = MaterialParams::default();
        let points: Vec<CavityPoint> = [109u32, 829, 3629]
            .iter()
            .map(|&m| CavityPoint { d_m: r_series(m).mirror_spacing(), f0_hz: 3.1e9, qi: 5e4 })
            .collect();
        let problem = RsAlphaProblem { points: &points, a_m: 250e-9, ng: 1000, v: mat.v, fixed_alpha: None };
        let x = DVector::from_vec(vec![(0.0017f64).ln(), (7.0f64).ln()]);
        let j = problem.jacobian(&x);
        for k in 0..2 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (problem.residuals(&xp) - problem.residuals(&xm)) / (2.0 * h);
            for i in 0..points.len() {
                assert_relative_eq!(j[(i, k)], fd[i], max_relative = 1e-6, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn powerlaw_two_exact_points() {
        let law = |f: f64| 100.0 * 1e3 * (f / 1e9).powi(-2);
        let fit = fit_powerlaw(&[(2e9, law(2e9)), (4e9, law(4e9))]).unwrap();
        assert_relative_eq!(fit.law.c1, 100.0, max_relative = 1e-12);
        assert_relative_eq!(fit.law.c2, 2.0, max_relative = 1e-12);
        assert!(fit.c1_sigma.is_none());
        assert!(fit_powerlaw(&[(2e9, 1e5), (2e9, 2e5), (2e9, 3e5)]).is_err());
    }

    #[test]
    fn powerlaw_point_check() {
        let law = PowerLaw { c1: 719.0, c2: 2.07 };
        assert_relative_eq!(law.eval(2.01e9), 169_477.891_220_213_71, max_relative = 1e-10);
    }

    #[test]
    fn tls_saturation_and_thermal_limits() {
        let ctx = q7_tls();
        let a0 = tls_alpha(0.0, &ctx, TlsConvention::PerLength).unwrap();
        let ac = tls_alpha(ctx.p_c, &ctx, TlsConvention::PerLength).unwrap();
        assert_relative_eq!(ac, a0 / 2f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(thermal_factor(ctx.f0, 1e-6), 1.0);
        assert_relative_eq!(a0, 50.058_024_286_487_248, max_relative = 1e-9);
        assert_relative_eq!(propagation_q(a0, ctx.f0, ctx.v), 90_069.319_168_294_705, max_relative = 1e-9);
        let printed = tls_alpha(0.0, &ctx, TlsConvention::AsPrinted).unwrap();
        assert_relative_eq!(printed, a0 * ctx.v, max_relative = 1e-14);
    }

    #[test]
    fn tls_low_power_q() {
        let ctx = q7_tls();
        let qi0 = tls_qi0(&ctx).unwrap();
        assert_relative_eq!(qi0, 35_095.275_097_600_719, max_relative = 1e-9);
        assert!((qi0 / 34_500.0 - 1.0).abs() < 0.05);
        assert!((qi0 / ctx.q_rl - 0.6).abs() < 0.05);
    }

    #[test]
    fn tls_monotonicity() {
        let ctx = q7_tls();
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let p = ctx.p_c * 10f64.powf(-4.0 + k as f64 * 0.15);
            let a = tls_alpha(p, &ctx, TlsConvention::PerLength).unwrap();
            assert!(a < prev);
            prev = a;
        }
        let more = TlsParams { n0_gamma2: 2.0 * ctx.n0_gamma2, ..ctx };
        assert!(tls_alpha(1e-15, &more, TlsConvention::PerLength).unwrap() > tls_alpha(1e-15, &ctx, TlsConvention::PerLength).unwrap());
    }

    #[test]
    fn tls_fit_on_exact_data() {
        let attenuation = 67.0;
        let truth = TlsParams { p_c: dbm_to_watts(-65.7 - attenuation), ..q7_tls() };
        let points: Vec<TlsPoint> = (0..30)
            .map(|k| {
                let p_dbm = -100.0 + k as f64 * 2.5;
                TlsPoint { p_dbm_at_instrument: p_dbm, qi: tls_qi(dbm_to_watts(p_dbm - attenuation), &truth).unwrap() }
            })
            .collect();
        let ctx = TlsContext { rho: truth.rho, v: truth.v, f0: truth.f0, temperature: truth.temperature };
        let fit = fit_tls(&points, attenuation, ctx).unwrap();
        assert_relative_eq!(fit.params.n0_gamma2, truth.n0_gamma2, max_relative = 1e-6);
        assert_relative_eq!(fit.params.p_c, truth.p_c, max_relative = 1e-6);
        assert_relative_eq!(fit.params.q_rl, truth.q_rl, max_relative = 1e-6);
        assert_relative_eq!(fit.p_c_dbm_at_instrument, -65.7, max_relative = 1e-6);
    }

    #[test]
    fn tls_fit_requires_power_span() {
        let points: Vec<TlsPoint> = (0..10)
            .map(|k| TlsPoint { p_dbm_at_instrument: -80.0 + k as f64, qi: 3.5e4 + 100.0 * k as f64 })
            .collect();
        let ctx = TlsContext { rho: 2650.0, v: 3100.0, f0: 4.449e9, temperature: 0.01 };
        assert!(matches!(fit_tls(&points, 67.0, ctx), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn phonon_number_examples() {
        let m = ModeParams::new(4.449e9, 34_500.0, 528e3);
        assert_eq!(phonon_number(0.0, &m).unwrap(), 0.0);
        let n = phonon_number(1e-17, &m).unwrap();
        assert_relative_eq!(n, 0.964_109_453_127_358_15, max_relative = 1e-9);
        assert_relative_eq!(phonon_number(2e-17, &m).unwrap(), 2.0 * n, max_relative = 1e-14);
    }

    #[test]
    fn mean_free_path_examples() {
        assert_relative_eq!(mean_free_path(15.0).unwrap(), 0.066_666_666_666_666_67, max_relative = 1e-15);
        assert_eq!(mean_free_path(1.0).unwrap(), 1.0);
        assert_relative_eq!(mean_free_path(12.5).unwrap(), 0.08, max_relative = 1e-15);
        assert!(matches!(mean_free_path(0.0), Err(Error::InfinitePath)));
    }

    #[test]
    fn coupling_examples() {
        let g = coupling_estimate(0.2, 20e-9).unwrap();
        assert_relative_eq!(g, 967_195.696_833_967_26, max_relative = 1e-9);
        assert_eq!(coupling_estimate(0.0, 20e-9).unwrap(), 0.0);
        assert_relative_eq!(coupling_estimate(1.0, 20e-9).unwrap(), 5.0 * g, max_relative = 1e-14);
        assert!(coupling_estimate(1.5, 20e-9).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prediction_below_both_limits(m in 1u32..20_000, alpha in 1e-3..100.0f64, rs in 5e-4..0.01f64) {
                let mat = MaterialParams::default().with_rs_mag(rs);
                let d = derive_params(&r_series(m), &mat).unwrap();
                let q = predict_qi(&d, alpha, &mat).unwrap();
                prop_assert!(q < d.qg);
                prop_assert!(q < propagation_q(alpha, d.f0_hz, mat.v));
            }
        }
    }
}
