//! Physical constants (CODATA 2018 exact values where defined).

use std::f64::consts::PI;

/// Elementary charge (C).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Planck constant (J s).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Reduced Planck constant (J s).
pub const HBAR: f64 = PLANCK / (2.0 * PI);
/// Boltzmann constant (J/K).
pub const BOLTZMANN: f64 = 1.380_649e-23;
