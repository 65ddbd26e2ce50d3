//! Modelling and characterization toolkit for one-port surface acoustic wave
//! (SAW) Fabry-Perot resonators.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: material and lithographic parameters, derived cavity
//!   quantities (penetration depth, free spectral range, stopbands) and the
//!   grating-limited quality factor.
//! - [`response`]: the one-port reflection lineshape, multimode trace synthesis
//!   and the instrument background model.
//! - [`lm`]: a small Levenberg-Marquardt solver shared by all fitters.
//! - [`fitting`]: extraction of `(f0, Qi, Qe)` and background from complex traces.
//! - [`loss`]: loss-budget model, frequency power law, two-level-system
//!   saturation and derived estimators.
//! - [`dataio`]: Touchstone/CSV trace I/O, the bundled device table and report writers.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// reference values in tests keep every digit the oracle printed
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod constants;
pub mod dataio;
mod error;
pub mod fitting;
pub mod geometry;
pub mod lm;
pub mod loss;
pub mod response;

pub use error::{Error, Result};
pub use fitting::{fit_multimode, fit_resonance, initial_guess, FitConfig, FitResult};
pub use geometry::{derive_params, DerivedParams, DeviceGeometry, MaterialParams, ModeWindow};
pub use response::{s11_single, synth_trace, BackgroundModel, ComplexTrace, ModeParams, TraceMeta};
