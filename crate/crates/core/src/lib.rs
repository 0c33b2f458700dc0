//! One-dimensional, vector-valued ROF denoising with anisotropic linear-growth
//! regularizers.
//!
//! The crate is organised around the pieces of the problem
//!
//! ```text
//! E(w) = lambda * F(Dw)(I) + 1/2 * |w - h|^2_{L^2}
//! ```
//!
//! where `F = f o phi` is built from a [`anisotropy::Anisotropy`] and a
//! [`regularizer::Profile`]:
//!
//! * [`bvsignal`] holds grid signals with explicit atoms and the measure
//!   functionals evaluated on their derivatives,
//! * [`solver`] contains the smoothed Newton continuation, the exact
//!   discrete primal-dual solver and the taut-string oracle,
//! * [`flow`] runs minimizing movements,
//! * [`verify`] compares minimizer and datum derivative measures window by
//!   window.

pub mod anisotropy;
pub mod bvsignal;
pub mod config;
pub mod error;
pub mod flow;
pub mod io;
pub mod quadrature;
pub mod regularizer;
pub mod rng;
pub mod solver;
pub mod verify;

pub use anisotropy::{Anisotropy, AnisotropySpec, EquivalenceConstants};
pub use bvsignal::{DerivativeMeasure, Grid, GridSignal, MeasureWindow};
pub use error::{Error, Result};
pub use regularizer::{Profile, ProfileSpec, Regularizer, Variant};
