//! Simulation and verification laboratory for an environment-dependent
//! weakly-asymmetric exclusion process on the discrete torus.
//!
//! The crate is organized bottom-up:
//!
//! * [`lattice`] — spin configurations, local functionals as multilinear
//!   polynomials, difference operators and the gradient-condition solver;
//! * [`ensembles`] — grand-canonical / canonical expectations, the model's
//!   flux functionals and renormalization constants, averaging operators;
//! * [`dynamics`] — exact event-driven simulation, coupled simulation,
//!   localization and initial data;
//! * [`observables`] — height function, Gärtner transform, monitors and the
//!   exact generator-residual check;
//! * [`heat`] — the spectral semi-discrete heat kernel;
//! * [`she`] — a numerical solver for the continuum stochastic heat equation;
//! * [`harness`] — experiments, statistics, configuration and reports.

pub mod dynamics;
pub mod ensembles;
pub mod error;
pub mod harness;
pub mod heat;
pub mod lattice;
pub mod observables;
pub mod she;

pub use error::{Error, Result};
