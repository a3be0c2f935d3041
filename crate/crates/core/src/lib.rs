//! Perturbative scalar field theory on quantum spacetime.
//!
//! A real scalar field is quantized on a spacetime whose coordinates obey
//! uncertainty relations at a localization length `lambda`. Working in the
//! product algebra of best-localized states replaces every propagator of the
//! classical theory by a Gaussian-damped, everywhere-smooth counterpart, and
//! the usual formal-series constructions of perturbation theory (deformed
//! Wick products, time-ordered products, S-matrices, the retarded
//! interacting observables, thermal states) become finite, numerically
//! evaluable objects order by order.
//!
//! The crate is organized along the pipeline:
//!
//! * [`model`]: parameters, events, the localization kernel `G_lambda`,
//!   adiabatic cutoffs.
//! * [`propagators`]: the damped two-point kernels (Wightman, commutator,
//!   Feynman, advanced/retarded, thermal) as radial mode integrals with
//!   caching, plus decay diagnostics.
//! * [`functionals`]: polynomial field functionals with exact Wick
//!   combinatorics: deformed product, time-ordered product, involution,
//!   translations, evaluation.
//! * [`perturbation`]: formal power series: S-matrix, its star-inverse,
//!   relative S-matrices, the retarded intertwiner and its inverse, the
//!   interaction-picture cocycle and its generator.
//! * [`states`]: vacuum, thermal, and dressed expectation values; Monte
//!   Carlo and tensor-grid integration over interaction vertices; adiabatic
//!   scans, the thermal expansion of interacting expectations, and
//!   return-to-equilibrium diagnostics.
//! * [`verify`]: the machine-checkable identity suites backing `qstfield
//!   verify`.
//! * [`scenario`]: serializable run configurations shared by the CLI and
//!   the reproducibility tests.

pub mod error;
pub mod functionals;
pub mod guide;
pub mod model;
pub mod perturbation;
pub mod propagators;
pub mod quad;
pub mod scenario;
pub mod series;
pub mod states;
pub mod verify;

pub use error::QstError;
pub use model::{CutoffSpec, Event, ModelParams};
