//! # quickive
//!
//! Exact Newton-Raphson algorithms for blind extraction and separation of
//! independent vector/components from complex-valued instantaneous mixtures.
//!
//! * [`extract`] runs one-unit extraction: `QuickIVE-1` (single block),
//!   `QuickIVE-2` (also for the piecewise-determined constant separating
//!   vector model) and a plain gradient-ascent baseline.
//! * [`separate`] runs `d` one-unit updates in parallel followed by a
//!   symmetric orthogonalization (`QuickIVA-1/2`).
//! * [`simgen`], [`metrics`] and [`experiment`] form the Monte-Carlo harness.
//!
//! All numerical code is generic over the real scalar through [`Real`]
//! (`f32` or `f64`); the aliases at the crate root fix it to `f64`, which is
//! what the benchmarks use.
//!
//! ```rust,no_run
//! use quickive::{simgen, extract, CovarianceSet, RationalScore, StoppingRule};
//! use quickive::extract::{Algorithm, ExtractOptions};
//!
//! # fn main() -> Result<(), quickive::IveError> {
//! let mut rng = simgen::trial_rng(7, 0);
//! let data = simgen::generate_iva_dataset::<f64, _>(&mut rng, 3, 6, 1000)?;
//! let cov = CovarianceSet::from_dataset(&data, true)?;
//! let init = simgen::near_ideal_init(&mut rng, &data, 0.1)?;
//! let run = extract::run_extraction(
//!     Algorithm::QuickIve2,
//!     &data,
//!     &cov,
//!     &RationalScore,
//!     &init,
//!     &StoppingRule::default(),
//!     &ExtractOptions::default(),
//! )?;
//! println!("{} iterations", run.iterations);
//! # Ok(())
//! # }
//! ```

// `!(x > 0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
mod error;
pub mod experiment;
pub mod extract;
pub mod linalg;
pub mod metrics;
pub mod model;
mod scalar;
pub mod score;
pub mod separate;
pub mod simgen;

pub use error::IveError;
pub use extract::{ExtractionState, StoppingRule};
pub use model::{CovarianceSet, Dataset, GroundTruth, IveParams};
pub use scalar::{CMat, CVec, Real};
pub use score::{NormScore, RationalScore, ScoreFunction};
pub use separate::SeparationState;

pub use nalgebra;
pub use num_complex::Complex;

pub type Result<T> = std::result::Result<T, IveError>;

/// Double precision complex scalar.
pub type C64 = Complex<f64>;
pub type CMat64 = CMat<f64>;
pub type CVec64 = CVec<f64>;
pub type IveParams64 = IveParams<f64>;
pub type Dataset64 = Dataset<f64>;
pub type CovarianceSet64 = CovarianceSet<f64>;
pub type ExtractionState64 = ExtractionState<f64>;
pub type SeparationState64 = SeparationState<f64>;
pub type StoppingRule64 = StoppingRule<f64>;
