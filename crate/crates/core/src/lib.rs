//! Individual-level reproductive microsimulation with likelihood-free
//! inference of its behavioral parameters from age-specific fertility rates.
//!
//! The pipeline is: [`simulate`] cohorts under a [`model::ParameterVector`],
//! reduce them to rate vectors, train a conditional density estimator
//! ([`mdn`], [`apt`]) over several proposal rounds ([`snpe`]), and check the
//! result with [`validation`].

pub mod apt;
pub mod error;
pub mod exec;
pub mod histogram;
pub mod io;
pub mod mdn;
pub mod model;
pub mod prior;
pub mod simulate;
pub mod snpe;
pub mod validation;

pub use error::{Error, Result};
pub use exec::Execution;
pub use histogram::Histogram;
pub use model::{ParameterVector, WomanTraits, N_PARAMS, PARAM_NAMES};
pub use simulate::{CohortResult, SummaryLayout, SummaryVector};
