//! Synthetic control estimators with analytic degrees of freedom.
//!
//! The crate fits plain, covariate, penalized, matching and model-averaged
//! synthetic controls, computes their divergences (`∂Ŷ/∂Y`) and degrees of
//! freedom in closed form, and uses them for Stein-type tuning-parameter
//! selection. A simulation layer provides the factor-model designs and
//! Monte-Carlo oracles used to check the formulas.

pub mod diagnostics;
pub mod divergence;
pub mod error;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod panel;
pub mod qp;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use panel::{Covariates, PanelDataset, PanelLabels};
