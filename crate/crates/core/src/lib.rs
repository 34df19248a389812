//! Generalized conditional functional principal component analysis.
//!
//! The pipeline fits local random-intercept GLMMs in windows along the
//! functional domain, smooths the covariance of the resulting subject-level
//! random effects to obtain eigenfunctions, and then fits a joint penalized
//! GLMM with spline fixed effects and one random slope per eigenfunction.

pub mod basis;
pub mod binning;
pub mod error;
pub mod family;
pub mod fpca;
pub mod ingest;
pub mod joint_glmm;
pub mod local_glmm;
pub mod pipeline;
pub mod simlab;
mod optim;

pub use error::{Error, Result};
pub use family::{Family, FamilyKind};
