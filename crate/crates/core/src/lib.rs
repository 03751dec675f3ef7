//! Isoscape modelling and isotope-based origin verification.
//!
//! The crate predicts stable-isotope-ratio surfaces from location and
//! atmospheric covariates and tests whether a claimed harvest origin is
//! consistent with a measured isotope signature. Two model families are
//! provided:
//!
//! * [`boosting`]: a tree ensemble used as the mean of a spatial Gaussian
//!   process, trained by alternating covariance fits and Newton boosting steps.
//! * [`multitask`]: a joint Gaussian process over all isotope tasks with a
//!   Kronecker-structured covariance, an ARD feature kernel and a learned task
//!   covariance.
//!
//! [`verify`] turns a fitted multitask model into a chi-squared origin test,
//! [`raster`] renders isoscapes as ESRI ASCII grids, and [`eval`] holds the
//! synthetic-world generator and cross-validation harness.

pub mod boosting;
pub mod data;
pub mod error;
pub mod eval;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod model_io;
pub mod multitask;
pub mod optim;
pub mod raster;
pub mod verify;

pub use error::{Error, Result};

/// Version of the on-disk model container written by [`model_io`].
pub const MODEL_FORMAT_VERSION: u32 = 1;
