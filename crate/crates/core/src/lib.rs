//! Highly adaptive lasso estimation with spline bases and undersmoothed
//! plug-in estimators.

pub mod basis;
pub mod data;
pub mod error;
pub mod lasso;
pub mod loss;
pub mod select;
pub mod sim;
pub mod targets;

pub use error::{HalError, Result};
