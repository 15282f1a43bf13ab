//! Numerical building blocks shared by the estimators.

pub mod normal;
pub mod optim;
pub mod quad;
pub mod stats;
