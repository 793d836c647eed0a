//! Monte Carlo simulation study.

pub mod dgp;
pub mod study;
pub mod truth;
