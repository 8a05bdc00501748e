//! Adaptive Wasserstein Hourglass: weakly-supervised 3D hand pose estimation with
//! similarity-weighted Wasserstein feature alignment, on a procedurally generated
//! two-domain toy dataset.

pub mod cli;
pub mod critic;
pub mod depthreg;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod oracle;
pub mod posenet;
pub mod simweight;
pub mod toyhands;
pub mod trainer;

pub use error::{AwhError, Result};
