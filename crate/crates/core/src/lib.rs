//! Explicit transformer constructions for Hölder targets on cubes and
//! manifolds, with independent oracles, intrinsic-dimension estimation and
//! scaling-law calculators.

pub mod blocks;
pub mod cli;
pub mod error;
pub mod id_estimator;
pub mod report;
pub mod runtime;
pub mod scaling;
pub mod synthesis;

pub use error::{Error, Result};
