//! No-reference perceptual image quality assessment: multi-scale,
//! multi-color-space natural-scene-statistics features scored by a
//! stacked ensemble of Gaussian process regressors.

pub mod container;
pub mod error;
pub mod evalkit;
pub mod featpipe;
pub mod gpr;
pub mod gradfeat;
pub mod imgio;
pub mod manifest;
pub mod mscnfeat;
pub mod parallel;
pub mod stackens;

pub use error::{Error, Result};
