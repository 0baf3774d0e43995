//! Instance-level uncertainty for single-scale multi-level detectors.
//!
//! Each pyramid level predicts exactly one box per cell, so the T boxes a
//! cell produces under Monte Carlo dropout are already aligned and can be
//! reduced in place into a mean probability, an MC variance and a mean
//! learned predictive variance. The crate covers the whole loop: synthetic
//! scenes, a micro detector trained with an attenuated classification loss,
//! aggregation and NMS, and FROC/CPM/F1 evaluation with uncertainty
//! thresholds.

pub mod aggregate;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod micronet;
pub mod synth;

pub use error::{Error, Result};
