//! Numerical machinery for weak Harnack estimates of kinetic Fokker-Planck
//! equations with rough coefficients.
//!
//! The crate is layered bottom-up: [`geometry`] (Galilean group, kinetic
//! cylinders), [`fields`] (grids, sampled fields, norms, coefficients),
//! [`kolmogorov`] (the constant-coefficient model operator), [`fpsolver`]
//! (the rough-coefficient solver), [`logtransform`], and on top the
//! verification experiments in [`harness`] and [`inkspots`].

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN. Index
// loops over several parallel arrays read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fields;
pub mod fpsolver;
pub mod geometry;
pub mod harness;
pub mod inkspots;
pub mod kolmogorov;
pub mod logtransform;
pub mod report;

pub use error::{Error, Result};
