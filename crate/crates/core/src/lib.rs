//! Multiple imputation for incomplete mixed-type longitudinal data.
//!
//! The crate implements a monotone data augmentation (MDA) sampler over a
//! sequence of regression models (generalized linear models plus skew-normal
//! and skew-t regressions), controlled pattern-mixture imputation of
//! post-dropout data (copy-reference, delta adjustment, tipping-point grids),
//! a fully conditional specification (FCS) alternative, and Rubin-rule
//! pooling of the analyses of the completed datasets.
//!
//! The usual pipeline is:
//!
//! 1. load or simulate a [`Dataset`](data::Dataset);
//! 2. sample intermittent missing cells and model parameters with
//!    [`mda::run_mda`] (or [`fcs::fcs_draws`]);
//! 3. complete the post-dropout cells with
//!    [`controlled::generate_imputations`] under a [`Mechanism`](controlled::Mechanism);
//! 4. fit an [`AnalysisSpec`](analysis::AnalysisSpec) to each completed
//!    dataset and pool with [`analysis::rubin_pool`].

pub mod analysis;
pub mod cli;
pub mod controlled;
pub mod data;
pub mod design;
pub mod error;
pub mod family;
pub mod fcs;
pub mod mda;
pub mod numeric;
pub mod samplers;
pub mod skewt;

pub use error::{Error, Result};
