//! Finding 3D scene analogies: smooth dense maps between regions of two
//! scenes that share spatial context.
//!
//! The pipeline trains a contextual descriptor field with contrastive
//! learning ([`training`]), then aligns the fields of two scenes with a
//! coarse-to-fine affine plus thin-plate-spline map ([`map_estimation`]).
//! [`evaluation`] holds the pair generator and metrics, [`transfer`] the
//! trajectory and object-placement applications.

pub mod assignment;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod io;
pub mod map_estimation;
pub mod numeric;
pub mod procedural;
pub mod rng;
pub mod scene;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
