//! Unsupervised grayscale segmentation with a layered Bayesian network over
//! superpixels.
//!
//! The pipeline over-segments an image into superpixels ([`superpixel`]),
//! clusters their mean intensities into class centers ([`class_model`]),
//! scores labelings with the superpixel/region/predicate factorization
//! ([`bn_model`]) and searches for a high-scoring labeling with ICM, model
//! decomposition or both ([`inference`]). [`evaluation`] holds the metrics,
//! threshold baselines and synthetic data used to check results, and
//! [`pipeline`] ties everything into runs that write images and reports.

pub mod bn_model;
pub mod class_model;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod pipeline;
pub mod raster;
pub mod superpixel;

pub use error::{Error, Result};
