//! Occluded-image classification with pseudo-recurrent feedback.
//!
//! A single-layer convolutional K-means network ([`features`]) maps images to
//! two hidden layers. Training stores low-pass filtered hidden activity and
//! clusters it into per-class memories ([`memory`]), and fits a bank of
//! linear classifiers giving first, second and third class hypotheses
//! ([`classifiers`]). At test time [`feedback`] repeatedly retrieves the
//! memory closest to the current activity under those hypotheses and merges
//! it back, filling in activity destroyed by an occluder.
//!
//! [`rbm`] holds the Gibbs-sampling baseline and [`harness`] the experiment
//! driver (sweeps, toy model, timing fits, CSV output).

pub mod classifiers;
pub mod container;
pub mod dataset;
pub mod error;
pub mod features;
pub mod feedback;
pub mod harness;
pub mod kmeans;
pub mod memory;
pub mod rbm;

pub use error::{Error, Result};
