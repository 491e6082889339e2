//! Core numerics for a three-step zero-shot learning pipeline.
//!
//! The pipeline operates on precomputed feature vectors and per-class
//! semantic descriptors:
//!
//! 1. [`embed`] trains a two-layer ReLU mapping from descriptor space to
//!    feature space under a combined point-to-point and relational
//!    (pairwise-distance alignment) loss, with analytic gradients.
//! 2. [`adapt`] re-anchors the mapped descriptors of unseen classes onto
//!    unlabeled test features by conditional-gradient minimization over a
//!    transportation polytope; [`transport`] supplies the exact LP oracle.
//! 3. [`classify`] performs calibrated 1-nearest-neighbor prediction and
//!    computes the evaluation metrics (class-wise accuracies, harmonic
//!    mean, hubness skewness).
//!
//! [`data`] holds the dataset model, validation, and a deterministic
//! synthetic-data generator used for known-answer testing.
//!
//! The crate is `no_std` (with `alloc`); all file formats and the CLI live
//! in the companion `zsl-cli` crate. Every operation here is pure and
//! deterministic: the same inputs and seed produce bit-identical results.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod classify;
pub mod data;
pub mod embed;
pub mod error;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};

pub(crate) mod math {
    //! Float helpers usable without `std`.

    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }

    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
}
