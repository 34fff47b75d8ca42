//! Generative sampling of tractography streamlines.
//!
//! Seed streamlines of a bundle are encoded by a convolutional autoencoder,
//! new latent vectors are drawn by rejection sampling against a Parzen
//! density of the seeds, decoded back to streamlines, and filtered by
//! anatomy, direction, geometry and (optionally) connectivity criteria.
//! Coverage is scored as bundle volume overlap.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoencoder;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod plausibility;
pub mod rng;
pub mod sampler;
pub mod vec3;
pub mod volume;

pub use error::{GestaError, Result};
pub use geometry::{Streamline, Tractogram, STREAMLINE_VERTICES};
pub use volume::{GridGeometry, Payload, PeakField, VolumeGrid, PEAK_SLOTS};
