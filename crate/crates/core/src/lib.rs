//! Seed-deterministic synthesis of labeled 3D vascular volumes, plus the
//! metrics and sliding-window fusion used around them.
//!
//! Labels come from trees of cubic splines rasterized onto a voxel lattice
//! ([`vessels`]); images are derived from labels by a randomized texture,
//! noise and artifact pipeline ([`image`]). [`dataset`] ties both to files
//! through [`io`].

pub mod dataset;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod sampling;
pub mod vessels;
pub mod volume;
