//! Limited-angle PET sinogram toolkit.
//!
//! The crate simulates parallel-beam acquisitions of synthetic activity
//! phantoms, removes a contiguous wedge of projection angles, trains a small
//! conditional denoising-diffusion network to fill the wedge back in, and
//! reconstructs images with MLEM so that limited-angle and inpainted
//! reconstructions can be compared.
//!
//! Data-parallel loops (projection angles, per-sample gradients, corpus
//! generation) run on rayon when the `parallel` feature is enabled (default)
//! and sequentially otherwise. Results are bit-identical either way.

pub mod diffusion;
pub mod error;
pub mod grid;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod mlem;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod projector;

pub use error::{Error, Result};
pub use grid::{Image, ProjectionGeometry, Sinogram};
pub use masking::AngularMask;
pub use projector::Projector;
