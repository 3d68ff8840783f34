//! Alignment of misplaced historical building polygons against imagery
//! evidence by iterative offset denoising.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] polygons, padded batches with validity masks, rasterization
//! * [`codec`] offset vectors and their normalized encoding
//! * [`noising`] seeded Gaussian misplacement of footprint batches
//! * [`predictor`] the offset-prediction contract and two realizations
//! * [`denoise`] the multi-step inference engine, roof lifting, test-time
//!   augmentation and convergence analysis
//! * [`synth`] synthetic scenes with consistent label/footprint/roof geometry
//! * [`metrics`] mask and instance level evaluation
//! * [`dataio`] canonical on-disk formats
//! * [`cli`] command-line entry points
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise. Every random
//! draw is keyed by seed and instance index, so results do not depend on
//! which path is compiled in.

pub mod cli;
pub mod codec;
pub mod dataio;
pub mod denoise;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod noising;
mod par;
pub mod predictor;
pub mod rng;
pub mod synth;

pub use codec::{OffsetCodec, OffsetVec};
pub use error::{Error, Result};
pub use geometry::{Point2, Polygon, PolygonBatch, RasterMask};
