//! Fusion of infrared/visible and structural/functional medical image pairs.
//!
//! The crate is organised around a small image data model ([`raster`]), the
//! fusion-quality metric suite ([`metrics`]), data-driven loss weights
//! ([`adaptive`]), a frozen deep-feature extractor ([`backbone`]), the
//! trainable fusion network ([`net`]), the training objectives ([`losses`])
//! and the two-stage training driver ([`trainer`]).
//!
//! Heavy inner loops (convolutions, batched metric evaluation) run on rayon
//! when the default `parallel` feature is enabled and fall back to sequential
//! execution otherwise. Both paths produce bitwise-identical results: parallel
//! sections only map independent chunks and all reductions are combined in a
//! fixed order.

pub mod adaptive;
pub mod autograd;
pub mod backbone;
pub mod container;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod parallelism;
pub mod raster;
pub mod trainer;

mod error;

pub use error::{Error, Result};
