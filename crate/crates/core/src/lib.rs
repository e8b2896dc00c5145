//! Day/night population estimation from gridded mobile data traffic.
//!
//! The crate covers the whole chain: city tile geometry, ingestion of
//! per-service 15-minute traffic files into day-type/2-hour means,
//! downscaling of a coarse population raster onto the tile grid,
//! wide feature assembly, second-order gradient-boosted trees on
//! `ln(1 + population)`, TreeSHAP explanations, reporting, and a seeded
//! synthetic city generator that supplies ground truth.

pub mod error;
pub mod explain;
pub mod features;
pub mod gbtree;
pub mod grid_geo;
pub mod pipeline;
pub mod popgrid;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod traffic;

pub use error::{Error, Result};
