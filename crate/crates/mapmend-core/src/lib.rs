//! Core algorithms for repairing building-footprint annotations against imagery.
//!
//! The crate implements the full repair stack in plain Rust:
//!
//! - [`raster`] — masks, instance labeling, polygon rasterization/vectorization
//!   and pixel metrics.
//! - [`geometry`] — per-instance similarity transforms, the dense transform
//!   field, and differentiable barycenter-anchored warping.
//! - [`noise`] — seeded corruption of clean masks (per-instance and global
//!   transforms, footprint removal and injection) used for self-supervision.
//! - [`model`] — the recurrent-residual U-Net generator with three heads
//!   (transform field, missing footprints, obsolete footprints) and its
//!   checkpoint format.
//! - [`train`] — loss definitions and the training loop.
//! - [`infer`] — tiled full-image repair: pooling, filtering, warping,
//!   missing-footprint regularization, and branch merging.
//! - [`eval`] — alignment / align-&-detect scoring protocols, the displacement
//!   sweep, and CSV/SVG emission.
//! - [`shapes`] — the synthetic textured-shapes dataset used for CPU-scale
//!   training and tests.
//!
//! File formats, dataset ingestion and the command-line interface live in the
//! companion `mapmend` crate.

pub mod eval;
pub mod geometry;
pub mod infer;
pub mod model;
pub mod noise;
pub mod raster;
pub mod regularize;
pub mod shapes;
pub mod train;

pub use geometry::{FieldCalibration, SimilarityTransform, TransformField};
pub use raster::{
    BinaryMask, Connectivity, InstanceMap, InstanceRegion, IntensityImage, Point, Polygon,
    ProbabilityMask,
};
