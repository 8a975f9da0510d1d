//! Dataset ingestion: the Inria-style directory index and the affine
//! geo-to-pixel bridge used to rasterize OSM footprints.

mod geo;
mod inria;

pub use geo::{geo_to_pixel, ClipStats, GeoTransform};
pub use inria::{load_inria_index, DatasetIndex, IndexEntry, Split, SplitSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("dataset root {0} is missing the {1}/ subdirectory")]
    MissingSubdir(String, &'static str),
    #[error("unpaired dataset files: {0}")]
    UnpairedFiles(String),
    #[error("dimension mismatch for tile {tile}: image {iw}x{ih}, gt {gw}x{gh}")]
    PairDims { tile: String, iw: u32, ih: u32, gw: u32, gh: u32 },
    #[error("singular geotransform (zero determinant)")]
    SingularTransform,
    #[error("io {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("image {path}: {source}")]
    Image { path: String, source: image::ImageError },
}
