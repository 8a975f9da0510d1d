//! File formats, dataset ingestion and the command-line pipeline around
//! `mapmend-core`: PNG/TIFF rasters, GeoJSON footprints, the Inria-style
//! directory index, an Overpass-style OSM client with a disk cache, overlay
//! rendering, and the `synth | train | repair | eval | sweep` commands.

pub mod cli;
pub mod config;
pub mod geojson;
pub mod ingest;
pub mod osm;
pub mod overlay;
pub mod png;
