//! Directory index for Inria-style datasets: `root/images/` and `root/gt/`
//! with matching file stems.

use super::IngestError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Explicit tile-name lists per split. Tiles not named in any list are left
/// out of every split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    fn names(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_path: PathBuf,
    pub gt_path: PathBuf,
    pub tile_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub split: Split,
}

const RASTER_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "jpg", "jpeg"];

fn scan_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>, IngestError> {
    let mut out = BTreeMap::new();
    let read = std::fs::read_dir(dir)
        .map_err(|e| IngestError::Io { path: dir.display().to_string(), source: e })?;
    for entry in read {
        let entry =
            entry.map_err(|e| IngestError::Io { path: dir.display().to_string(), source: e })?;
        let path = entry.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !RASTER_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Build the deterministic (lexicographic) index for one split. Every image
/// must have a ground-truth partner and vice versa; orphans on either side
/// are reported together. Paired rasters must agree on dimensions.
pub fn load_inria_index(
    root: &Path,
    split_spec: &SplitSpec,
    split: Split,
) -> Result<DatasetIndex, IngestError> {
    let images_dir = root.join("images");
    let gt_dir = root.join("gt");
    if !images_dir.is_dir() {
        return Err(IngestError::MissingSubdir(root.display().to_string(), "images"));
    }
    if !gt_dir.is_dir() {
        return Err(IngestError::MissingSubdir(root.display().to_string(), "gt"));
    }
    let images = scan_rasters(&images_dir)?;
    let gts = scan_rasters(&gt_dir)?;

    let mut orphans: Vec<String> = Vec::new();
    for stem in images.keys() {
        if !gts.contains_key(stem) {
            orphans.push(format!("images/{stem} has no gt"));
        }
    }
    for stem in gts.keys() {
        if !images.contains_key(stem) {
            orphans.push(format!("gt/{stem} has no image"));
        }
    }
    if !orphans.is_empty() {
        return Err(IngestError::UnpairedFiles(orphans.join(", ")));
    }

    let wanted = split_spec.names(split);
    let mut entries = Vec::new();
    for (stem, image_path) in &images {
        if !wanted.iter().any(|n| n == stem) {
            continue;
        }
        let gt_path = gts[stem].clone();
        let (iw, ih) = image::image_dimensions(image_path)
            .map_err(|e| IngestError::Image { path: image_path.display().to_string(), source: e })?;
        let (gw, gh) = image::image_dimensions(&gt_path)
            .map_err(|e| IngestError::Image { path: gt_path.display().to_string(), source: e })?;
        if (iw, ih) != (gw, gh) {
            return Err(IngestError::PairDims { tile: stem.clone(), iw, ih, gw, gh });
        }
        entries.push(IndexEntry {
            image_path: image_path.clone(),
            gt_path,
            tile_name: stem.clone(),
        });
    }
    // BTreeMap iteration is already lexicographic; keep the guarantee
    // explicit anyway.
    entries.sort_by(|a, b| a.tile_name.cmp(&b.tile_name));
    Ok(DatasetIndex { entries, split })
}
