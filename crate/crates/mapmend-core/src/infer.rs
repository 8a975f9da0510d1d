//! Full-image repair: tile the scene into model-sized patches with a
//! discarded border, run the generator per tile, filter obsolete instances,
//! pool and warp the survivors, segment + regularize missing footprints, and
//! merge both branches into the final map.
//!
//! Tiling contract: per-tile interior windows (patch minus border, extended
//! to the image edge on boundary tiles) partition the image exactly. Each
//! mask instance is decided by exactly one tile — the one whose interior
//! contains its barycenter — and its full warped footprint is written to the
//! output, wherever it lands. Per-pixel head outputs (missing/obsolete) are
//! stitched by interior windows. All merges are order-independent, so the
//! result does not depend on tile processing order.

use crate::geometry::{
    pool_instance_transform, warp_to_patch, FieldCalibration, GeometryError, SimilarityTransform,
};
use crate::model::{Model, ModelError, ModelOutput};
use crate::raster::{
    label_instances, rasterize_polygons, BinaryMask, InstanceRegion, IntensityImage, Polygon,
    ProbabilityMask, RasterError,
};
use crate::regularize::regularize_polygon;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid tile plan: {0}")]
    BadPlan(String),
    #[error("plan {0}x{1} does not cover image {2}x{3}")]
    PlanMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Inference thresholds and knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Mean obsolete probability above which an instance is removed.
    pub tau_obsolete: f64,
    /// Per-pixel threshold for the missing head.
    pub tau_missing: f64,
    /// Minimum pixel area for a detected missing footprint.
    pub min_area: usize,
    /// Simplification tolerance handed to the polygon regularizer.
    pub simplify_tolerance: f64,
    pub calibration: FieldCalibration,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_obsolete: 0.5,
            tau_missing: 0.5,
            min_area: 20,
            simplify_tolerance: 2.0,
            calibration: FieldCalibration::default(),
        }
    }
}

/// One tile: the patch window plus the interior window it owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub row0: usize,
    pub col0: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Owned interior as `(r0, c0, r1, c1)`, half-open.
    pub interior: (usize, usize, usize, usize),
}

/// Tiling of an image into overlapping patches whose interiors partition it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub patch_size: usize,
    pub border: usize,
    pub height: usize,
    pub width: usize,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn stride(&self) -> usize {
        self.patch_size - 2 * self.border
    }

    /// A copy with the tile order reversed; the repair result must not
    /// depend on processing order.
    pub fn reversed(&self) -> TilePlan {
        let mut plan = self.clone();
        plan.tiles.reverse();
        plan
    }
}

/// Per-axis origins: stride apart, with the last clamped so the patch ends
/// exactly at the image edge.
fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let mut origins = Vec::new();
    let mut o = 0usize;
    loop {
        origins.push(o);
        if o + patch >= dim {
            break;
        }
        o = (o + stride).min(dim - patch);
    }
    origins
}

/// Interior segments per axis: `[0 .. o1+b), [o1+b .. o2+b), ..., [.. dim)`.
fn axis_interiors(origins: &[usize], border: usize, dim: usize) -> Vec<(usize, usize)> {
    let k = origins.len();
    (0..k)
        .map(|i| {
            let start = if i == 0 { 0 } else { origins[i] + border };
            let end = if i + 1 == k { dim } else { origins[i + 1] + border };
            (start, end)
        })
        .collect()
}

/// Plan the tiling. `patch_size` must exceed twice the border; images
/// smaller than one patch get a single clamped tile.
pub fn plan_tiles(
    height: usize,
    width: usize,
    patch_size: usize,
    border: usize,
) -> Result<TilePlan, InferError> {
    if patch_size <= 2 * border {
        return Err(InferError::BadPlan(format!(
            "patch size {patch_size} must exceed twice the border {border}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(InferError::BadPlan("empty image".into()));
    }
    let stride = patch_size - 2 * border;
    let row_origins = axis_origins(height, patch_size, stride);
    let col_origins = axis_origins(width, patch_size, stride);
    let row_int = axis_interiors(&row_origins, border, height);
    let col_int = axis_interiors(&col_origins, border, width);
    let mut tiles = Vec::with_capacity(row_origins.len() * col_origins.len());
    for (ri, &row0) in row_origins.iter().enumerate() {
        for (ci, &col0) in col_origins.iter().enumerate() {
            tiles.push(Tile {
                row0,
                col0,
                patch_h: patch_size.min(height),
                patch_w: patch_size.min(width),
                interior: (row_int[ri].0, col_int[ci].0, row_int[ri].1, col_int[ci].1),
            });
        }
    }
    Ok(TilePlan { patch_size, border, height, width, tiles })
}

/// The full output of a repair run.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairResult {
    /// Warped surviving instances only.
    pub aligned_map: BinaryMask,
    /// `aligned_map` merged with the rasterized missing-footprint polygons.
    pub final_map: BinaryMask,
    pub removed_labels: BTreeSet<u32>,
    pub per_instance_transforms: BTreeMap<u32, SimilarityTransform>,
    pub missing_polygons: Vec<Polygon>,
    pub warnings: Vec<String>,
}

/// Removal by mean obsolete probability, otherwise pool the field into one
/// transform. `None` means removed.
fn decide_instance(
    output: &ModelOutput,
    region: &InstanceRegion,
    thresholds: &Thresholds,
) -> Result<Option<SimilarityTransform>, InferError> {
    let mean_obsolete = region
        .pixels
        .iter()
        .map(|&(r, c)| output.obsolete.get(r, c))
        .sum::<f64>()
        / region.pixel_count() as f64;
    if mean_obsolete > thresholds.tau_obsolete {
        return Ok(None);
    }
    Ok(Some(pool_instance_transform(&output.field, region, &thresholds.calibration)?))
}

/// Warp one instance (given as a local mask) and OR the thresholded result
/// into `canvas`, offset by `(row_off, col_off)`.
fn splat_warped_instance(
    canvas: &mut BinaryMask,
    local_mask: &Array2<f64>,
    t: &SimilarityTransform,
    barycenter: crate::raster::Point,
    row_off: usize,
    col_off: usize,
) {
    if t.is_identity() {
        for ((r, c), &v) in local_mask.indexed_iter() {
            if v >= 0.5 {
                canvas.set(row_off + r, col_off + c, 1);
            }
        }
        return;
    }
    let patch = warp_to_patch(local_mask, t, barycenter);
    for ((pr, pc), &v) in patch.values.indexed_iter() {
        if v >= 0.5 {
            canvas.set(row_off + patch.row0 + pr, col_off + patch.col0 + pc, 1);
        }
    }
}

/// Threshold the stitched missing-head map, drop small components, vectorize
/// and regularize what remains.
fn extract_missing_polygons(missing: &ProbabilityMask, thresholds: &Thresholds) -> Vec<Polygon> {
    let bin = missing.threshold(thresholds.tau_missing);
    let imap = label_instances(&bin);
    let mut kept = BinaryMask::zeros(bin.height(), bin.width());
    for region in imap.regions() {
        if region.pixel_count() >= thresholds.min_area {
            for &(r, c) in &region.pixels {
                kept.set(r, c, 1);
            }
        }
    }
    crate::raster::vectorize_mask(&kept)
        .iter()
        .map(|poly| regularize_polygon(poly, thresholds.simplify_tolerance))
        .collect()
}

fn merge_final(
    aligned: &BinaryMask,
    missing_polygons: &[Polygon],
) -> Result<BinaryMask, InferError> {
    let mut final_map = aligned.clone();
    let added = rasterize_polygons(missing_polygons, aligned.width(), aligned.height()).mask;
    final_map.union_with(&added)?;
    Ok(final_map)
}

/// Repair a single patch-sized scene: every instance of `mask_patch` is
/// decided here (no tiling, no ownership rules).
pub fn repair_patch(
    model: &Model,
    image_patch: &IntensityImage,
    mask_patch: &BinaryMask,
    thresholds: &Thresholds,
) -> Result<RepairResult, InferError> {
    let (h, w) = (mask_patch.height(), mask_patch.width());
    let output = model.forward(image_patch, mask_patch)?;
    let imap = label_instances(mask_patch);
    let mut aligned = BinaryMask::zeros(h, w);
    let mut removed = BTreeSet::new();
    let mut transforms = BTreeMap::new();
    for region in imap.regions() {
        match decide_instance(&output, &region, thresholds)? {
            None => {
                removed.insert(region.label);
            }
            Some(t) => {
                splat_warped_instance(
                    &mut aligned,
                    region.to_mask(h, w).data(),
                    &t,
                    region.barycenter,
                    0,
                    0,
                );
                transforms.insert(region.label, t);
            }
        }
    }
    let missing_polygons = extract_missing_polygons(&output.missing, thresholds);
    let final_map = merge_final(&aligned, &missing_polygons)?;
    Ok(RepairResult {
        aligned_map: aligned,
        final_map,
        removed_labels: removed,
        per_instance_transforms: transforms,
        missing_polygons,
        warnings: Vec::new(),
    })
}

fn crop_image(image: &IntensityImage, tile: &Tile) -> IntensityImage {
    let view = image.data().slice(ndarray::s![
        ..,
        tile.row0..tile.row0 + tile.patch_h,
        tile.col0..tile.col0 + tile.patch_w
    ]);
    IntensityImage::new(view.to_owned()).expect("crop of a valid image")
}

fn crop_mask(mask: &BinaryMask, tile: &Tile) -> BinaryMask {
    let view = mask.data().slice(ndarray::s![
        tile.row0..tile.row0 + tile.patch_h,
        tile.col0..tile.col0 + tile.patch_w
    ]);
    BinaryMask::new(view.to_owned()).expect("crop of a valid mask")
}

/// Repair a full scene tile by tile. Each instance of `mask` is decided by
/// the tile whose interior window contains its barycenter; instances that do
/// not fit inside their owner's patch are passed through unmodified with a
/// warning.
pub fn repair_image(
    model: &Model,
    image: &IntensityImage,
    mask: &BinaryMask,
    plan: &TilePlan,
    thresholds: &Thresholds,
) -> Result<RepairResult, InferError> {
    let (h, w) = (mask.height(), mask.width());
    if plan.height != h || plan.width != w {
        return Err(InferError::PlanMismatch(plan.height, plan.width, h, w));
    }
    let imap = label_instances(mask);
    let regions = imap.regions();

    // Ownership: the unique tile whose interior contains the barycenter.
    let mut owner_of: BTreeMap<u32, usize> = BTreeMap::new();
    for region in &regions {
        let (bx, by) = (region.barycenter.x, region.barycenter.y);
        let tile_idx = plan
            .tiles
            .iter()
            .position(|t| {
                let (r0, c0, r1, c1) = t.interior;
                by >= r0 as f64 && by < r1 as f64 && bx >= c0 as f64 && bx < c1 as f64
            })
            .ok_or_else(|| {
                InferError::BadPlan(format!("no interior window contains barycenter ({bx}, {by})"))
            })?;
        owner_of.insert(region.label, tile_idx);
    }

    let mut aligned = BinaryMask::zeros(h, w);
    let mut removed = BTreeSet::new();
    let mut transforms = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut missing_prob = ProbabilityMask::zeros(h, w);

    for (tile_idx, tile) in plan.tiles.iter().enumerate() {
        let image_patch = crop_image(image, tile);
        let mask_patch = crop_mask(mask, tile);
        let output = model.forward(&image_patch, &mask_patch)?;

        // Stitch per-pixel heads by interior ownership.
        let (ir0, ic0, ir1, ic1) = tile.interior;
        for r in ir0..ir1 {
            for c in ic0..ic1 {
                missing_prob.data_mut()[[r, c]] = output.missing.get(r - tile.row0, c - tile.col0);
            }
        }

        for region in &regions {
            if owner_of[&region.label] != tile_idx {
                continue;
            }
            let (br0, bc0, br1, bc1) = region.bounding_box();
            let contained = br0 >= tile.row0
                && bc0 >= tile.col0
                && br1 < tile.row0 + tile.patch_h
                && bc1 < tile.col0 + tile.patch_w;
            if !contained {
                warnings.push(format!(
                    "instance {} exceeds its owner patch; passed through unmodified",
                    region.label
                ));
                for &(r, c) in &region.pixels {
                    aligned.set(r, c, 1);
                }
                transforms.insert(region.label, SimilarityTransform::identity());
                continue;
            }
            // Shift the region into patch coordinates.
            let local = InstanceRegion {
                label: region.label,
                pixels: region
                    .pixels
                    .iter()
                    .map(|&(r, c)| (r - tile.row0, c - tile.col0))
                    .collect(),
                barycenter: crate::raster::Point::new(
                    region.barycenter.x - tile.col0 as f64,
                    region.barycenter.y - tile.row0 as f64,
                ),
            };
            match decide_instance(&output, &local, thresholds)? {
                None => {
                    removed.insert(region.label);
                }
                Some(t) => {
                    splat_warped_instance(
                        &mut aligned,
                        local.to_mask(tile.patch_h, tile.patch_w).data(),
                        &t,
                        local.barycenter,
                        tile.row0,
                        tile.col0,
                    );
                    transforms.insert(region.label, t);
                }
            }
        }
    }

    let missing_polygons = extract_missing_polygons(&missing_prob, thresholds);
    let final_map = merge_final(&aligned, &missing_polygons)?;
    Ok(RepairResult {
        aligned_map: aligned,
        final_map,
        removed_labels: removed,
        per_instance_transforms: transforms,
        missing_polygons,
        warnings,
    })
}

/// Convenience: plan a default tiling for the image and repair it.
pub fn repair_scene(
    model: &Model,
    image: &IntensityImage,
    mask: &BinaryMask,
    patch_size: usize,
    border: usize,
    thresholds: &Thresholds,
) -> Result<RepairResult, InferError> {
    let plan = plan_tiles(image.height(), image.width(), patch_size, border)?;
    repair_image(model, image, mask, &plan, thresholds)
}

/// Build the 4-channel model input (re-exported for the companion crate).
pub fn stack_input(image: &IntensityImage, mask: &BinaryMask) -> Result<Array3<f32>, ModelError> {
    Model::assemble_input(image, mask)
}
