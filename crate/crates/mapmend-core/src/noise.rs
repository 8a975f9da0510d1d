//! Seeded corruption of clean annotation masks into self-supervised training
//! pairs: per-instance similarity transforms, one global transform, footprint
//! removal, and footprint injection.
//!
//! All randomness flows from `CorruptionSpec::seed` through one ChaCha stream
//! in a fixed draw order (removal decisions, per-survivor transforms, the
//! global transform, then injection placement), so a fixed seed reproduces a
//! sample bit for bit. Raw draws are taken in `[-1, 1]` and scaled by the
//! spec bounds, which keeps the draw sequence identical when only the bounds
//! change — displacement sweeps with a shared seed then vary magnitudes, not
//! directions.

use crate::geometry::{warp_instance, GeometryError, SimilarityTransform};
use crate::raster::{label_instances, BinaryMask, IntensityImage, Point, Polygon, RasterError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid corruption spec: {field}: {msg}")]
    InvalidSpec { field: &'static str, msg: String },
    #[error("image {0}x{1} and mask {2}x{3} dimensions differ")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Bounds and probabilities for one corruption draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Maximum absolute per-instance translation, pixels.
    pub max_disp: f64,
    /// Maximum absolute per-instance rotation, radians.
    pub max_rot: f64,
    /// Per-instance scale range `(lo, hi)`.
    pub scale_range: (f64, f64),
    /// Probability of dropping each instance from the noisy mask.
    pub p_remove: f64,
    /// Probability of attempting one injected footprint per 64 px grid cell.
    pub p_inject: f64,
    /// Maximum absolute global translation, pixels.
    pub global_max_disp: f64,
    /// Maximum absolute global rotation, radians.
    pub global_max_rot: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            max_disp: 64.0,
            max_rot: std::f64::consts::FRAC_PI_6,
            scale_range: (0.8, 1.25),
            p_remove: 0.1,
            p_inject: 0.1,
            global_max_disp: 16.0,
            global_max_rot: std::f64::consts::PI / 36.0,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        let check_prob = |field: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(NoiseError::InvalidSpec { field, msg: format!("{v} not in [0,1]") })
            }
        };
        check_prob("p_remove", self.p_remove)?;
        check_prob("p_inject", self.p_inject)?;
        let check_bound = |field: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(NoiseError::InvalidSpec { field, msg: format!("{v} must be >= 0") })
            }
        };
        check_bound("max_disp", self.max_disp)?;
        check_bound("max_rot", self.max_rot)?;
        check_bound("global_max_disp", self.global_max_disp)?;
        check_bound("global_max_rot", self.global_max_rot)?;
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(NoiseError::InvalidSpec {
                field: "scale_range",
                msg: format!("need 0 < lo <= hi, got ({lo}, {hi})"),
            });
        }
        Ok(())
    }

    /// Identity corruption: no transforms, removals or injections.
    pub fn none(seed: u64) -> Self {
        CorruptionSpec {
            max_disp: 0.0,
            max_rot: 0.0,
            scale_range: (1.0, 1.0),
            p_remove: 0.0,
            p_inject: 0.0,
            global_max_disp: 0.0,
            global_max_rot: 0.0,
            seed,
        }
    }
}

/// Exact bookkeeping of one corruption draw — the self-supervision ground
/// truth. Surviving ground-truth instances appear in `per_instance`, removed
/// ones in `removed_labels`; the two never overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub per_instance: BTreeMap<u32, SimilarityTransform>,
    pub removed_labels: BTreeSet<u32>,
    /// Injected footprints, with vertices in final mask coordinates.
    pub injected_shapes: Vec<Polygon>,
    pub global_transform: SimilarityTransform,
}

/// One self-supervised training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: IntensityImage,
    pub noisy_mask: BinaryMask,
    pub gt_mask: BinaryMask,
    /// True (ground-truth-aligned) footprints of removed instances.
    pub missing_gt: BinaryMask,
    /// Injected footprints as they appear in the noisy mask.
    pub obsolete_gt: BinaryMask,
    pub record: CorruptionRecord,
}

/// The anchor of the global transform: the image center.
pub fn global_anchor(height: usize, width: usize) -> Point {
    Point::new(width as f64 / 2.0, height as f64 / 2.0)
}

const INJECT_CELL: usize = 64;
const INJECT_ATTEMPTS: usize = 10;
const INJECT_MIN_SIDE: usize = 10;
const INJECT_MAX_SIDE: usize = 60;
/// Clearance kept around injected shapes so they never merge with existing
/// instances under 8-connectivity.
const INJECT_MARGIN: usize = 2;

/// Corrupt a clean mask into a training pair. Deterministic in the spec seed.
pub fn corrupt(
    image: &IntensityImage,
    gt_mask: &BinaryMask,
    spec: &CorruptionSpec,
) -> Result<TrainingSample, NoiseError> {
    spec.validate()?;
    let (h, w) = (gt_mask.height(), gt_mask.width());
    if image.height() != h || image.width() != w {
        return Err(NoiseError::DimensionMismatch(image.height(), image.width(), h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let imap = label_instances(gt_mask);
    let regions = imap.regions();

    // Fixed draw order: removals, survivor transforms, global transform,
    // injection placement.
    let removed: BTreeSet<u32> = regions
        .iter()
        .map(|r| (r.label, rng.gen::<f64>() < spec.p_remove))
        .filter(|&(_, drop)| drop)
        .map(|(l, _)| l)
        .collect();

    let mut per_instance = BTreeMap::new();
    for region in &regions {
        if removed.contains(&region.label) {
            continue;
        }
        let (lo, hi) = spec.scale_range;
        let t = SimilarityTransform::new(
            rng.gen_range(-1.0..=1.0) * spec.max_disp,
            rng.gen_range(-1.0..=1.0) * spec.max_disp,
            rng.gen_range(-1.0..=1.0) * spec.max_rot,
            lo + rng.gen::<f64>() * (hi - lo),
        )?;
        per_instance.insert(region.label, t);
    }

    let global = SimilarityTransform::new(
        rng.gen_range(-1.0..=1.0) * spec.global_max_disp,
        rng.gen_range(-1.0..=1.0) * spec.global_max_disp,
        rng.gen_range(-1.0..=1.0) * spec.global_max_rot,
        1.0,
    )?;

    // Warp each surviving instance about its own barycenter.
    let mut survivors = BinaryMask::zeros(h, w);
    for region in &regions {
        let Some(t) = per_instance.get(&region.label) else { continue };
        let warped = if t.is_identity() {
            region.to_mask(h, w)
        } else {
            warp_instance(&region.to_mask(h, w), t, region.barycenter)?
        };
        survivors.union_with(&warped.threshold(0.5))?;
    }

    // The global transform moves every real annotation.
    let anchor = global_anchor(h, w);
    let moved_survivors = if global.is_identity() {
        survivors
    } else {
        warp_instance(&survivors.to_probability(), &global, anchor)?.threshold(0.5)
    };

    // Inject synthetic footprints after the global move, on ground that is
    // free in the final frame: never overlapping the ground truth, the moved
    // survivors, or each other. Injections model annotations with no real
    // building, so they are placed directly in final coordinates.
    let mut blocked = gt_mask.clone();
    blocked.union_with(&moved_survivors)?;
    let mut injected = BinaryMask::zeros(h, w);
    let mut injected_shapes = Vec::new();
    if spec.p_inject > 0.0 {
        for cell_r in (0..h).step_by(INJECT_CELL) {
            for cell_c in (0..w).step_by(INJECT_CELL) {
                if rng.gen::<f64>() >= spec.p_inject {
                    continue;
                }
                if let Some(shape) = try_place_shape(&mut rng, &blocked, (h, w), (cell_r, cell_c))
                {
                    draw_shape(&mut injected, &shape);
                    draw_shape(&mut blocked, &shape);
                    injected_shapes.push(shape.to_polygon());
                }
            }
        }
    }

    let mut noisy_mask = moved_survivors;
    noisy_mask.union_with(&injected)?;
    let obsolete_gt = injected;

    let mut missing_gt = BinaryMask::zeros(h, w);
    for region in &regions {
        if removed.contains(&region.label) {
            for &(r, c) in &region.pixels {
                missing_gt.set(r, c, 1);
            }
        }
    }

    Ok(TrainingSample {
        image: image.clone(),
        noisy_mask,
        gt_mask: gt_mask.clone(),
        missing_gt,
        obsolete_gt,
        record: CorruptionRecord {
            per_instance,
            removed_labels: removed,
            injected_shapes,
            global_transform: global,
        },
    })
}

/// IoU between a fresh corruption of `gt_mask` and `gt_mask` itself — the
/// uncorrected baseline score for a given noise level.
pub fn displacement_iou_baseline(
    gt_mask: &BinaryMask,
    spec: &CorruptionSpec,
) -> Result<f64, NoiseError> {
    let image = IntensityImage::zeros(gt_mask.height(), gt_mask.width());
    let sample = corrupt(&image, gt_mask, spec)?;
    Ok(crate::raster::iou(&sample.noisy_mask, gt_mask)?)
}

/// Derive a per-sample seed from a base seed and stream/index coordinates
/// (splitmix64 finalizer over the combination).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An axis-aligned injected footprint: a rectangle, optionally with one
/// quadrant removed (an L).
#[derive(Debug, Clone)]
struct InjectShape {
    r0: usize,
    c0: usize,
    height: usize,
    width: usize,
    /// Removed quadrant for L-shapes: 0 = none, 1..=4 = NE, SE, SW, NW.
    notch: u8,
}

impl InjectShape {
    fn contains(&self, r: usize, c: usize) -> bool {
        if r < self.r0 || c < self.c0 || r >= self.r0 + self.height || c >= self.c0 + self.width {
            return false;
        }
        if self.notch == 0 {
            return true;
        }
        let top = r < self.r0 + self.height / 2;
        let right = c >= self.c0 + self.width / 2;
        let quadrant = match (top, right) {
            (true, true) => 1,
            (false, true) => 2,
            (false, false) => 3,
            (true, false) => 4,
        };
        quadrant != self.notch
    }

    fn to_polygon(&self) -> Polygon {
        let (r0, c0) = (self.r0 as f64, self.c0 as f64);
        let (r1, c1) = ((self.r0 + self.height) as f64, (self.c0 + self.width) as f64);
        let (rm, cm) = ((self.r0 + self.height / 2) as f64, (self.c0 + self.width / 2) as f64);
        let pts = match self.notch {
            0 => vec![(c0, r0), (c1, r0), (c1, r1), (c0, r1)],
            1 => vec![(c0, r0), (cm, r0), (cm, rm), (c1, rm), (c1, r1), (c0, r1)],
            2 => vec![(c0, r0), (c1, r0), (c1, rm), (cm, rm), (cm, r1), (c0, r1)],
            3 => vec![(c0, r0), (c1, r0), (c1, r1), (cm, r1), (cm, rm), (c0, rm)],
            _ => vec![(cm, r0), (c1, r0), (c1, r1), (c0, r1), (c0, rm), (cm, rm)],
        };
        Polygon::new(pts.into_iter().map(|(x, y)| Point::new(x, y)).collect())
    }
}

fn draw_shape(mask: &mut BinaryMask, shape: &InjectShape) {
    for r in shape.r0..shape.r0 + shape.height {
        for c in shape.c0..shape.c0 + shape.width {
            if shape.contains(r, c) {
                mask.set(r, c, 1);
            }
        }
    }
}

fn try_place_shape(
    rng: &mut ChaCha8Rng,
    blocked: &BinaryMask,
    dims: (usize, usize),
    cell: (usize, usize),
) -> Option<InjectShape> {
    let (h, w) = dims;
    let max_side = INJECT_MAX_SIDE
        .min(h.saturating_sub(2 * INJECT_MARGIN + 1))
        .min(w.saturating_sub(2 * INJECT_MARGIN + 1));
    if max_side < INJECT_MIN_SIDE {
        return None;
    }
    for _ in 0..INJECT_ATTEMPTS {
        let sh = rng.gen_range(INJECT_MIN_SIDE..=max_side);
        let sw = rng.gen_range(INJECT_MIN_SIDE..=max_side);
        let notch = if rng.gen::<f64>() < 0.5 { 0u8 } else { rng.gen_range(1..=4) };
        let r0 = (cell.0 + rng.gen_range(0..INJECT_CELL)).min(h - sh - INJECT_MARGIN).max(INJECT_MARGIN);
        let c0 = (cell.1 + rng.gen_range(0..INJECT_CELL)).min(w - sw - INJECT_MARGIN).max(INJECT_MARGIN);
        let shape = InjectShape { r0, c0, height: sh, width: sw, notch };
        let clear = (r0 - INJECT_MARGIN..r0 + sh + INJECT_MARGIN)
            .all(|r| (c0 - INJECT_MARGIN..c0 + sw + INJECT_MARGIN).all(|c| blocked.get(r, c) == 0));
        if clear {
            return Some(shape);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::invert;
    use crate::raster::iou;

    fn shapes_gt(h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for (r0, c0, side) in [(12usize, 14usize, 14usize), (60, 30, 18), (90, 90, 12)] {
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    m.set(r, c, 1);
                }
            }
        }
        m
    }

    #[test]
    fn identity_spec_reproduces_ground_truth() {
        let gt = shapes_gt(128, 128);
        let image = IntensityImage::zeros(128, 128);
        let sample = corrupt(&image, &gt, &CorruptionSpec::none(9)).unwrap();
        assert_eq!(sample.noisy_mask, gt);
        assert!(sample.missing_gt.is_empty());
        assert!(sample.obsolete_gt.is_empty());
        assert!(sample.record.removed_labels.is_empty());
        assert!(sample.record.injected_shapes.is_empty());
        assert!(sample.record.per_instance.values().all(|t| t.is_identity()));
    }

    #[test]
    fn total_removal_moves_everything_to_missing_gt() {
        let gt = shapes_gt(128, 128);
        let image = IntensityImage::zeros(128, 128);
        let spec = CorruptionSpec { p_remove: 1.0, ..CorruptionSpec::none(3) };
        let sample = corrupt(&image, &gt, &spec).unwrap();
        assert!(sample.noisy_mask.is_empty());
        assert_eq!(sample.missing_gt, gt);
        assert!(sample.record.per_instance.is_empty());
        assert_eq!(sample.record.removed_labels.len(), 3);
    }

    #[test]
    fn same_seed_is_bit_identical_and_different_seed_differs() {
        let gt = shapes_gt(128, 128);
        let image = IntensityImage::zeros(128, 128);
        let spec = CorruptionSpec { seed: 42, ..CorruptionSpec::default() };
        let a = corrupt(&image, &gt, &spec).unwrap();
        let b = corrupt(&image, &gt, &spec).unwrap();
        assert_eq!(a, b);
        let c = corrupt(&image, &gt, &CorruptionSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.record, c.record);
    }

    #[test]
    fn recorded_transforms_respect_bounds() {
        let gt = shapes_gt(128, 128);
        let image = IntensityImage::zeros(128, 128);
        let spec = CorruptionSpec {
            max_disp: 24.0,
            max_rot: 0.4,
            scale_range: (0.85, 1.2),
            p_remove: 0.2,
            ..CorruptionSpec::default()
        };
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 1000 {
            let sample = corrupt(&image, &gt, &CorruptionSpec { seed, ..spec }).unwrap();
            for t in sample.record.per_instance.values() {
                assert!(t.tx.abs() <= spec.max_disp && t.ty.abs() <= spec.max_disp);
                assert!(t.theta.abs() <= spec.max_rot);
                assert!(t.scale >= spec.scale_range.0 && t.scale <= spec.scale_range.1);
                checked += 1;
            }
            let g = sample.record.global_transform;
            assert!(g.tx.abs() <= spec.global_max_disp && g.ty.abs() <= spec.global_max_disp);
            assert!(g.theta.abs() <= spec.global_max_rot);
            assert_eq!(g.scale, 1.0);
            seed += 1;
        }
    }

    #[test]
    fn empty_ground_truth_yields_empty_survivors_but_allows_injections() {
        let gt = BinaryMask::zeros(128, 128);
        let image = IntensityImage::zeros(128, 128);
        let spec = CorruptionSpec { p_inject: 1.0, seed: 5, ..CorruptionSpec::default() };
        let sample = corrupt(&image, &gt, &spec).unwrap();
        assert!(sample.missing_gt.is_empty());
        assert!(sample.record.per_instance.is_empty());
        assert!(!sample.record.injected_shapes.is_empty());
        assert!(!sample.obsolete_gt.is_empty());
    }

    #[test]
    fn obsolete_is_subset_of_noisy_and_disjoint_from_gt() {
        let gt = shapes_gt(128, 128);
        let image = IntensityImage::zeros(128, 128);
        for seed in 0..20 {
            let spec = CorruptionSpec { p_inject: 0.8, seed, ..CorruptionSpec::default() };
            let sample = corrupt(&image, &gt, &spec).unwrap();
            for r in 0..128 {
                for c in 0..128 {
                    if sample.obsolete_gt.get(r, c) == 1 {
                        assert_eq!(sample.noisy_mask.get(r, c), 1);
                    }
                    if sample.missing_gt.get(r, c) == 1 {
                        assert_eq!(sample.gt_mask.get(r, c), 1);
                    }
                }
            }
            // Injected footprints never touch the ground truth.
            let mut trimmed = sample.obsolete_gt.clone();
            trimmed.subtract(&sample.gt_mask).unwrap();
            assert_eq!(trimmed, sample.obsolete_gt);
        }
    }

    #[test]
    fn inverse_transforms_recover_ground_truth_instances() {
        let gt = shapes_gt(192, 192);
        let image = IntensityImage::zeros(192, 192);
        let spec = CorruptionSpec {
            max_disp: 20.0,
            p_remove: 0.0,
            p_inject: 0.0,
            seed: 17,
            ..CorruptionSpec::default()
        };
        let sample = corrupt(&image, &gt, &spec).unwrap();
        let gt_regions = label_instances(&gt).regions();
        let noisy_regions = label_instances(&sample.noisy_mask).regions();
        let g = sample.record.global_transform;
        let anchor = global_anchor(192, 192);
        for region in &gt_regions {
            let t = sample.record.per_instance[&region.label];
            // Reconstruct where this instance landed, then find the actual
            // noisy component with the largest overlap.
            let expected = {
                let inst =
                    warp_instance(&region.to_mask(192, 192), &t, region.barycenter).unwrap();
                warp_instance(&inst.threshold(0.5).to_probability(), &g, anchor)
                    .unwrap()
                    .threshold(0.5)
            };
            let best = noisy_regions
                .iter()
                .max_by_key(|nr| {
                    nr.pixels.iter().filter(|&&(r, c)| expected.get(r, c) == 1).count()
                })
                .unwrap();
            let noisy_inst = best.to_mask(192, 192);
            let (inv_g, inv_g_anchor) = invert(&g, anchor).unwrap();
            let undone_global = warp_instance(&noisy_inst, &inv_g, inv_g_anchor).unwrap();
            let (inv_t, inv_t_anchor) = invert(&t, region.barycenter).unwrap();
            let recovered = warp_instance(&undone_global, &inv_t, inv_t_anchor).unwrap();
            let score =
                iou(&recovered.threshold(0.5), &region.to_mask(192, 192).threshold(0.5)).unwrap();
            assert!(score >= 0.9, "label {}: recovery IoU {score}", region.label);
        }
    }

    #[test]
    fn baseline_iou_is_one_without_noise_and_decreases_with_displacement() {
        let gt = shapes_gt(128, 128);
        assert_eq!(displacement_iou_baseline(&gt, &CorruptionSpec::none(1)).unwrap(), 1.0);
        let mut last = f64::INFINITY;
        for max_disp in [8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0, 64.0] {
            let spec = CorruptionSpec {
                max_disp,
                p_remove: 0.0,
                p_inject: 0.0,
                seed: 77,
                ..CorruptionSpec::default()
            };
            let v = displacement_iou_baseline(&gt, &spec).unwrap();
            assert!(v <= last + 1e-12, "IoU rose from {last} to {v} at {max_disp} px");
            last = v;
        }
        assert!(last < 0.5);
    }

    #[test]
    fn invalid_spec_is_rejected_with_field_name() {
        let gt = shapes_gt(128, 128);
        let image = IntensityImage::zeros(128, 128);
        let spec = CorruptionSpec { p_remove: 1.5, ..CorruptionSpec::default() };
        let err = corrupt(&image, &gt, &spec).unwrap_err();
        assert!(err.to_string().contains("p_remove"));
    }

    #[test]
    fn derive_seed_spreads_streams() {
        let a = derive_seed(1, 0, 0);
        let b = derive_seed(1, 0, 1);
        let c = derive_seed(1, 1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(1, 0, 0));
    }
}
