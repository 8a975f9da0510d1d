//! Synthetic textured-shapes dataset: CPU-scale image/ground-truth pairs for
//! training and tests. Each sample renders a few non-overlapping rectangles
//! and L-shapes as textured regions over a textured background; the exact
//! footprints form the ground-truth mask. Fills are textured (noise plus a
//! low-frequency wave) rather than flat so alignment cannot be solved by
//! color thresholding alone.

use crate::noise::derive_seed;
use crate::raster::{BinaryMask, IntensityImage};
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapesError {
    #[error("invalid shapes dataset request: {0}")]
    InvalidArgs(String),
}

const MIN_SHAPES: usize = 3;
const MAX_SHAPES: usize = 8;
const MIN_SIDE: usize = 10;
const MAX_SIDE: usize = 40;
/// Keep shapes away from the border so corruption cannot push them out of
/// frame entirely (scaled down for small canvases).
fn border_margin(size: usize) -> usize {
    (size / 8).clamp(8, 24)
}
/// Separation between shapes (8-connectivity safe).
const GAP: usize = 3;

/// Background brightness stays below this; shapes start above
/// `SHAPE_BRIGHTNESS_LO`, guaranteeing a mean-intensity contrast well over
/// 0.15 between any instance and its surroundings.
const BG_BRIGHTNESS: (f32, f32) = (0.18, 0.32);
const SHAPE_BRIGHTNESS: (f32, f32) = (0.55, 0.85);

/// Generate `n_samples` image/mask pairs of `size` x `size` pixels.
/// Deterministic in `seed`. `size` must be divisible by 16.
pub fn generate_shapes_dataset(
    n_samples: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(IntensityImage, BinaryMask)>, ShapesError> {
    if n_samples == 0 {
        return Err(ShapesError::InvalidArgs("n_samples must be >= 1".into()));
    }
    if size % 16 != 0 {
        return Err(ShapesError::InvalidArgs(format!("size {size} not divisible by 16")));
    }
    if size < 2 * border_margin(size) + MIN_SIDE + 2 {
        return Err(ShapesError::InvalidArgs(format!("size {size} too small for shapes")));
    }
    Ok((0..n_samples).map(|i| generate_sample(size, derive_seed(seed, 0, i as u64))).collect())
}

fn generate_sample(size: usize, seed: u64) -> (IntensityImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Array3::<f32>::zeros((3, size, size));
    let mut mask = BinaryMask::zeros(size, size);

    // Textured background: per-channel base, a slow diagonal wave, and
    // per-pixel noise.
    let bg_brightness = rng.gen_range(BG_BRIGHTNESS.0..BG_BRIGHTNESS.1);
    let bg_tint: [f32; 3] = [
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
    ];
    let wave_freq = rng.gen_range(0.02..0.08);
    let wave_phase = rng.gen_range(0.0..std::f32::consts::TAU);
    for r in 0..size {
        for c in 0..size {
            let wave = 0.02 * ((r as f32 + 1.7 * c as f32) * wave_freq + wave_phase).sin();
            for ch in 0..3 {
                let noise = rng.gen_range(-0.025f32..0.025);
                image[[ch, r, c]] = (bg_brightness + bg_tint[ch] + wave + noise).clamp(0.0, 1.0);
            }
        }
    }

    let margin = border_margin(size);
    let target = rng.gen_range(MIN_SHAPES..=MAX_SHAPES);
    let max_side = MAX_SIDE.min((size - 2 * margin) / 2).max(MIN_SIDE);
    let mut placed = 0;
    let mut guard = 0;
    while placed < target && guard < 200 {
        guard += 1;
        let sh = rng.gen_range(MIN_SIDE..=max_side);
        let sw = rng.gen_range(MIN_SIDE..=max_side);
        let r0 = rng.gen_range(margin..=size - margin - sh);
        let c0 = rng.gen_range(margin..=size - margin - sw);
        let notch: u8 = if rng.gen::<f64>() < 0.5 { 0 } else { rng.gen_range(1..=4) };
        let clear = (r0 - GAP..r0 + sh + GAP)
            .all(|r| (c0 - GAP..c0 + sw + GAP).all(|c| mask.get(r, c) == 0));
        if !clear {
            continue;
        }
        // Distinct mean color per shape, clearly brighter than background.
        let brightness = rng.gen_range(SHAPE_BRIGHTNESS.0..SHAPE_BRIGHTNESS.1);
        let tint: [f32; 3] = [
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        ];
        let tex_freq = rng.gen_range(0.15..0.6);
        let tex_phase = rng.gen_range(0.0..std::f32::consts::TAU);
        for r in r0..r0 + sh {
            for c in c0..c0 + sw {
                if !in_notched_rect(r, c, r0, c0, sh, sw, notch) {
                    continue;
                }
                mask.set(r, c, 1);
                let tex = 0.03 * ((r as f32 + 0.8 * c as f32) * tex_freq + tex_phase).sin();
                for ch in 0..3 {
                    let noise = rng.gen_range(-0.03f32..0.03);
                    image[[ch, r, c]] = (brightness + tint[ch] + tex + noise).clamp(0.0, 1.0);
                }
            }
        }
        placed += 1;
    }

    (IntensityImage::new(image).expect("values are clamped"), mask)
}

fn in_notched_rect(
    r: usize,
    c: usize,
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
    notch: u8,
) -> bool {
    if notch == 0 {
        return true;
    }
    let top = r < r0 + h / 2;
    let right = c >= c0 + w / 2;
    let quadrant = match (top, right) {
        (true, true) => 1,
        (false, true) => 2,
        (false, false) => 3,
        (true, false) => 4,
    };
    quadrant != notch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::label_instances;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_shapes_dataset(3, 64, 7).unwrap();
        let b = generate_shapes_dataset(3, 64, 7).unwrap();
        assert_eq!(a.len(), 3);
        for ((ia, ma), (ib, mb)) in a.iter().zip(b.iter()) {
            assert_eq!(ia.data(), ib.data());
            assert_eq!(ma, mb);
        }
        let c = generate_shapes_dataset(3, 64, 8).unwrap();
        assert_ne!(a[0].1, c[0].1);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_shapes_dataset(0, 64, 1).is_err());
        assert!(generate_shapes_dataset(1, 100, 1).is_err());
    }

    #[test]
    fn instances_contrast_with_surrounding_background() {
        for (image, mask) in generate_shapes_dataset(6, 128, 11).unwrap() {
            let imap = label_instances(&mask);
            assert!(imap.instance_count() >= MIN_SHAPES);
            assert!(imap.instance_count() <= MAX_SHAPES);
            for region in imap.regions() {
                let brightness = |r: usize, c: usize| {
                    (image.data()[[0, r, c]] + image.data()[[1, r, c]] + image.data()[[2, r, c]])
                        / 3.0
                };
                let inst_mean: f32 = region
                    .pixels
                    .iter()
                    .map(|&(r, c)| brightness(r, c))
                    .sum::<f32>()
                    / region.pixel_count() as f32;
                // Background ring around the bounding box.
                let (r0, c0, r1, c1) = region.bounding_box();
                let lo_r = r0.saturating_sub(6);
                let lo_c = c0.saturating_sub(6);
                let hi_r = (r1 + 6).min(mask.height() - 1);
                let hi_c = (c1 + 6).min(mask.width() - 1);
                let mut bg_sum = 0.0f32;
                let mut bg_n = 0usize;
                for r in lo_r..=hi_r {
                    for c in lo_c..=hi_c {
                        if mask.get(r, c) == 0 {
                            bg_sum += brightness(r, c);
                            bg_n += 1;
                        }
                    }
                }
                let bg_mean = bg_sum / bg_n as f32;
                assert!(
                    (inst_mean - bg_mean).abs() >= 0.15,
                    "instance {} contrast {} too low",
                    region.label,
                    (inst_mean - bg_mean).abs()
                );
            }
        }
    }

    #[test]
    fn shapes_keep_clear_of_the_border() {
        for (_, mask) in generate_shapes_dataset(4, 64, 3).unwrap() {
            let margin = border_margin(64);
            for r in 0..mask.height() {
                for c in 0..mask.width() {
                    if mask.get(r, c) == 1 {
                        assert!(r >= margin && c >= margin);
                        assert!(r < mask.height() - margin);
                    }
                }
            }
        }
    }
}
