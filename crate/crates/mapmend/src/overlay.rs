//! Repair overlay rendering: input annotations in red, corrected map in
//! cyan, removed annotations in yellow, segmented (added) buildings in pink,
//! over the intensity image.

use crate::png::to_rgb8;
use image::{Rgb, RgbImage};
use mapmend_core::infer::RepairResult;
use mapmend_core::raster::{label_instances, rasterize_polygons, BinaryMask, IntensityImage};

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const CYAN: Rgb<u8> = Rgb([0, 255, 255]);
pub const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);
pub const PINK: Rgb<u8> = Rgb([255, 105, 180]);

/// Paint the repair outcome over the image. Later layers win where they
/// overlap: input, removed, corrected, added.
pub fn render_overlay(
    image: &IntensityImage,
    input_mask: &BinaryMask,
    result: &RepairResult,
) -> RgbImage {
    let mut canvas = to_rgb8(image);
    let (h, w) = (image.height(), image.width());

    let paint = |canvas: &mut RgbImage, mask: &BinaryMask, color: Rgb<u8>| {
        for r in 0..h {
            for c in 0..w {
                if mask.get(r, c) == 1 {
                    canvas.put_pixel(c as u32, r as u32, color);
                }
            }
        }
    };

    paint(&mut canvas, input_mask, RED);

    let mut removed = BinaryMask::zeros(h, w);
    let imap = label_instances(input_mask);
    for region in imap.regions() {
        if result.removed_labels.contains(&region.label) {
            for &(r, c) in &region.pixels {
                removed.set(r, c, 1);
            }
        }
    }
    paint(&mut canvas, &removed, YELLOW);
    paint(&mut canvas, &result.aligned_map, CYAN);
    let added = rasterize_polygons(&result.missing_polygons, w, h).mask;
    paint(&mut canvas, &added, PINK);
    canvas
}
