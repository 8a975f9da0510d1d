//! Raster file IO: 8-bit single-channel PNG for masks (0 -> 0, 1 -> 255),
//! 8-bit RGB PNG or TIFF for intensity images.

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use mapmend_core::raster::{BinaryMask, IntensityImage};
use ndarray::{Array2, Array3};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterIoError {
    #[error("io {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("image {path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("invalid raster {path}: {msg}")]
    Invalid { path: String, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> RasterIoError {
    RasterIoError::Io { path: path.display().to_string(), source }
}

fn img_err(path: &Path, source: image::ImageError) -> RasterIoError {
    RasterIoError::Image { path: path.display().to_string(), source }
}

pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<(), RasterIoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let mut img = GrayImage::new(mask.width() as u32, mask.height() as u32);
    for (r, row) in img.rows_mut().enumerate() {
        for (c, px) in row.enumerate() {
            px.0[0] = mask.get(r, c) * 255;
        }
    }
    img.save(path).map_err(|e| img_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask, RasterIoError> {
    let img = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .decode()
        .map_err(|e| img_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array2::<u8>::zeros((h, w));
    for (r, row) in img.rows().enumerate() {
        for (c, px) in row.enumerate() {
            data[[r, c]] = u8::from(px.0[0] >= 128);
        }
    }
    BinaryMask::new(data)
        .map_err(|e| RasterIoError::Invalid { path: path.display().to_string(), msg: e.to_string() })
}

pub fn write_image_png(image: &IntensityImage, path: &Path) -> Result<(), RasterIoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    to_rgb8(image).save(path).map_err(|e| img_err(path, e))
}

pub fn to_rgb8(image: &IntensityImage) -> RgbImage {
    let mut img = RgbImage::new(image.width() as u32, image.height() as u32);
    for (r, row) in img.rows_mut().enumerate() {
        for (c, px) in row.enumerate() {
            for ch in 0..3 {
                px.0[ch] = (image.data()[[ch, r, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Read an RGB intensity image from PNG or TIFF. Grayscale sources are
/// replicated across channels.
pub fn read_image(path: &Path) -> Result<IntensityImage, RasterIoError> {
    let dynamic = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .decode()
        .map_err(|e| img_err(path, e))?;
    Ok(from_dynamic(&dynamic))
}

pub fn from_dynamic(dynamic: &DynamicImage) -> IntensityImage {
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Array3::<f32>::zeros((3, h, w));
    for (r, row) in rgb.rows().enumerate() {
        for (c, px) in row.enumerate() {
            for ch in 0..3 {
                data[[ch, r, c]] = px.0[ch] as f32 / 255.0;
            }
        }
    }
    IntensityImage::new(data).expect("u8/255 stays in [0,1]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_png_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mask = BinaryMask::zeros(33, 47);
        for r in 0..33 {
            for c in 0..47 {
                if rng.gen_bool(0.4) {
                    mask.set(r, c, 1);
                }
            }
        }
        write_mask_png(&mask, &path).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }

    #[test]
    fn image_png_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.png");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array3::from_shape_fn((3, 20, 24), |_| rng.gen_range(0.0f32..1.0));
        let image = IntensityImage::new(data).unwrap();
        write_image_png(&image, &path).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in image.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn tiff_images_are_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.tif");
        let img = RgbImage::from_fn(16, 12, |x, y| image::Rgb([x as u8 * 10, y as u8 * 20, 3]));
        img.save(&path).unwrap();
        let loaded = read_image(&path).unwrap();
        assert_eq!((loaded.height(), loaded.width()), (12, 16));
        assert!((loaded.data()[[0, 0, 3]] - 30.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = read_mask_png(Path::new("/nonexistent/m.png")).unwrap_err();
        assert!(matches!(err, RasterIoError::Io { .. }));
    }
}
