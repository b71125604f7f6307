//! Image file input/output: reads 8-bit grayscale or RGB PNG and PGM,
//! writes binary PGM.

use super::{to_grayscale, GrayImage};
use crate::error::{Error, Result};
use std::path::Path;

/// Loads a PNG or PGM file as a grayscale image. RGB inputs go through the
/// BT.601 conversion of [`to_grayscale`]; already-gray files load as-is.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let dynimg = ::image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    match dynimg {
        ::image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let pixels = img.into_raw().into_iter().map(|v| v as f32).collect();
            GrayImage::new(w, h, pixels)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data: Vec<f32> = rgb.into_raw().into_iter().map(|v| v as f32).collect();
            to_grayscale(&data, w, h)
        }
    }
}

/// Saves as binary (P5) PGM, quantizing pixels to 8 bits.
pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let q = img.quantized();
    let bytes: Vec<u8> = q.pixels().iter().map(|&p| p as u8).collect();
    let buffer = ::image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("pixel count matches dimensions");
    buffer
        .save_with_format(path, ::image::ImageFormat::Pnm)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let pixels: Vec<f32> = (0..64).map(|i| (i * 4) as f32).collect();
        let img = GrayImage::new(8, 8, pixels).unwrap();
        save_pgm(&img, &path).unwrap();
        let back = load_gray(&path).unwrap();
        assert_eq!(back.width(), 8);
        assert_eq!(back.height(), 8);
        assert_eq!(back.pixels(), img.pixels());
    }

    #[test]
    fn png_rgb_goes_through_bt601() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rgb = ::image::RgbImage::new(2, 1);
        rgb.put_pixel(0, 0, ::image::Rgb([255, 0, 0]));
        rgb.put_pixel(1, 0, ::image::Rgb([10, 10, 10]));
        rgb.save(&path).unwrap();
        let img = load_gray(&path).unwrap();
        assert_eq!(img.get(0, 0), 76.0);
        assert_eq!(img.get(1, 0), 10.0);
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(load_gray(Path::new("/nonexistent/nope.png")).is_err());
    }
}
