//! Random patch extraction with seeded, non-repeating offsets.

use super::GrayImage;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// A patch together with the top-left offset it was cut at.
#[derive(Debug, Clone)]
pub struct ExtractedPatch {
    pub x: usize,
    pub y: usize,
    pub image: GrayImage,
}

/// Cuts up to `max_count` square patches at uniformly random, non-repeating
/// top-left offsets. Deterministic for a fixed seed: offsets come from a
/// partial Fisher-Yates shuffle of the full offset grid.
pub fn extract_patches(
    img: &GrayImage,
    side: usize,
    max_count: usize,
    seed: u64,
) -> Result<Vec<ExtractedPatch>> {
    if side == 0 {
        return Err(Error::InvalidArgument("patch side must be positive".into()));
    }
    if img.width() < side || img.height() < side {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than patch side {side}",
            img.width(),
            img.height()
        )));
    }
    let nx = img.width() - side + 1;
    let ny = img.height() - side + 1;
    let total = nx * ny;
    let count = max_count.min(total);
    let mut rng = SplitMix64::new(seed);
    let offsets = rng.sample_indices(total, count);
    offsets
        .into_iter()
        .map(|o| {
            let (x, y) = (o % nx, o / nx);
            Ok(ExtractedPatch { x, y, image: img.crop_square(x, y, side)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(w: usize, h: usize) -> GrayImage {
        let pixels: Vec<f32> =
            (0..w * h).map(|i| if (i % w + i / w) % 2 == 0 { 255.0 } else { 0.0 }).collect();
        GrayImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn large_image_yields_max_count() {
        let img = checkerboard(100, 100);
        let patches = extract_patches(&img, 16, 100, 9).unwrap();
        assert_eq!(patches.len(), 100);
    }

    #[test]
    fn exact_size_image_yields_one_patch() {
        let img = checkerboard(16, 16);
        let patches = extract_patches(&img, 16, 100, 9).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!((patches[0].x, patches[0].y), (0, 0));
        assert_eq!(patches[0].image.pixels(), img.pixels());
    }

    #[test]
    fn same_seed_same_offsets() {
        let img = checkerboard(40, 30);
        let a = extract_patches(&img, 8, 50, 1234).unwrap();
        let b = extract_patches(&img, 8, 50, 1234).unwrap();
        let c = extract_patches(&img, 8, 50, 4321).unwrap();
        let xy = |v: &[ExtractedPatch]| v.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>();
        assert_eq!(xy(&a), xy(&b));
        assert_ne!(xy(&a), xy(&c));
    }

    #[test]
    fn offsets_are_unique() {
        let img = checkerboard(24, 24);
        let patches = extract_patches(&img, 8, 200, 5).unwrap();
        let mut seen: Vec<(usize, usize)> = patches.iter().map(|p| (p.x, p.y)).collect();
        let n = seen.len();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn rejects_undersized_image() {
        let img = checkerboard(8, 20);
        assert!(extract_patches(&img, 16, 10, 0).is_err());
    }
}
