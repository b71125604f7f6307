//! The image manipulations under detection, plus grayscale conversion.

use super::GrayImage;
use crate::error::{Error, Result};

/// BT.601 luma conversion from interleaved RGB (values in `[0, 255]`),
/// rounded to integer levels like an 8-bit grayscale save.
pub fn to_grayscale(rgb: &[f32], width: usize, height: usize) -> Result<GrayImage> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected {} rgb values for {width}x{height}, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for px in rgb.chunks_exact(3) {
        let y = 0.299f64 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        pixels.push(y.round().clamp(0.0, 255.0) as f32);
    }
    GrayImage::new(width, height, pixels)
}

/// Bilinear downscale by `factor` in `(0, 1]`, edge-clamped pixel-center
/// sampling, no antialias prefilter. Output extents are
/// `floor(factor * extent)`.
pub fn resize_bilinear(img: &GrayImage, factor: f64) -> Result<GrayImage> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidArgument(format!("resize factor {factor} outside (0, 1]")));
    }
    // The epsilon absorbs cases like 0.7 * 10 = 6.999999... .
    let ow = ((factor * img.width() as f64) + 1e-9).floor() as usize;
    let oh = ((factor * img.height() as f64) + 1e-9).floor() as usize;
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize factor {factor} degenerates {}x{} to {ow}x{oh}",
            img.width(),
            img.height()
        )));
    }
    let sx = img.width() as f64 / ow as f64;
    let sy = img.height() as f64 / oh as f64;
    let mut pixels = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height() - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height() - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width() - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width() - 1);
            let wx = (fx - x0 as f64) as f32;
            let top = img.get(x0, y0) * (1.0 - wx) + img.get(x1, y0) * wx;
            let bot = img.get(x0, y1) * (1.0 - wx) + img.get(x1, y1) * wx;
            pixels.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 255.0));
        }
    }
    GrayImage::new(ow, oh, pixels)
}

/// Reflects an out-of-range coordinate back into `[0, n)`, edge included
/// (`-1 -> 0`, `n -> n-1`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -1 - i } else if i >= n { 2 * n - 1 - i } else { i };
    debug_assert!((0..n).contains(&r));
    r as usize
}

/// Median filter with an odd window and reflect-padded borders.
pub fn median_filter(img: &GrayImage, window: usize) -> Result<GrayImage> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "median window must be odd and at least 3, got {window}"
        )));
    }
    if window > 2 * img.width().min(img.height()) {
        return Err(Error::InvalidArgument(format!(
            "median window {window} too large for {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let r = (window / 2) as isize;
    let mut pixels = Vec::with_capacity(img.width() * img.height());
    let mut buf = Vec::with_capacity(window * window);
    for y in 0..img.height() as isize {
        for x in 0..img.width() as isize {
            buf.clear();
            for dy in -r..=r {
                let sy = reflect(y + dy, img.height());
                for dx in -r..=r {
                    let sx = reflect(x + dx, img.width());
                    buf.push(img.get(sx, sy));
                }
            }
            buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            pixels.push(buf[buf.len() / 2]);
        }
    }
    GrayImage::new(img.width(), img.height(), pixels)
}

/// One tile's equalization mapping. `None` marks a degenerate tile (single
/// occupied histogram bin) that maps pixels through unchanged.
type TileLut = Option<[f32; 256]>;

/// Contrast-limited adaptive histogram equalization.
///
/// Per tile: 256-bin histogram, bins clipped at `clip` times the mean bin
/// height with the excess spread uniformly, then an equalization mapping
/// from the cumulative distribution. Pixel values are produced by bilinear
/// interpolation of the mappings between tile centers.
pub fn clahe(img: &GrayImage, tiles_x: usize, tiles_y: usize, clip: f64) -> Result<GrayImage> {
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::InvalidArgument("clahe needs at least one tile".into()));
    }
    if tiles_x > img.width() || tiles_y > img.height() {
        return Err(Error::InvalidArgument(format!(
            "clahe grid {tiles_x}x{tiles_y} exceeds image {}x{} (needs a pixel per tile)",
            img.width(),
            img.height()
        )));
    }
    if clip < 1.0 {
        return Err(Error::InvalidArgument(format!("clahe clip must be >= 1, got {clip}")));
    }

    let bounds = |i: usize, n: usize, extent: usize| -> (usize, usize) {
        (i * extent / n, (i + 1) * extent / n)
    };

    let mut luts: Vec<TileLut> = Vec::with_capacity(tiles_x * tiles_y);
    let mut centers_x = vec![0.0f64; tiles_x];
    let mut centers_y = vec![0.0f64; tiles_y];
    for (tx, c) in centers_x.iter_mut().enumerate() {
        let (x0, x1) = bounds(tx, tiles_x, img.width());
        *c = (x0 + x1 - 1) as f64 / 2.0;
    }
    for (ty, c) in centers_y.iter_mut().enumerate() {
        let (y0, y1) = bounds(ty, tiles_y, img.height());
        *c = (y0 + y1 - 1) as f64 / 2.0;
    }

    for ty in 0..tiles_y {
        let (y0, y1) = bounds(ty, tiles_y, img.height());
        for tx in 0..tiles_x {
            let (x0, x1) = bounds(tx, tiles_x, img.width());
            luts.push(tile_lut(img, x0, x1, y0, y1, clip));
        }
    }

    let bin = |p: f32| -> usize { (p.round().clamp(0.0, 255.0)) as usize };
    let lookup = |t: usize, p: f32| -> f32 {
        match &luts[t] {
            Some(lut) => lut[bin(p)],
            None => p,
        }
    };
    // Neighbor pair and blend weight along one axis of tile centers.
    let locate = |coord: f64, centers: &[f64]| -> (usize, usize, f64) {
        if coord <= centers[0] {
            return (0, 0, 0.0);
        }
        if coord >= centers[centers.len() - 1] {
            let l = centers.len() - 1;
            return (l, l, 0.0);
        }
        let mut i = 0;
        while centers[i + 1] < coord {
            i += 1;
        }
        let w = (coord - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, w)
    };

    let mut pixels = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        let (ty0, ty1, wy) = locate(y as f64, &centers_y);
        for x in 0..img.width() {
            let (tx0, tx1, wx) = locate(x as f64, &centers_x);
            let p = img.get(x, y);
            let tl = lookup(ty0 * tiles_x + tx0, p) as f64;
            let tr = lookup(ty0 * tiles_x + tx1, p) as f64;
            let bl = lookup(ty1 * tiles_x + tx0, p) as f64;
            let br = lookup(ty1 * tiles_x + tx1, p) as f64;
            let v = (tl * (1.0 - wx) + tr * wx) * (1.0 - wy) + (bl * (1.0 - wx) + br * wx) * wy;
            pixels.push((v as f32).clamp(0.0, 255.0));
        }
    }
    GrayImage::new(img.width(), img.height(), pixels)
}

fn tile_lut(img: &GrayImage, x0: usize, x1: usize, y0: usize, y1: usize, clip: f64) -> TileLut {
    let area = (x1 - x0) * (y1 - y0);
    let mut hist = [0usize; 256];
    for y in y0..y1 {
        for x in x0..x1 {
            hist[(img.get(x, y).round().clamp(0.0, 255.0)) as usize] += 1;
        }
    }
    if hist.iter().filter(|&&h| h > 0).count() <= 1 {
        return None;
    }

    // Clip at clip * (mean bin height), floor 1, and spread the excess.
    let limit = ((clip * area as f64 / 256.0).floor() as usize).max(1);
    let mut excess = 0usize;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let batch = excess / 256;
    let mut residual = excess % 256;
    for h in hist.iter_mut() {
        *h += batch;
    }
    if residual > 0 {
        let step = (256 / residual).max(1);
        let mut i = 0;
        while residual > 0 && i < 256 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }

    let scale = 255.0f64 / area as f64;
    let mut lut = [0.0f32; 256];
    let mut cdf = 0usize;
    for (i, &h) in hist.iter().enumerate() {
        cdf += h;
        lut[i] = ((cdf as f64 * scale).round()).clamp(0.0, 255.0) as f32;
    }
    Some(lut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_image(rng: &mut SplitMix64, w: usize, h: usize) -> GrayImage {
        let pixels: Vec<f32> = (0..w * h).map(|_| (rng.next_below(256)) as f32).collect();
        GrayImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn grayscale_of_gray_is_identity() {
        for v in [0.0f32, 1.0, 77.0, 128.0, 254.0, 255.0] {
            let img = to_grayscale(&[v, v, v], 1, 1).unwrap();
            assert_eq!(img.get(0, 0), v);
        }
    }

    #[test]
    fn grayscale_bt601_red() {
        let img = to_grayscale(&[255.0, 0.0, 0.0], 1, 1).unwrap();
        assert_eq!(img.get(0, 0), 76.0); // round(0.299 * 255)
        let black = to_grayscale(&[0.0, 0.0, 0.0], 1, 1).unwrap();
        assert_eq!(black.get(0, 0), 0.0);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = GrayImage::filled(10, 10, 42.0).unwrap();
        let out = resize_bilinear(&img, 0.8).unwrap();
        assert_eq!(out.width(), 8);
        assert_eq!(out.height(), 8);
        assert!(out.pixels().iter().all(|&p| (p - 42.0).abs() < 1e-4));
    }

    #[test]
    fn resize_dimensions_by_factor() {
        let img = GrayImage::filled(10, 10, 1.0).unwrap();
        let out = resize_bilinear(&img, 0.8).unwrap();
        assert_eq!((out.width(), out.height()), (8, 8));
        // Epsilon guard: 0.7 * 10 must give 7, not 6.
        let out7 = resize_bilinear(&img, 0.7).unwrap();
        assert_eq!((out7.width(), out7.height()), (7, 7));
        assert!(resize_bilinear(&GrayImage::filled(2, 2, 0.0).unwrap(), 0.1).is_err());
    }

    #[test]
    fn resize_matches_pointwise_formula_on_ramp() {
        let w = 12;
        let pixels: Vec<f32> = (0..w * w).map(|i| (i % w) as f32 * 20.0).collect();
        let img = GrayImage::new(w, w, pixels).unwrap();
        let out = resize_bilinear(&img, 0.75).unwrap();
        let s = w as f64 / out.width() as f64;
        for oy in 0..out.height() {
            for ox in 0..out.width() {
                let fx = ((ox as f64 + 0.5) * s - 0.5).clamp(0.0, (w - 1) as f64);
                let fy = ((oy as f64 + 0.5) * s - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(w - 1));
                let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                let want = img.get(x0, y0) as f64 * (1.0 - ax) * (1.0 - ay)
                    + img.get(x1, y0) as f64 * ax * (1.0 - ay)
                    + img.get(x0, y1) as f64 * (1.0 - ax) * ay
                    + img.get(x1, y1) as f64 * ax * ay;
                assert!((out.get(ox, oy) as f64 - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn resize_reproduces_planar_field() {
        // f(x, y) = 30 + 3x + 2y is bilinear, so interior sampling is exact.
        let w = 16;
        let pixels: Vec<f32> =
            (0..w * w).map(|i| 30.0 + 3.0 * (i % w) as f32 + 2.0 * (i / w) as f32).collect();
        let img = GrayImage::new(w, w, pixels).unwrap();
        let out = resize_bilinear(&img, 0.8).unwrap();
        let s = w as f64 / out.width() as f64;
        for oy in 0..out.height() {
            for ox in 0..out.width() {
                let fx = (ox as f64 + 0.5) * s - 0.5;
                let fy = (oy as f64 + 0.5) * s - 0.5;
                let want = 30.0 + 3.0 * fx + 2.0 * fy;
                assert!(
                    (out.get(ox, oy) as f64 - want).abs() < 1e-4,
                    "({ox},{oy}): {} vs {want}",
                    out.get(ox, oy)
                );
            }
        }
    }

    #[test]
    fn median_constant_unchanged() {
        let img = GrayImage::filled(9, 9, 13.0).unwrap();
        let out = median_filter(&img, 5).unwrap();
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn median_removes_isolated_impulse() {
        let mut pixels = vec![0.0f32; 81];
        pixels[4 * 9 + 4] = 255.0;
        let img = GrayImage::new(9, 9, pixels).unwrap();
        let out = median_filter(&img, 5).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn median_rejects_bad_windows() {
        let img = GrayImage::filled(4, 4, 0.0).unwrap();
        assert!(median_filter(&img, 4).is_err());
        assert!(median_filter(&img, 1).is_err());
        assert!(median_filter(&img, 9).is_err()); // > 2 * min(dim)
    }

    #[test]
    fn median_matches_sorting_oracle() {
        let mut rng = SplitMix64::new(31);
        for _ in 0..20 {
            let img = random_image(&mut rng, 9, 9);
            let out = median_filter(&img, 3).unwrap();
            for y in 0..9isize {
                for x in 0..9isize {
                    let mut vals = Vec::new();
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let sy = reflect(y + dy, 9);
                            let sx = reflect(x + dx, 9);
                            vals.push(img.get(sx, sy));
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert_eq!(out.get(x as usize, y as usize), vals[4]);
                }
            }
        }
    }

    #[test]
    fn clahe_constant_unchanged() {
        let img = GrayImage::filled(32, 32, 77.5).unwrap();
        let out = clahe(&img, 8, 8, 2.0).unwrap();
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn clahe_output_in_range() {
        let mut rng = SplitMix64::new(32);
        let img = random_image(&mut rng, 37, 23);
        let out = clahe(&img, 8, 8, 2.0).unwrap();
        assert!(out.pixels().iter().all(|&p| (0.0..=255.0).contains(&p)));
    }

    #[test]
    fn clahe_single_tile_unclipped_is_histogram_equalization() {
        let mut rng = SplitMix64::new(33);
        let img = random_image(&mut rng, 32, 32);
        let out = clahe(&img, 1, 1, 1e12).unwrap();
        // Direct cdf equalization oracle.
        let mut hist = [0usize; 256];
        for &p in img.pixels() {
            hist[p as usize] += 1;
        }
        let n = (img.width() * img.height()) as f64;
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for i in 0..256 {
            acc += hist[i];
            cdf[i] = acc;
        }
        for (i, &p) in img.pixels().iter().enumerate() {
            let want = (255.0 * cdf[p as usize] as f64 / n).round();
            let got = out.pixels()[i] as f64;
            assert!((got - want).abs() <= 1.0, "pixel {i}: {got} vs {want}");
        }
    }

    #[test]
    fn clahe_rejects_empty_tiles() {
        let img = GrayImage::filled(4, 4, 0.0).unwrap();
        assert!(clahe(&img, 8, 8, 2.0).is_err());
        assert!(clahe(&img, 4, 4, 2.0).is_ok());
    }

    #[test]
    fn operators_are_pure() {
        let mut rng = SplitMix64::new(55);
        let img = random_image(&mut rng, 16, 16);
        assert_eq!(
            median_filter(&img, 3).unwrap().pixels(),
            median_filter(&img, 3).unwrap().pixels()
        );
        assert_eq!(
            resize_bilinear(&img, 0.8).unwrap().pixels(),
            resize_bilinear(&img, 0.8).unwrap().pixels()
        );
        assert_eq!(
            clahe(&img, 4, 4, 2.0).unwrap().pixels(),
            clahe(&img, 4, 4, 2.0).unwrap().pixels()
        );
    }
}
