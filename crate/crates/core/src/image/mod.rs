//! Grayscale images, the manipulations that define the positive class, patch
//! extraction, and distortion metrics.
//!
//! Pixels are real values in `[0, 255]`; every operator preserves that range.
//! Manipulated images are quantized to integer levels before patches are cut
//! from them, mimicking a processed image that was saved to disk.

mod filters;
mod io;
mod patches;

pub use filters::{clahe, median_filter, resize_bilinear, to_grayscale};
pub use io::{load_gray, save_pgm};
pub use patches::{extract_patches, ExtractedPatch};

use crate::error::{Error, Result};

/// Class label of a patch: original content (H0) or manipulated content (H1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Original,
    Manipulated,
}

impl Label {
    /// Class index used by the models: 0 = original, 1 = manipulated.
    pub fn index(self) -> usize {
        match self {
            Label::Original => 0,
            Label::Manipulated => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Original),
            1 => Some(Label::Manipulated),
            _ => None,
        }
    }
}

/// Dense grayscale image with real-valued pixels in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=255.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 255]"
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Constant-valued image.
    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Copy of the rectangle with top-left `(x, y)` and the given side.
    pub fn crop_square(&self, x: usize, y: usize, side: usize) -> Result<GrayImage> {
        if x + side > self.width || y + side > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {side}x{side}@({x},{y}) exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(side * side);
        for row in y..y + side {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + side]);
        }
        GrayImage::new(side, side, pixels)
    }

    /// Rounds every pixel to an integer level, as if the image had been
    /// saved as an 8-bit file.
    pub fn quantized(&self) -> GrayImage {
        let pixels = self.pixels.iter().map(|p| p.round().clamp(0.0, 255.0)).collect();
        GrayImage { width: self.width, height: self.height, pixels }
    }

    /// Pixels rescaled to the model input domain `[0, 1]`.
    pub fn to_model_input(&self) -> Vec<f32> {
        self.pixels.iter().map(|p| p / 255.0).collect()
    }

    /// Builds an image from model-domain values in `[0, 1]`.
    pub fn from_model_input(width: usize, height: usize, values: &[f32]) -> Result<GrayImage> {
        let pixels: Vec<f32> = values.iter().map(|v| (v * 255.0).clamp(0.0, 255.0)).collect();
        GrayImage::new(width, height, pixels)
    }
}

/// A labeled patch with the id of the source image it was cut from.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: GrayImage,
    pub label: Label,
    pub source_id: u32,
}

/// Uniform-side labeled patches; the training currency of the workbench.
#[derive(Debug, Clone)]
pub struct PatchSet {
    side: usize,
    max_per_image: usize,
    patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new(side: usize, max_per_image: usize) -> Self {
        Self { side, max_per_image, patches: Vec::new() }
    }

    pub fn push(&mut self, patch: Patch) -> Result<()> {
        if patch.image.width() != self.side || patch.image.height() != self.side {
            return Err(Error::ShapeMismatch(format!(
                "patch is {}x{}, set expects side {}",
                patch.image.width(),
                patch.image.height(),
                self.side
            )));
        }
        let per_source = self
            .patches
            .iter()
            .filter(|p| p.source_id == patch.source_id && p.label == patch.label)
            .count();
        if per_source >= self.max_per_image {
            return Err(Error::InvalidArgument(format!(
                "source {} already contributed {} patches (cap {})",
                patch.source_id, per_source, self.max_per_image
            )));
        }
        self.patches.push(patch);
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Patch> {
        self.patches.iter()
    }

    /// Distinct source images represented in the set.
    pub fn source_ids(&self) -> std::collections::BTreeSet<u32> {
        self.patches.iter().map(|p| p.source_id).collect()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.patches.iter().filter(|p| p.label == label).count()
    }
}

/// Peak signal-to-noise ratio in dB on the `[0, 255]` scale;
/// `f64::INFINITY` for identical images.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch(format!(
            "psnr dimension mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut mse = 0.0f64;
    for (&pa, &pb) in a.pixels().iter().zip(b.pixels().iter()) {
        let d = pa as f64 - pb as f64;
        mse += d * d;
    }
    mse /= (a.width() * a.height()) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}
