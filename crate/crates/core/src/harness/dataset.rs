//! Dataset construction: sources are split before any processing (so a
//! source image never leaks across splits), the manipulated H1 copies are
//! produced per task, quantized, and patches are cut at seeded random
//! offsets. A JSON-lines manifest records every patch's provenance.
//!
//! Sources are either lossless image files from a directory or, by default,
//! procedurally generated textures (seeded filtered noise), which lets the
//! whole suite run without downloading anything.

use super::config::{DatasetConfig, SourceSpec, Task};
use crate::container;
use crate::error::{Error, Result};
use crate::image::{
    clahe, extract_patches, load_gray, median_filter, resize_bilinear, GrayImage, Label, Patch,
    PatchSet,
};
use crate::rng::{derive, SplitMix64};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest line: where a patch came from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestRow {
    pub split: Split,
    pub ordinal: usize,
    pub label: Label,
    pub source_id: u32,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub side: usize,
    pub seed: u64,
    pub per_class: [usize; 3],
    pub max_per_image: usize,
}

/// The three patch splits plus provenance.
#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: PatchSet,
    pub val: PatchSet,
    pub test: PatchSet,
    pub manifest: Vec<ManifestRow>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &PatchSet {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// No source image may appear in two splits.
    pub fn verify_split_hygiene(&self) -> Result<()> {
        let a = self.train.source_ids();
        let b = self.val.source_ids();
        let c = self.test.source_ids();
        if !a.is_disjoint(&b) || !a.is_disjoint(&c) || !b.is_disjoint(&c) {
            return Err(Error::InvalidArgument("source image shared across splits".into()));
        }
        Ok(())
    }
}

/// Separable box blur with reflected edges.
fn box_blur(img: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        (if i < 0 { -1 - i } else if i >= n { 2 * n - 1 - i } else { i }) as usize
    };
    let mut tmp = vec![0.0f64; w * h];
    let norm = 1.0 / (2 * r + 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -(r as isize)..=(r as isize) {
                acc += img[y * w + reflect(x as isize + d, w)];
            }
            tmp[y * w + x] = acc * norm;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -(r as isize)..=(r as isize) {
                acc += tmp[reflect(y as isize + d, h) * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

/// Seeded filtered-noise texture: smoothed structure plus broadband grain
/// plus an oriented sinusoid, quantized to integer levels like a stored
/// 8-bit image.
///
/// Grain amplitude and pre-smoothing vary widely between images so that the
/// smoothest originals already resemble filtered content; the detection
/// tasks stay learnable but not trivially separable, keeping decision
/// margins realistic.
pub fn synth_texture(seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = SplitMix64::new(seed);
    let base = 90.0 + rng.next_f64() * 70.0;
    let mut contrast = 25.0 + rng.next_f64() * 45.0;
    let mut grain = 2.0 + rng.next_f64().powi(2) * 42.0;
    let radius = 1 + rng.next_below(4) as usize;
    // Half the images carry broadband (white) grain, the resampling and
    // smoothing fingerprints' strongest carrier; the rest get low-passed
    // grain. A small share is rendered nearly flat, where manipulations
    // leave almost no trace, so the classes genuinely overlap.
    let grain_radius = if rng.next_f64() < 0.5 { 0 } else { 1 + rng.next_below(2) as usize };
    let flat = rng.next_f64() < 0.08;
    if flat {
        contrast *= 0.2;
        grain *= 0.2;
    }
    let sin_amp = rng.next_f64() * if flat { 6.0 } else { 25.0 };
    let fx = 0.02 + rng.next_f64() * 0.28;
    let fy = 0.02 + rng.next_f64() * 0.28;
    let phase = rng.next_f64() * std::f64::consts::TAU;

    let noise: Vec<f64> = (0..w * h).map(|_| rng.next_f64()).collect();
    let smooth = box_blur(&noise, w, h, radius);
    let grains: Vec<f64> = (0..w * h).map(|_| rng.next_f64() - 0.5).collect();
    let grains = if grain_radius > 0 {
        box_blur(&grains, w, h, grain_radius).iter().map(|v| v * (2 * grain_radius + 1) as f64).collect()
    } else {
        grains
    };
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = base
                + contrast * (smooth[i] * 2.0 - 1.0)
                + grain * grains[i]
                + sin_amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            pixels.push(v.round().clamp(0.0, 255.0) as f32);
        }
    }
    GrayImage::new(w, h, pixels).expect("generated pixels are clamped")
}

/// Applies the task's manipulation and quantizes, mimicking a processed
/// image saved to disk.
pub fn manipulate(img: &GrayImage, task: Task) -> Result<GrayImage> {
    let processed = match task {
        Task::Resize => resize_bilinear(img, 0.8)?,
        Task::Median => median_filter(img, 5)?,
        Task::Clahe => clahe(img, 8, 8, 2.0)?,
    };
    Ok(processed.quantized())
}

fn load_sources(cfg: &DatasetConfig, seed: u64) -> Result<Vec<GrayImage>> {
    match &cfg.source {
        SourceSpec::Procedural { count, width, height } => Ok((0..*count)
            .map(|i| synth_texture(derive(seed, "texture", i as u64), *width, *height))
            .collect()),
        SourceSpec::Directory { path } => {
            let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("png" | "pgm" | "PNG" | "PGM")
                    )
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no PNG or PGM files under {}",
                    path.display()
                )));
            }
            files.iter().map(|p| load_gray(p)).collect()
        }
    }
}

/// Builds the three splits for a task. Sources are partitioned
/// proportionally to the per-split patch quotas, then each split fills its
/// per-class quota by cutting up to `max_per_image` patches per source.
pub fn prepare_dataset(cfg: &DatasetConfig, task: Task, seed: u64) -> Result<Dataset> {
    let sources = load_sources(cfg, seed)?;
    let quotas = [cfg.train_per_class, cfg.val_per_class, cfg.test_per_class];
    let per_image = cfg.max_per_image;

    // Estimate how many sources each split needs; reject short supplies
    // with the required counts in the message.
    let need: Vec<usize> = quotas.iter().map(|q| q.div_ceil(per_image)).collect();
    let total_need: usize = need.iter().sum();
    if sources.len() < total_need {
        return Err(Error::InvalidArgument(format!(
            "insufficient source images: have {}, need at least {total_need} \
             (train {}, val {}, test {} at {per_image} patches per image)",
            sources.len(),
            need[0],
            need[1],
            need[2]
        )));
    }

    // Split BEFORE processing: shuffle source indices once, then carve
    // contiguous runs proportional to the quotas.
    let mut order: Vec<usize> = (0..sources.len()).collect();
    SplitMix64::new(derive(seed, "source-split", 0)).shuffle(&mut order);
    let total_quota: usize = quotas.iter().sum();
    let mut cursor = 0usize;
    let mut split_sources: Vec<Vec<usize>> = Vec::new();
    for (si, &q) in quotas.iter().enumerate() {
        let share = if si == quotas.len() - 1 {
            sources.len() - cursor
        } else {
            (sources.len() * q / total_quota).max(need[si]).min(sources.len() - cursor)
        };
        split_sources.push(order[cursor..cursor + share].to_vec());
        cursor += share;
    }

    let mut manifest = Vec::new();
    let mut sets = Vec::new();
    for (si, split) in Split::ALL.iter().enumerate() {
        let mut set = PatchSet::new(cfg.side, per_image);
        let quota = quotas[si];
        for class in [Label::Original, Label::Manipulated] {
            let mut remaining = quota;
            for &src_idx in &split_sources[si] {
                if remaining == 0 {
                    break;
                }
                let source_id = src_idx as u32;
                let img = match class {
                    Label::Original => sources[src_idx].clone(),
                    Label::Manipulated => manipulate(&sources[src_idx], task)?,
                };
                if img.width() < cfg.side || img.height() < cfg.side {
                    continue;
                }
                let want = remaining.min(per_image);
                let patch_seed = derive(
                    derive(seed, "patch-offsets", src_idx as u64),
                    split.name(),
                    class.index() as u64,
                );
                let patches = extract_patches(&img, cfg.side, want, patch_seed)?;
                for p in patches {
                    manifest.push(ManifestRow {
                        split: *split,
                        ordinal: set.len(),
                        label: class,
                        source_id,
                        x: p.x,
                        y: p.y,
                    });
                    set.push(Patch { image: p.image, label: class, source_id })?;
                    remaining -= 1;
                }
            }
            if remaining > 0 {
                return Err(Error::InvalidArgument(format!(
                    "split {} ran out of source material: {remaining} of {quota} {} patches \
                     missing (add sources or lower the quota)",
                    split.name(),
                    match class {
                        Label::Original => "original",
                        Label::Manipulated => "manipulated",
                    }
                )));
            }
        }
        sets.push(set);
    }

    let mut it = sets.into_iter();
    let dataset = Dataset {
        meta: DatasetMeta {
            task,
            side: cfg.side,
            seed,
            per_class: quotas,
            max_per_image: per_image,
        },
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        manifest,
    };
    dataset.verify_split_hygiene()?;
    Ok(dataset)
}

const PATCH_MAGIC: &[u8; 8] = b"RDFSPAT1";

#[derive(Serialize, Deserialize)]
struct PatchFileHeader {
    side: usize,
    count: usize,
}

/// Writes meta.json, manifest.jsonl and one pixel container per split.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::to_vec_pretty(&dataset.meta)?;
    std::fs::write(dir.join("meta.json"), meta)?;

    let mut manifest = Vec::new();
    for row in &dataset.manifest {
        manifest.extend(serde_json::to_vec(row)?);
        manifest.push(b'\n');
    }
    std::fs::write(dir.join("manifest.jsonl"), manifest)?;

    for split in Split::ALL {
        let set = dataset.split(split);
        let mut pixels: Vec<f32> = Vec::with_capacity(set.len() * set.side() * set.side());
        for p in set.iter() {
            pixels.extend_from_slice(p.image.pixels());
        }
        let header = PatchFileHeader { side: set.side(), count: set.len() };
        container::write(
            &dir.join(format!("{}.bin", split.name())),
            PATCH_MAGIC,
            &header,
            &[&pixels],
        )?;
    }
    Ok(())
}

/// Reads a dataset back; manifest and pixel blocks must agree.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "dataset not found under {} (run `prepare-data` first)",
            dir.display()
        )));
    }
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(meta_path)?)?;
    let manifest_text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut manifest = Vec::new();
    for line in manifest_text.lines() {
        if !line.trim().is_empty() {
            manifest.push(serde_json::from_str::<ManifestRow>(line)?);
        }
    }

    let mut sets = Vec::new();
    for split in Split::ALL {
        let path = dir.join(format!("{}.bin", split.name()));
        let (header, blocks): (PatchFileHeader, _) = container::read(&path, PATCH_MAGIC)?;
        let pixels = &blocks[0];
        let per = header.side * header.side;
        let rows: Vec<&ManifestRow> = manifest.iter().filter(|r| r.split == split).collect();
        if rows.len() != header.count || pixels.len() != header.count * per {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "manifest lists {} patches, container holds {}",
                    rows.len(),
                    header.count
                ),
            });
        }
        let mut set = PatchSet::new(header.side, meta.max_per_image);
        for (i, row) in rows.iter().enumerate() {
            let image = GrayImage::new(header.side, header.side, pixels[i * per..(i + 1) * per].to_vec())?;
            set.push(Patch { image, label: row.label, source_id: row.source_id })?;
        }
        sets.push(set);
    }
    let mut it = sets.into_iter();
    Ok(Dataset {
        meta,
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        manifest,
    })
}
