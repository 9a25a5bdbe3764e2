//! Dataset handling: on-disk corpus layout, deterministic subset sampling,
//! image resizing, and the per-stage tensor preparation.
//!
//! A dataset directory holds an `annotations.jsonl` file whose records point
//! at image files relative to the directory; `group` fields carry the crowd
//! level priors when present.

use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::color_space::{load_image, rgb_to_lab, save_png, RgbImage};
use crate::density::{
    density_from_points, DensityMap, HeadAnnotations, KernelMode, SynthScene,
};
use crate::error::{Error, Result};
use crate::io::{load_annotations, save_annotations, AnnotationRecord};
use crate::priors::GroupLabel;
use crate::quantization::{soft_encode_sparse, ColorCodebook, SparseEncoding, DEFAULT_K};

/// Default geometry-adaptive kernel for training targets.
pub const TARGET_KERNEL: KernelMode = KernelMode::Adaptive { beta: 0.3, k: 3 };

/// One annotated image as loaded from disk (original resolution).
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub id: String,
    pub image: RgbImage,
    pub annotations: HeadAnnotations,
    pub group: Option<u8>,
}

/// Write synthetic scenes as a dataset directory (images + annotations).
pub fn save_dataset(dir: &Path, scenes: &[SynthScene]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let rel = format!("images/{i:04}.png");
        save_png(&dir.join(&rel), &scene.image)?;
        records.push(AnnotationRecord {
            image_path: rel,
            points: scene.annotations.points.clone(),
            group: Some(scene.group.group),
        });
    }
    save_annotations(&dir.join("annotations.jsonl"), &records)
}

/// Load a dataset directory written by [`save_dataset`] (or hand-assembled
/// in the same layout).
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledScene>> {
    let records = load_annotations(&dir.join("annotations.jsonl"))?;
    let mut scenes = Vec::with_capacity(records.len());
    for rec in records {
        let image = load_image(&dir.join(&rec.image_path))?;
        let size = (image.height(), image.width());
        let annotations = HeadAnnotations::new(rec.points, size)?;
        scenes.push(LabeledScene { id: rec.image_path, image, annotations, group: rec.group });
    }
    Ok(scenes)
}

/// In-memory bridge from the synthetic generator.
pub fn scenes_from_synth(scenes: &[SynthScene]) -> Vec<LabeledScene> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| LabeledScene {
            id: format!("synth-{i:04}"),
            image: s.image.clone(),
            annotations: s.annotations.clone(),
            group: Some(s.group.group),
        })
        .collect()
}

/// Bilinear resize with half-pixel alignment (matching the network
/// upsampling convention).
pub fn resize_image(img: &RgbImage, out_h: usize, out_w: usize) -> Result<RgbImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    let (h, w, c) = img.pixels.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ci in 0..c {
                let v = img.pixels[[y0, x0, ci]] * (1.0 - ty) * (1.0 - tx)
                    + img.pixels[[y0, x1, ci]] * (1.0 - ty) * tx
                    + img.pixels[[y1, x0, ci]] * ty * (1.0 - tx)
                    + img.pixels[[y1, x1, ci]] * ty * tx;
                out[[oy, ox, ci]] = v;
            }
        }
    }
    RgbImage::new(out)
}

/// Select round(fraction·n) items via a seeded shuffle. Fractions nest: a
/// larger fraction at the same seed yields a superset (prefix property).
pub fn sample_subset<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let take = ((fraction * items.len() as f64).round() as usize).min(items.len());
    Ok(order[..take].iter().map(|&i| items[i].clone()).collect())
}

/// Deterministic per-epoch visit order: one RNG stream per epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Stage-1 training item: Lab planes and the sparse color target at the
/// training resolution.
#[derive(Debug, Clone)]
pub struct Stage1Item {
    pub lightness: Array2<f64>,
    pub chroma: Array3<f64>,
    pub encoding: SparseEncoding,
    pub group: Option<GroupLabel>,
}

pub fn prepare_stage1(
    scenes: &[LabeledScene],
    size: usize,
    cb: &ColorCodebook,
    m: u8,
) -> Result<Vec<Stage1Item>> {
    let sigma = cb.default_sigma();
    scenes
        .iter()
        .map(|scene| {
            let resized = resize_image(&scene.image, size, size)?;
            let lab = rgb_to_lab(&resized);
            let encoding = soft_encode_sparse(&lab.chroma, cb, DEFAULT_K.min(cb.q()), sigma)?;
            let group = match scene.group {
                Some(g) => Some(GroupLabel::new(g, m)?),
                None => None,
            };
            Ok(Stage1Item { lightness: lab.lightness, chroma: lab.chroma, encoding, group })
        })
        .collect()
}

/// Stage-2 training item: RGB input and the density target at the training
/// resolution (points rescaled; per-kernel renormalization keeps the sum
/// equal to the head count).
#[derive(Debug, Clone)]
pub struct Stage2Item {
    pub id: String,
    pub image: RgbImage,
    pub density: DensityMap,
    pub count: f64,
}

pub fn prepare_stage2(scenes: &[LabeledScene], size: usize) -> Result<Vec<Stage2Item>> {
    scenes
        .iter()
        .map(|scene| {
            let (h, w) = scene.annotations.image_size;
            let image = resize_image(&scene.image, size, size)?;
            let sy = size as f64 / h as f64;
            let sx = size as f64 / w as f64;
            let points: Vec<(f64, f64)> = scene
                .annotations
                .points
                .iter()
                .map(|&(x, y)| {
                    (
                        (x * sx).min(size as f64 - 1e-9),
                        (y * sy).min(size as f64 - 1e-9),
                    )
                })
                .collect();
            let ann = HeadAnnotations::new(points, (size, size))?;
            let density = density_from_points(&ann, TARGET_KERNEL)?;
            Ok(Stage2Item {
                id: scene.id.clone(),
                image,
                density,
                count: scene.annotations.count() as f64,
            })
        })
        .collect()
}

/// Pack lightness planes into an NCHW batch tensor.
pub fn lightness_batch(items: &[&Stage1Item]) -> Array4<f32> {
    let (h, w) = items[0].lightness.dim();
    let mut out = Array4::zeros((items.len(), 1, h, w));
    for (i, item) in items.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[i, 0, y, x]] = item.lightness[[y, x]] as f32;
            }
        }
    }
    out
}

/// Pack chroma planes into an NCHW batch tensor.
pub fn chroma_batch(items: &[&Stage1Item]) -> Array4<f32> {
    let (h, w, _) = items[0].chroma.dim();
    let mut out = Array4::zeros((items.len(), 2, h, w));
    for (i, item) in items.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[i, 0, y, x]] = item.chroma[[y, x, 0]] as f32;
                out[[i, 1, y, x]] = item.chroma[[y, x, 1]] as f32;
            }
        }
    }
    out
}

/// Pack RGB images into an NCHW batch tensor.
pub fn rgb_batch(items: &[&Stage2Item]) -> Array4<f32> {
    let (h, w, _) = items[0].image.pixels.dim();
    let mut out = Array4::zeros((items.len(), 3, h, w));
    for (i, item) in items.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[i, c, y, x]] = item.image.pixels[[y, x, c]] as f32;
                }
            }
        }
    }
    out
}
