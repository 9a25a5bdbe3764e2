//! Global group priors for unlabeled images: ordinal labels from nested crop
//! sequences, clustering on hand-crafted density-proxy features, and keyword
//! (adverb) lookup.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::color_space::RgbImage;
use crate::error::{Error, Result};

/// A categorical crowd-level group in {1..m}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupLabel {
    pub group: u8,
    pub m: u8,
}

impl GroupLabel {
    pub fn new(group: u8, m: u8) -> Result<Self> {
        if m == 0 || group == 0 || group > m {
            return Err(Error::invalid(format!("group must be in [1,{m}], got {group}")));
        }
        Ok(Self { group, m })
    }
}

/// Axis-aligned rectangle in source-image coordinates, half-open on the
/// upper edges: pixels with x0 ≤ x < x1, y0 ≤ y < y1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Proper containment: `other` inside self and not equal.
    pub fn strictly_contains(&self, other: &CropRect) -> bool {
        self.x0 <= other.x0
            && self.y0 <= other.y0
            && self.x1 >= other.x1
            && self.y1 >= other.y1
            && self != other
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// One crop of the ranking sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub rect: CropRect,
    pub image: RgbImage,
}

/// A decreasing sequence of nested crops; crop i+1 is strictly contained in
/// crop i, so any count inside crop i+1 is ≤ the count inside crop i.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSequence {
    pub crops: Vec<Crop>,
}

impl CropSequence {
    pub fn validate(&self, source_h: usize, source_w: usize) -> Result<()> {
        for (i, crop) in self.crops.iter().enumerate() {
            let r = &crop.rect;
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > source_w || r.y1 > source_h {
                return Err(Error::invalid(format!("crop {i} rectangle {r:?} out of bounds")));
            }
            if i > 0 && !self.crops[i - 1].rect.strictly_contains(r) {
                return Err(Error::invalid(format!("crop {i} is not strictly inside crop {}", i - 1)));
            }
        }
        Ok(())
    }
}

const MIN_CROP_SIDE: usize = 32;

fn crop_image(img: &RgbImage, r: &CropRect) -> RgbImage {
    RgbImage {
        pixels: img
            .pixels
            .slice(ndarray::s![r.y0..r.y1, r.x0..r.x1, ..])
            .to_owned(),
    }
}

/// Build a centered decreasing crop sequence: crop 0 is the full image, each
/// subsequent crop scales both sides by `ratio` (and shrinks by at least one
/// pixel) and is re-centered.
pub fn ranking_crops(img: &RgbImage, n: usize, ratio: f64) -> Result<CropSequence> {
    if n == 0 {
        return Err(Error::invalid("crop count n must be >= 1"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("ratio must be in (0,1), got {ratio}")));
    }
    let (src_h, src_w) = (img.height(), img.width());
    let (mut h, mut w) = (src_h, src_w);
    let mut sides = vec![(h, w)];
    for _ in 1..n {
        h = (((h as f64) * ratio).round() as usize).clamp(1, h - 1);
        w = (((w as f64) * ratio).round() as usize).clamp(1, w - 1);
        sides.push((h, w));
    }
    let (fh, fw) = *sides.last().unwrap();
    if fh < MIN_CROP_SIDE || fw < MIN_CROP_SIDE {
        return Err(Error::invalid(format!(
            "final crop {fh}x{fw} is below {MIN_CROP_SIDE}x{MIN_CROP_SIDE} \
             (n={n}, ratio={ratio} on a {src_h}x{src_w} image)"
        )));
    }
    let crops = sides
        .into_iter()
        .map(|(ch, cw)| {
            let rect = CropRect {
                x0: (src_w - cw) / 2,
                y0: (src_h - ch) / 2,
                x1: (src_w - cw) / 2 + cw,
                y1: (src_h - ch) / 2 + ch,
            };
            Crop { image: crop_image(img, &rect), rect }
        })
        .collect();
    let seq = CropSequence { crops };
    seq.validate(src_h, src_w)?;
    Ok(seq)
}

/// Ordinal group labels for a crop sequence: the largest crop (depth 0)
/// covers the most heads and gets group m; the smallest gets group 1, with
/// intermediate depths spaced linearly.
pub fn ranking_group_labels(seq: &CropSequence, m: u8) -> Result<Vec<GroupLabel>> {
    if m < 2 {
        return Err(Error::invalid("ranking labels need m >= 2"));
    }
    let n = seq.crops.len();
    (0..n)
        .map(|d| {
            let group = if n == 1 {
                m
            } else {
                m - ((d as f64) * f64::from(m - 1) / (n as f64 - 1.0)).round() as u8
            };
            GroupLabel::new(group, m)
        })
        .collect()
}

fn luma(img: &RgbImage) -> Array2<f64> {
    let (h, w, _) = img.pixels.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * img.pixels[[y, x, 0]] + 0.587 * img.pixels[[y, x, 1]] + 0.114 * img.pixels[[y, x, 2]]
    })
}

/// Density-proxy features: (mean |Laplacian| edge density, mean |center −
/// surround| blob response at a 5×5 scale).
pub fn density_proxy_features(img: &RgbImage) -> (f64, f64) {
    let g = luma(img);
    let (h, w) = g.dim();

    let mut edge_sum = 0.0;
    let mut edge_n = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = 4.0 * g[[y, x] ] - g[[y - 1, x]] - g[[y + 1, x]] - g[[y, x - 1]] - g[[y, x + 1]];
            edge_sum += v.abs();
            edge_n += 1;
        }
    }

    let mut blob_sum = 0.0;
    let mut blob_n = 0usize;
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let mut center = 0.0;
            let mut ring = 0.0;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let v = g[[(y as i64 + dy) as usize, (x as i64 + dx) as usize]];
                    if dy.abs() <= 1 && dx.abs() <= 1 {
                        center += v;
                    } else {
                        ring += v;
                    }
                }
            }
            blob_sum += (center / 9.0 - ring / 16.0).abs();
            blob_n += 1;
        }
    }

    (
        if edge_n > 0 { edge_sum / edge_n as f64 } else { 0.0 },
        if blob_n > 0 { blob_sum / blob_n as f64 } else { 0.0 },
    )
}

/// Cluster images into m crowd-level groups with k-means on density-proxy
/// features. Initialization is deterministic (centers at quantiles of the
/// standardized feature sum), so the partition is independent of corpus
/// order; labels are renumbered so group index increases with mean proxy
/// value. Empty clusters are dropped and survivors renumbered.
pub fn cluster_groups(images: &[RgbImage], m: usize) -> Result<Vec<GroupLabel>> {
    if m == 0 || m > u8::MAX as usize {
        return Err(Error::invalid("m must be in [1, 255]"));
    }
    if images.len() < m {
        return Err(Error::invalid(format!(
            "corpus of {} images is smaller than m = {m}",
            images.len()
        )));
    }
    let feats: Vec<(f64, f64)> = images.iter().map(density_proxy_features).collect();
    let n = feats.len();

    // standardize each axis
    let std_axis = |get: &dyn Fn(&(f64, f64)) -> f64| -> Vec<f64> {
        let mean = feats.iter().map(|f| get(f)).sum::<f64>() / n as f64;
        let var = feats.iter().map(|f| (get(f) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        feats
            .iter()
            .map(|f| if sd > 0.0 { (get(f) - mean) / sd } else { 0.0 })
            .collect()
    };
    let f0 = std_axis(&|f| f.0);
    let f1 = std_axis(&|f| f.1);
    let pts: Vec<[f64; 2]> = (0..n).map(|i| [f0[i], f1[i]]).collect();
    let keys: Vec<f64> = (0..n).map(|i| f0[i] + f1[i]).collect();

    // quantile initialization along the key axis
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let mut centers: Vec<[f64; 2]> =
        (0..m).map(|i| pts[order[(2 * i + 1) * n / (2 * m).max(1)]]).collect();

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = (pts[i][0] - ctr[0]).powi(2) + (pts[i][1] - ctr[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for c in 0..m {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if !members.is_empty() {
                let k = members.len() as f64;
                centers[c] = [
                    members.iter().map(|&i| pts[i][0]).sum::<f64>() / k,
                    members.iter().map(|&i| pts[i][1]).sum::<f64>() / k,
                ];
            }
        }
    }

    // drop empty clusters, renumber survivors by ascending mean proxy key
    let mut survivors: Vec<usize> = (0..m).filter(|&c| assign.iter().any(|&a| a == c)).collect();
    survivors.sort_by(|&a, &b| {
        let mean = |c: usize| {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            members.iter().map(|&i| keys[i]).sum::<f64>() / members.len() as f64
        };
        mean(a).total_cmp(&mean(b))
    });
    let renumber: BTreeMap<usize, u8> =
        survivors.iter().enumerate().map(|(rank, &c)| (c, rank as u8 + 1)).collect();
    let m_eff = survivors.len() as u8;
    assign.iter().map(|c| GroupLabel::new(renumber[c], m_eff)).collect()
}

/// Vocabulary mapping degree-adverb tags to groups.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordVocabulary {
    pub map: BTreeMap<String, u8>,
    pub m: u8,
}

impl Default for KeywordVocabulary {
    fn default() -> Self {
        let map = [
            ("sparse", 1),
            ("few", 1),
            ("crowded", 2),
            ("busy", 2),
            ("packed", 3),
            ("massive", 3),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self { map, m: 3 }
    }
}

/// Look up the group for an adverb tag.
pub fn keyword_groups(tag: &str, vocab: &KeywordVocabulary) -> Result<GroupLabel> {
    match vocab.map.get(tag) {
        Some(&group) => GroupLabel::new(group, vocab.m),
        None => {
            let allowed: Vec<&str> = vocab.map.keys().map(String::as_str).collect();
            Err(Error::invalid(format!(
                "unknown tag {tag:?}; allowed tags: {}",
                allowed.join(", ")
            )))
        }
    }
}
