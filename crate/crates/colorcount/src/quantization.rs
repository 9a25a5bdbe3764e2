//! ab-plane quantization: codebook construction, soft encoding of chroma
//! into per-pixel color distributions, annealed-mean decoding, and
//! rarity-based class rebalancing weights.

use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::color_space::{rgb_pixel_to_lab, AB_MAX};
use crate::error::{Error, Result};

/// Default grid spacing in ab units.
pub const DEFAULT_GRID_SPACING: f64 = 10.0;
/// Default number of RGB-cube samples used for gamut filtering.
pub const DEFAULT_GAMUT_SAMPLES: usize = 50_000;
/// Default number of nearest bins in soft encoding.
pub const DEFAULT_K: usize = 5;
/// Default annealed-mean temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.38;
/// Default uniform-mixing coefficient for rebalance weights.
pub const DEFAULT_MIX: f64 = 0.5;

/// Regular-grid codebook over the ab plane, restricted to the sRGB gamut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorCodebook {
    /// Q bin centers, each an (a, b) coordinate.
    pub centers: Vec<[f64; 2]>,
    pub grid_spacing: f64,
}

impl ColorCodebook {
    pub fn q(&self) -> usize {
        self.centers.len()
    }

    /// Default soft-encoding sigma for this codebook.
    pub fn default_sigma(&self) -> f64 {
        self.grid_spacing / 2.0
    }
}

/// Per-pixel probability distribution over the Q codebook bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorDistribution {
    /// H x W x Q, each pixel's Q-vector sums to 1.
    pub probs: Array3<f64>,
}

impl ColorDistribution {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        let d = Self { probs };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("distribution entries must be finite and >= 0"));
        }
        let (h, w, _) = self.probs.dim();
        for y in 0..h {
            for x in 0..w {
                let s: f64 = self.probs.slice(ndarray::s![y, x, ..]).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "pixel ({y},{x}) distribution sums to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Soft encoding kept in k-sparse form: per pixel, the indices of the k
/// nearest bins and their normalized Gaussian weights. Training uses this
/// directly; `to_dense` recovers the full distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEncoding {
    /// H x W x k bin indices.
    pub indices: Array3<u32>,
    /// H x W x k weights, each pixel's k weights summing to 1.
    pub weights: Array3<f64>,
    /// Total number of bins Q.
    pub q: usize,
}

impl SparseEncoding {
    pub fn to_dense(&self) -> ColorDistribution {
        let (h, w, k) = self.indices.dim();
        let mut probs = Array3::zeros((h, w, self.q));
        for y in 0..h {
            for x in 0..w {
                for i in 0..k {
                    probs[[y, x, self.indices[[y, x, i]] as usize]] += self.weights[[y, x, i]];
                }
            }
        }
        ColorDistribution { probs }
    }

    /// Index of the highest-weight bin per pixel.
    pub fn argmax(&self) -> Array2<u32> {
        let (h, w, k) = self.indices.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for i in 1..k {
                if self.weights[[y, x, i]] > self.weights[[y, x, best]] {
                    best = i;
                }
            }
            self.indices[[y, x, best]]
        })
    }
}

/// Color-class rarity weights v(·).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceWeights {
    /// One positive weight per bin; E_{p̃}[per_bin] = 1.
    pub per_bin: Vec<f64>,
    /// Uniform-mixing coefficient used at fit time.
    pub mix: f64,
}

impl RebalanceWeights {
    /// Uniform weights (v ≡ 1) for Q bins.
    pub fn uniform(q: usize) -> Self {
        Self { per_bin: vec![1.0; q], mix: 1.0 }
    }

    /// Per-pixel weight v(Z) = per_bin[argmax_q Z_q] for a dense target.
    pub fn pixel_weights(&self, target: &ColorDistribution) -> Result<Array2<f64>> {
        let (h, w, q) = target.probs.dim();
        if q != self.per_bin.len() {
            return Err(Error::ShapeMismatch(format!(
                "distribution has {q} bins but weights have {}",
                self.per_bin.len()
            )));
        }
        Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for i in 1..q {
                if target.probs[[y, x, i]] > target.probs[[y, x, best]] {
                    best = i;
                }
            }
            self.per_bin[best]
        }))
    }
}

fn cells_per_axis(spacing: f64) -> usize {
    ((2.0 * AB_MAX) / spacing - 1e-9).ceil() as usize
}

fn cell_index(v: f64, spacing: f64, cells: usize) -> usize {
    let i = ((v + AB_MAX) / spacing).floor() as isize;
    i.clamp(0, cells as isize - 1) as usize
}

fn cell_center(i: usize, spacing: f64) -> f64 {
    -AB_MAX + (i as f64 + 0.5) * spacing
}

/// Build the grid codebook over [-110,110]².
///
/// Gamut filtering keeps only cells hit by at least one color of a
/// deterministic lattice over the sRGB cube with approximately
/// `gamut_samples` points (deterministic so the retained set is exactly
/// reproducible). `gamut_samples = 0` disables filtering and keeps every
/// grid cell.
pub fn build_codebook(grid_spacing: f64, gamut_samples: usize) -> Result<ColorCodebook> {
    if !(grid_spacing > 0.0 && grid_spacing <= 2.0 * AB_MAX) {
        return Err(Error::invalid(format!(
            "grid_spacing must be in (0, {}], got {grid_spacing}",
            2.0 * AB_MAX
        )));
    }
    let cells = cells_per_axis(grid_spacing);
    let mut keep = vec![false; cells * cells];
    if gamut_samples == 0 {
        keep.fill(true);
    } else {
        let n = ((gamut_samples as f64).cbrt().round() as usize).max(2);
        let denom = (n - 1) as f64;
        for i in 0..n * n * n {
            let r = (i / (n * n)) as f64 / denom;
            let g = ((i / n) % n) as f64 / denom;
            let b = (i % n) as f64 / denom;
            let (_, a, bb) = rgb_pixel_to_lab(r, g, b);
            let ia = cell_index(a, grid_spacing, cells);
            let ib = cell_index(bb, grid_spacing, cells);
            keep[ia * cells + ib] = true;
        }
    }
    let mut centers = Vec::new();
    for ia in 0..cells {
        for ib in 0..cells {
            if keep[ia * cells + ib] {
                centers.push([cell_center(ia, grid_spacing), cell_center(ib, grid_spacing)]);
            }
        }
    }
    Ok(ColorCodebook { centers, grid_spacing })
}

/// The default codebook (spacing 10, gamut-filtered), built once.
pub fn default_codebook() -> &'static ColorCodebook {
    static CB: OnceLock<ColorCodebook> = OnceLock::new();
    CB.get_or_init(|| {
        build_codebook(DEFAULT_GRID_SPACING, DEFAULT_GAMUT_SAMPLES).expect("valid defaults")
    })
}

/// Soft-encode chroma into k-sparse per-pixel distributions: mass over the k
/// nearest bin centers with Gaussian weights exp(-d²/2σ²), renormalized.
pub fn soft_encode_sparse(
    chroma: &Array3<f64>,
    cb: &ColorCodebook,
    k: usize,
    sigma: f64,
) -> Result<SparseEncoding> {
    let (h, w, c) = chroma.dim();
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("chroma must be HxWx2, got {h}x{w}x{c}")));
    }
    if k == 0 || k > cb.q() {
        return Err(Error::invalid(format!("k must be in [1, Q={}], got {k}", cb.q())));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid("sigma must be > 0"));
    }
    let mut indices = Array3::zeros((h, w, k));
    let mut weights = Array3::zeros((h, w, k));
    // (distance², index) of the current k best, kept sorted ascending; ties
    // broken by index so the selection is deterministic.
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (chroma[[y, x, 0]], chroma[[y, x, 1]]);
            best.clear();
            for (i, ctr) in cb.centers.iter().enumerate() {
                let d2 = (a - ctr[0]).powi(2) + (b - ctr[1]).powi(2);
                let cand = (d2, i as u32);
                if best.len() < k || cand < best[k - 1] {
                    let pos = best.partition_point(|e| *e < cand);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            let mut total = 0.0;
            for (i, &(d2, idx)) in best.iter().enumerate() {
                let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
                indices[[y, x, i]] = idx;
                weights[[y, x, i]] = wgt;
                total += wgt;
            }
            for i in 0..k {
                weights[[y, x, i]] /= total;
            }
        }
    }
    Ok(SparseEncoding { indices, weights, q: cb.q() })
}

/// Dense soft encoding; see [`soft_encode_sparse`].
pub fn soft_encode(
    chroma: &Array3<f64>,
    cb: &ColorCodebook,
    k: usize,
    sigma: f64,
) -> Result<ColorDistribution> {
    Ok(soft_encode_sparse(chroma, cb, k, sigma)?.to_dense())
}

/// Decode a distribution to chroma via the annealed mean: sharpen each
/// pixel's distribution as p^{1/T}, renormalize, and take the expectation of
/// the bin centers.
pub fn decode_annealed_mean(
    dist: &ColorDistribution,
    cb: &ColorCodebook,
    temperature: f64,
) -> Result<Array3<f64>> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(Error::invalid(format!("temperature must be in (0,1], got {temperature}")));
    }
    let (h, w, q) = dist.probs.dim();
    if q != cb.q() {
        return Err(Error::ShapeMismatch(format!("distribution Q={q} vs codebook Q={}", cb.q())));
    }
    let inv_t = 1.0 / temperature;
    let mut chroma = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let mut total = 0.0;
            let mut acc = [0.0; 2];
            for i in 0..q {
                let p = dist.probs[[y, x, i]];
                if p <= 0.0 {
                    continue;
                }
                let wgt = p.powf(inv_t);
                total += wgt;
                acc[0] += wgt * cb.centers[i][0];
                acc[1] += wgt * cb.centers[i][1];
            }
            chroma[[y, x, 0]] = acc[0] / total;
            chroma[[y, x, 1]] = acc[1] / total;
        }
    }
    Ok(chroma)
}

/// Streaming accumulator for the empirical bin prior p̃.
#[derive(Debug, Clone)]
pub struct RebalanceAccumulator {
    counts: Vec<f64>,
    pixels: f64,
}

impl RebalanceAccumulator {
    pub fn new(q: usize) -> Self {
        Self { counts: vec![0.0; q], pixels: 0.0 }
    }

    pub fn add_dense(&mut self, dist: &ColorDistribution) -> Result<()> {
        let (h, w, q) = dist.probs.dim();
        if q != self.counts.len() {
            return Err(Error::ShapeMismatch(format!(
                "distribution Q={q} vs accumulator Q={}",
                self.counts.len()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                for i in 0..q {
                    self.counts[i] += dist.probs[[y, x, i]];
                }
            }
        }
        self.pixels += (h * w) as f64;
        Ok(())
    }

    pub fn add_sparse(&mut self, enc: &SparseEncoding) -> Result<()> {
        if enc.q != self.counts.len() {
            return Err(Error::ShapeMismatch(format!(
                "encoding Q={} vs accumulator Q={}",
                enc.q,
                self.counts.len()
            )));
        }
        let (h, w, k) = enc.indices.dim();
        for y in 0..h {
            for x in 0..w {
                for i in 0..k {
                    self.counts[enc.indices[[y, x, i]] as usize] += enc.weights[[y, x, i]];
                }
            }
        }
        self.pixels += (h * w) as f64;
        Ok(())
    }

    /// Finish the fold: per_bin ∝ ((1-mix)·p̃ + mix/Q)⁻¹, normalized so that
    /// E_{p̃}[per_bin] = 1.
    pub fn finish(&self, mix: f64) -> Result<RebalanceWeights> {
        if self.pixels == 0.0 {
            return Err(Error::invalid("rebalance corpus is empty"));
        }
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::invalid(format!("mix must be in [0,1], got {mix}")));
        }
        let q = self.counts.len();
        let prior: Vec<f64> = self.counts.iter().map(|c| c / self.pixels).collect();
        // Bins never seen in the corpus have prior 0; clamp the denominator
        // so their weight stays finite (they cannot affect normalization,
        // which is an expectation under the prior).
        let raw: Vec<f64> = prior
            .iter()
            .map(|p| 1.0 / ((1.0 - mix) * p + mix / q as f64).max(1e-12))
            .collect();
        let expectation: f64 = prior.iter().zip(&raw).map(|(p, w)| p * w).sum();
        let per_bin: Vec<f64> = raw.iter().map(|w| w / expectation).collect();
        Ok(RebalanceWeights { per_bin, mix })
    }
}

/// Fit rebalance weights from a corpus of dense distributions.
pub fn fit_rebalance<'a, I>(encoded_corpus: I, mix: f64) -> Result<RebalanceWeights>
where
    I: IntoIterator<Item = &'a ColorDistribution>,
{
    let mut iter = encoded_corpus.into_iter();
    let first = iter.next().ok_or_else(|| Error::invalid("rebalance corpus is empty"))?;
    let mut acc = RebalanceAccumulator::new(first.probs.dim().2);
    acc.add_dense(first)?;
    for dist in iter {
        acc.add_dense(dist)?;
    }
    acc.finish(mix)
}

/// The codebook and fitted rebalance weights, persisted together so stage 2
/// and evaluation reuse stage-1 quantization bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantArtifacts {
    pub codebook: ColorCodebook,
    pub rebalance: RebalanceWeights,
}

impl QuantArtifacts {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let art: Self = serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
        if art.rebalance.per_bin.len() != art.codebook.q() {
            return Err(Error::corrupt(path, format!(
                    "codebook has {} bins but rebalance has {}",
                    art.codebook.q(),
                    art.rebalance.per_bin.len()
                )));
        }
        if art.rebalance.per_bin.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::corrupt(path, "rebalance weights must be finite and positive"));
        }
        Ok(art)
    }
}
