//! Counting metrics and visual artifacts: MAE / MSE reports over a labeled
//! test set, CSV export, and per-image PNG panels showing what each stage
//! learned.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::color_space::{lab_to_rgb, rgb_to_lab, save_png, LabImage, RgbImage};
use crate::density::count_from_density;
use crate::error::{Error, Result};
use crate::networks::{colorize_forward, count_forward};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::data::{prepare_stage2, resize_image, LabeledScene};
use crate::quantization::{decode_annealed_mean, DEFAULT_TEMPERATURE};

/// Count-accuracy report over a test set.
///
/// `mse` follows the common counting-benchmark convention of reporting the
/// root of the mean squared error, so it is an RMS value despite the name;
/// `mae <= mse` always holds under that definition.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub n_images: usize,
    /// (image id, true count, predicted count) per test image.
    pub per_image: Vec<(String, f64, f64)>,
}

impl MetricsReport {
    /// Build a report from per-image (id, true, predicted) triples.
    pub fn from_pairs(per_image: Vec<(String, f64, f64)>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::invalid("metrics need at least one image"));
        }
        let n = per_image.len() as f64;
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        for (_, truth, pred) in &per_image {
            let e = truth - pred;
            abs_sum += e.abs();
            sq_sum += e * e;
        }
        Ok(Self {
            mae: abs_sum / n,
            mse: (sq_sum / n).sqrt(),
            n_images: per_image.len(),
            per_image,
        })
    }

    /// Write the report as CSV: one row per image, then MAE / MSE footer rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let io_err = |e| Error::io(path, e);
        writeln!(f, "# mse is the root of the mean squared error (an RMS value)").map_err(io_err)?;
        writeln!(f, "id,true_count,pred_count").map_err(io_err)?;
        for (id, truth, pred) in &self.per_image {
            writeln!(f, "{id},{truth},{pred}").map_err(io_err)?;
        }
        writeln!(f, "MAE,{},", self.mae).map_err(io_err)?;
        writeln!(f, "MSE,{},", self.mse).map_err(io_err)?;
        Ok(())
    }
}

/// MAE = (1/N)·Σ|Cᵢ − Ĉᵢ| and MSE = sqrt((1/N)·Σ|Cᵢ − Ĉᵢ|²) over paired
/// count lists. Image ids are the list positions.
pub fn mae_mse(true_counts: &[f64], pred_counts: &[f64]) -> Result<MetricsReport> {
    if true_counts.len() != pred_counts.len() {
        return Err(Error::invalid(format!(
            "count lists differ in length: {} vs {}",
            true_counts.len(),
            pred_counts.len()
        )));
    }
    MetricsReport::from_pairs(
        true_counts
            .iter()
            .zip(pred_counts)
            .enumerate()
            .map(|(i, (&t, &p))| (i.to_string(), t, p))
            .collect(),
    )
}

/// Evaluate a stage-2 checkpoint on a labeled test set: each image is
/// resized to `size`, run through the counting network, and scored against
/// its annotated head count. Writes the per-image CSV when `csv_out` is set.
pub fn evaluate_model(
    ckpt: &Checkpoint,
    scenes: &[LabeledScene],
    size: usize,
    csv_out: Option<&Path>,
) -> Result<MetricsReport> {
    if ckpt.manifest.stage != 2 {
        return Err(Error::invalid(format!(
            "evaluation needs a stage-2 counting checkpoint, got stage {}",
            ckpt.manifest.stage
        )));
    }
    let items = prepare_stage2(scenes, size)?;
    let mut per_image = Vec::with_capacity(items.len());
    for item in &items {
        let pred = count_forward(&ckpt.params, &item.image)?;
        per_image.push((item.id.clone(), item.count, count_from_density(&pred)));
    }
    let report = MetricsReport::from_pairs(per_image)?;
    if let Some(path) = csv_out {
        report.write_csv(path)?;
    }
    Ok(report)
}

/// Monotone gray rendering of a nonnegative scalar field; the maximum value
/// maps to full brightness.
fn gray_panel(values: &Array2<f64>, max: f64) -> RgbImage {
    let (h, w) = values.dim();
    let mut pixels = ndarray::Array3::zeros((h, w, 3));
    if max > 0.0 {
        for y in 0..h {
            for x in 0..w {
                let v = (values[[y, x]] / max).clamp(0.0, 1.0);
                for c in 0..3 {
                    pixels[[y, x, c]] = v;
                }
            }
        }
    }
    RgbImage { pixels }
}

fn panel_path(out_dir: &Path, index: usize, panel: &str) -> PathBuf {
    out_dir.join(format!("{index:03}-{panel}.png"))
}

/// Render per-image PNG panels into `out_dir` and return the files written.
///
/// Stage-1 checkpoints produce four panels per image — the original, its
/// lightness channel, the true chroma recomposed with that lightness, and
/// the predicted chroma recomposed the same way. Stage-2 checkpoints produce
/// three — the original, the ground-truth density and the predicted density,
/// both densities drawn with the same monotone colormap.
pub fn render_artifacts(
    ckpt: &Checkpoint,
    scenes: &[LabeledScene],
    size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    match ckpt.manifest.stage {
        1 => {
            let quant = ckpt
                .manifest
                .quant
                .as_ref()
                .ok_or_else(|| Error::invalid("stage-1 checkpoint lacks quantization artifacts"))?;
            for (i, scene) in scenes.iter().enumerate() {
                let image = resize_image(&scene.image, size, size)?;
                let lab = rgb_to_lab(&image);
                let dist = colorize_forward(&ckpt.params, &lab.lightness)?;
                let pred_ab = decode_annealed_mean(&dist, &quant.codebook, DEFAULT_TEMPERATURE)?;
                let true_recomposed =
                    lab_to_rgb(&LabImage::new(lab.lightness.clone(), lab.chroma.clone())?);
                let pred_recomposed = lab_to_rgb(&LabImage::new(lab.lightness.clone(), pred_ab)?);
                let gray = gray_panel(&lab.lightness, 100.0);
                for (panel, img) in [
                    ("original", &image),
                    ("lightness", &gray),
                    ("true-ab", &true_recomposed),
                    ("pred-ab", &pred_recomposed),
                ] {
                    let path = panel_path(out_dir, i, panel);
                    save_png(&path, img)?;
                    written.push(path);
                }
            }
        }
        2 => {
            let items = prepare_stage2(scenes, size)?;
            for (i, item) in items.iter().enumerate() {
                let pred = count_forward(&ckpt.params, &item.image)?;
                let true_max = item.density.values.iter().cloned().fold(0.0, f64::max);
                let pred_max = pred.values.iter().cloned().fold(0.0, f64::max);
                for (panel, img) in [
                    ("original", &item.image),
                    ("true-density", &gray_panel(&item.density.values, true_max)),
                    ("pred-density", &gray_panel(&pred.values, pred_max)),
                ] {
                    let path = panel_path(out_dir, i, panel);
                    save_png(&path, img)?;
                    written.push(path);
                }
            }
        }
        other => {
            return Err(Error::invalid(format!("cannot render stage-{other} checkpoints")));
        }
    }
    Ok(written)
}
