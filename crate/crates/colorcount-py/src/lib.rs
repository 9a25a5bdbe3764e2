//! Python bindings for the main colorcount types and operations: color-space
//! conversion, chroma quantization, density-map rendering, the synthetic
//! corpus, both training stages, evaluation, and checkpoint inference.

use std::path::{Path, PathBuf};

use numpy::{
    IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use colorcount::color_space::{self, LabImage, RgbImage};
use colorcount::density::{
    count_from_density, density_from_points, synth_corpus, HeadAnnotations, KernelMode,
    SynthConfig,
};
use colorcount::eval::evaluate_model;
use colorcount::networks::{classifier_forward, colorize_forward, count_forward};
use colorcount::pipeline::{self, load_checkpoint, load_dataset, save_dataset, TrainConfig};
use colorcount::quantization::{
    build_codebook, decode_annealed_mean, soft_encode_sparse, ColorCodebook,
    DEFAULT_GAMUT_SAMPLES, DEFAULT_K, DEFAULT_TEMPERATURE,
};

fn err(e: colorcount::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image_from(rgb: PyReadonlyArray3<'_, f64>) -> PyResult<RgbImage> {
    RgbImage::new(rgb.as_array().to_owned()).map_err(err)
}

/// Convert an H x W x 3 sRGB array in [0, 1] into (lightness, chroma).
#[pyfunction]
fn rgb_to_lab<'py>(
    py: Python<'py>,
    rgb: PyReadonlyArray3<'py, f64>,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray3<f64>>)> {
    let lab = color_space::rgb_to_lab(&image_from(rgb)?);
    Ok((lab.lightness.into_pyarray(py), lab.chroma.into_pyarray(py)))
}

/// Recompose lightness (H x W) and chroma (H x W x 2) into sRGB in [0, 1].
#[pyfunction]
fn lab_to_rgb<'py>(
    py: Python<'py>,
    lightness: PyReadonlyArray2<'py, f64>,
    chroma: PyReadonlyArray3<'py, f64>,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let lab = LabImage::new(lightness.as_array().to_owned(), chroma.as_array().to_owned())
        .map_err(err)?;
    Ok(color_space::lab_to_rgb(&lab).pixels.into_pyarray(py))
}

/// Render (x, y) head positions into a density map whose sum equals the
/// number of points. Pass `sigma` for a fixed kernel; otherwise the bandwidth
/// adapts to the mean distance of the `k` nearest neighbors scaled by `beta`.
#[pyfunction]
#[pyo3(signature = (points, height, width, beta=0.3, k=3, sigma=None))]
fn density_map<'py>(
    py: Python<'py>,
    points: Vec<(f64, f64)>,
    height: usize,
    width: usize,
    beta: f64,
    k: usize,
    sigma: Option<f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let ann = HeadAnnotations::new(points, (height, width)).map_err(err)?;
    let mode = match sigma {
        Some(sigma) => KernelMode::Fixed { sigma },
        None => KernelMode::Adaptive { beta, k },
    };
    let map = density_from_points(&ann, mode).map_err(err)?;
    Ok(map.values.into_pyarray(py))
}

/// Mean absolute error and root-mean-squared error between count vectors.
#[pyfunction]
fn mae_mse(true_counts: Vec<f64>, pred_counts: Vec<f64>) -> PyResult<(f64, f64)> {
    let report = colorcount::eval::mae_mse(&true_counts, &pred_counts).map_err(err)?;
    Ok((report.mae, report.mse))
}

/// Write a synthetic crowd dataset (images/ + annotations.jsonl) and return
/// the per-scene head counts.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed, height=128, width=128))]
fn synth_dataset(
    out_dir: PathBuf,
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> PyResult<Vec<usize>> {
    let config = SynthConfig { height, width, ..Default::default() };
    let scenes = synth_corpus(&config, n, seed).map_err(err)?;
    save_dataset(&out_dir, &scenes).map_err(err)?;
    Ok(scenes.iter().map(|s| s.annotations.count()).collect())
}

#[allow(clippy::too_many_arguments)]
fn config_from(
    stage: u8,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    train_size: Option<usize>,
    grid_spacing: Option<f64>,
    subset_fraction: Option<f64>,
    gan_weight: Option<f64>,
    freeze_frontend: Option<bool>,
) -> TrainConfig {
    let mut cfg = TrainConfig { stage, ..Default::default() };
    cfg.epochs = epochs.or(cfg.epochs);
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    cfg.learning_rate = learning_rate.or(cfg.learning_rate);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = train_size {
        cfg.train_size = t;
    }
    if let Some(g) = grid_spacing {
        cfg.grid_spacing = g;
    }
    if let Some(f) = subset_fraction {
        cfg.subset_fraction = f;
    }
    if let Some(g) = gan_weight {
        cfg.gan_weight = g;
    }
    if let Some(f) = freeze_frontend {
        cfg.freeze_frontend = f;
    }
    cfg
}

/// Stage 1: colorization pretraining on the dataset at `data_dir`. Returns
/// the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, epochs=None, batch_size=None, learning_rate=None,
                    seed=None, train_size=None, grid_spacing=None, gan_weight=None))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    data_dir: PathBuf,
    out_dir: PathBuf,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    train_size: Option<usize>,
    grid_spacing: Option<f64>,
    gan_weight: Option<f64>,
) -> PyResult<String> {
    let cfg = config_from(
        1, epochs, batch_size, learning_rate, seed, train_size, grid_spacing, None, gan_weight,
        None,
    );
    let scenes = load_dataset(&data_dir).map_err(err)?;
    let outcome = pipeline::pretrain(&scenes, &cfg, &out_dir, None).map_err(err)?;
    Ok(outcome.checkpoint.display().to_string())
}

fn stage2_config(
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    train_size: Option<usize>,
    subset_fraction: Option<f64>,
    freeze_frontend: Option<bool>,
) -> TrainConfig {
    config_from(
        2, epochs, batch_size, learning_rate, seed, train_size, None, subset_fraction, None,
        freeze_frontend,
    )
}

/// Stage 2: fine-tune counting from a stage-1 checkpoint on a labeled subset.
#[pyfunction]
#[pyo3(signature = (ckpt, data_dir, out_dir, fraction=None, epochs=None, batch_size=None,
                    learning_rate=None, seed=None, train_size=None, freeze_frontend=None))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    ckpt: PathBuf,
    data_dir: PathBuf,
    out_dir: PathBuf,
    fraction: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    train_size: Option<usize>,
    freeze_frontend: Option<bool>,
) -> PyResult<String> {
    let cfg = stage2_config(
        epochs, batch_size, learning_rate, seed, train_size, fraction, freeze_frontend,
    );
    let stage1 = load_checkpoint(&ckpt).map_err(err)?;
    let scenes = load_dataset(&data_dir).map_err(err)?;
    let outcome = pipeline::finetune(&stage1, &scenes, &cfg, &out_dir).map_err(err)?;
    Ok(outcome.checkpoint.display().to_string())
}

/// Stage-2 baseline: train the counting network from random initialization.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, fraction=None, epochs=None, batch_size=None,
                    learning_rate=None, seed=None, train_size=None))]
#[allow(clippy::too_many_arguments)]
fn train_from_scratch(
    data_dir: PathBuf,
    out_dir: PathBuf,
    fraction: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    train_size: Option<usize>,
) -> PyResult<String> {
    let cfg = stage2_config(epochs, batch_size, learning_rate, seed, train_size, fraction, None);
    let scenes = load_dataset(&data_dir).map_err(err)?;
    let outcome = pipeline::train_from_scratch(&scenes, &cfg, &out_dir).map_err(err)?;
    Ok(outcome.checkpoint.display().to_string())
}

/// Score a stage-2 checkpoint on a labeled dataset; returns (mae, mse, n).
#[pyfunction]
#[pyo3(signature = (ckpt, data_dir, size=128, csv_out=None))]
fn evaluate(
    ckpt: PathBuf,
    data_dir: PathBuf,
    size: usize,
    csv_out: Option<PathBuf>,
) -> PyResult<(f64, f64, usize)> {
    let checkpoint = load_checkpoint(&ckpt).map_err(err)?;
    let scenes = load_dataset(&data_dir).map_err(err)?;
    let report =
        evaluate_model(&checkpoint, &scenes, size, csv_out.as_deref()).map_err(err)?;
    Ok((report.mae, report.mse, report.n_images))
}

/// Chroma codebook over the in-gamut ab plane.
#[pyclass]
struct Codebook {
    inner: ColorCodebook,
}

#[pymethods]
impl Codebook {
    /// Build a grid codebook with the given spacing; `gamut_samples = 0`
    /// keeps every cell instead of filtering to the sRGB gamut.
    #[staticmethod]
    #[pyo3(signature = (grid_spacing, gamut_samples=None))]
    fn build(grid_spacing: f64, gamut_samples: Option<usize>) -> PyResult<Self> {
        let inner =
            build_codebook(grid_spacing, gamut_samples.unwrap_or(DEFAULT_GAMUT_SAMPLES))
                .map_err(err)?;
        Ok(Self { inner })
    }

    /// Number of retained bins.
    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    /// Soft-encode chroma (H x W x 2) and decode it back with the annealed
    /// mean; round-trip error stays within one grid spacing.
    fn roundtrip<'py>(
        &self,
        py: Python<'py>,
        chroma: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let ab = chroma.as_array().to_owned();
        let k = DEFAULT_K.min(self.inner.q());
        let enc =
            soft_encode_sparse(&ab, &self.inner, k, self.inner.default_sigma()).map_err(err)?;
        let decoded =
            decode_annealed_mean(&enc.to_dense(), &self.inner, DEFAULT_TEMPERATURE).map_err(err)?;
        Ok(decoded.into_pyarray(py))
    }
}

/// A trained model loaded from disk; offers the stage-appropriate forwards.
#[pyclass]
struct Checkpoint {
    inner: colorcount::pipeline::Checkpoint,
}

impl Checkpoint {
    fn codebook(&self) -> PyResult<&ColorCodebook> {
        self.inner
            .manifest
            .quant
            .as_ref()
            .map(|q| &q.codebook)
            .ok_or_else(|| PyValueError::new_err("checkpoint has no quantization artifacts"))
    }
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(Path::new(&path)).map_err(err)? })
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.manifest.stage
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.manifest.epoch
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.manifest.seed
    }

    /// Stage 2: density map (H x W) for an sRGB image in [0, 1].
    fn predict_density<'py>(
        &self,
        py: Python<'py>,
        rgb: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let map = count_forward(&self.inner.params, &image_from(rgb)?).map_err(err)?;
        Ok(map.values.into_pyarray(py))
    }

    /// Stage 2: predicted head count for an sRGB image in [0, 1].
    fn predict_count(&self, rgb: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
        let map = count_forward(&self.inner.params, &image_from(rgb)?).map_err(err)?;
        Ok(count_from_density(&map))
    }

    /// Stage 1: predicted chroma (H x W x 2) for a lightness plane in
    /// [0, 100], decoded with the annealed mean.
    fn colorize<'py>(
        &self,
        py: Python<'py>,
        lightness: PyReadonlyArray2<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let light = lightness.as_array().to_owned();
        let dist = colorize_forward(&self.inner.params, &light).map_err(err)?;
        let ab = decode_annealed_mean(&dist, self.codebook()?, DEFAULT_TEMPERATURE).map_err(err)?;
        Ok(ab.into_pyarray(py))
    }

    /// Stage 1: group logits for a lightness plane in [0, 100].
    fn classify(&self, lightness: PyReadonlyArray2<'_, f64>) -> PyResult<Vec<f64>> {
        let light = lightness.as_array().to_owned();
        classifier_forward(&self.inner.params, &light).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(stage={}, epoch={}, params={})",
            self.inner.manifest.stage,
            self.inner.manifest.epoch,
            self.inner.params.scalar_count()
        )
    }
}

#[pymodule]
fn colorcount_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Checkpoint>()?;
    m.add_class::<Codebook>()?;
    m.add_function(wrap_pyfunction!(rgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(lab_to_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(density_map, m)?)?;
    m.add_function(wrap_pyfunction!(mae_mse, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(train_from_scratch, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
