//! Training objectives: colorization cross-entropy with class rebalancing,
//! the two GAN losses, cycle reconstruction, Gram-matrix texture loss,
//! group classification, the weighted pretraining total, and the stage-2
//! Euclidean counting loss. Every loss returns its analytic gradient; the
//! test suite verifies each against central finite differences.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::priors::GroupLabel;
use crate::quantization::{ColorDistribution, RebalanceWeights, SparseEncoding};

/// Probabilities are clamped to at least this before any logarithm.
pub const EPSILON: f64 = 1e-12;

/// Weights of the pretraining objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Colorization term.
    pub alpha: f64,
    /// Cycle-reconstruction term.
    pub beta: f64,
    /// Texture term.
    pub gamma: f64,
    /// Classification term.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 10.0, gamma: 1e-4, lambda: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Colorization loss: −Σ_{h,w} v(Z_{h,w}) Σ_q Z_{h,w,q} log Ẑ_{h,w,q},
/// where v is the rebalance weight of the target's dominant bin.
///
/// The returned gradient is with respect to the prediction's softmax logits
/// (the natural parameterization for training): v·(Ẑ − Z) per pixel.
pub fn colorization_loss(
    pred: &ColorDistribution,
    target: &ColorDistribution,
    weights: &RebalanceWeights,
) -> Result<(f64, Array3<f64>)> {
    if pred.probs.dim() != target.probs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs target {:?}",
            pred.probs.dim(),
            target.probs.dim()
        )));
    }
    let v = weights.pixel_weights(target)?;
    let (h, w, q) = pred.probs.dim();
    let mut value = 0.0;
    let mut grad = Array3::zeros((h, w, q));
    for y in 0..h {
        for x in 0..w {
            let vw = v[[y, x]];
            for i in 0..q {
                let z = target.probs[[y, x, i]];
                let p = pred.probs[[y, x, i]];
                if z > 0.0 {
                    value -= vw * z * p.max(EPSILON).ln();
                }
                grad[[y, x, i]] = vw * (p - z);
            }
        }
    }
    Ok((value, grad))
}

/// [`colorization_loss`] against a k-sparse target, without materializing the
/// dense target tensor. `pred` must already be per-pixel softmax output.
pub fn colorization_loss_sparse(
    pred: &Array3<f64>,
    target: &SparseEncoding,
    weights: &RebalanceWeights,
) -> Result<(f64, Array3<f64>)> {
    let (h, w, q) = pred.dim();
    let (th, tw, k) = target.indices.dim();
    if (h, w) != (th, tw) || q != target.q {
        return Err(Error::ShapeMismatch(format!(
            "pred {h}x{w}x{q} vs sparse target {th}x{tw} with Q={}",
            target.q
        )));
    }
    if target.q != weights.per_bin.len() {
        return Err(Error::ShapeMismatch(format!(
            "target Q={} vs rebalance Q={}",
            target.q,
            weights.per_bin.len()
        )));
    }
    let argmax = target.argmax();
    let mut value = 0.0;
    let mut grad = Array3::zeros((h, w, q));
    for y in 0..h {
        for x in 0..w {
            let vw = weights.per_bin[argmax[[y, x]] as usize];
            for i in 0..q {
                grad[[y, x, i]] = vw * pred[[y, x, i]];
            }
            for i in 0..k {
                let bin = target.indices[[y, x, i]] as usize;
                let z = target.weights[[y, x, i]];
                if z > 0.0 {
                    value -= vw * z * pred[[y, x, bin]].max(EPSILON).ln();
                }
                grad[[y, x, bin]] -= vw * z;
            }
        }
    }
    Ok((value, grad))
}

/// Both adversarial losses for one discriminator and its generator, with
/// gradients with respect to the discriminator's probability outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GanLosses {
    /// −E[log D(real)] − E[log(1 − D(fake))].
    pub discriminator_loss: f64,
    /// Non-saturating −E[log D(fake)].
    pub generator_loss: f64,
    /// ∂ discriminator_loss / ∂ D(real).
    pub disc_grad_on_real: Vec<f64>,
    /// ∂ discriminator_loss / ∂ D(fake).
    pub disc_grad_on_fake: Vec<f64>,
    /// ∂ generator_loss / ∂ D(fake).
    pub gen_grad_on_fake: Vec<f64>,
}

/// GAN losses from discriminator outputs on a real and a fake batch.
pub fn gan_losses(disc_on_real: &[f64], disc_on_fake: &[f64]) -> Result<GanLosses> {
    if disc_on_real.is_empty() || disc_on_fake.is_empty() {
        return Err(Error::invalid("GAN loss batches must be non-empty"));
    }
    let clamp = |p: f64| p.clamp(EPSILON, 1.0 - EPSILON);
    let nr = disc_on_real.len() as f64;
    let nf = disc_on_fake.len() as f64;

    let mut discriminator_loss = 0.0;
    let mut disc_grad_on_real = Vec::with_capacity(disc_on_real.len());
    for &p in disc_on_real {
        let p = clamp(p);
        discriminator_loss -= p.ln() / nr;
        disc_grad_on_real.push(-1.0 / (nr * p));
    }
    let mut generator_loss = 0.0;
    let mut disc_grad_on_fake = Vec::with_capacity(disc_on_fake.len());
    let mut gen_grad_on_fake = Vec::with_capacity(disc_on_fake.len());
    for &p in disc_on_fake {
        let p = clamp(p);
        discriminator_loss -= (1.0 - p).ln() / nf;
        generator_loss -= p.ln() / nf;
        disc_grad_on_fake.push(1.0 / (nf * (1.0 - p)));
        gen_grad_on_fake.push(-1.0 / (nf * p));
    }
    Ok(GanLosses {
        discriminator_loss,
        generator_loss,
        disc_grad_on_real,
        disc_grad_on_fake,
        gen_grad_on_fake,
    })
}

/// Cycle-reconstruction loss: mean |x_rec − x| + mean |z_rec − z|, with
/// gradients with respect to the two reconstructions.
pub fn cycle_loss(
    x: &[f64],
    x_rec: &[f64],
    z: &[f64],
    z_rec: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if x.len() != x_rec.len() || z.len() != z_rec.len() || x.is_empty() || z.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "cycle loss needs matching non-empty pairs, got |x|={} |x_rec|={} |z|={} |z_rec|={}",
            x.len(),
            x_rec.len(),
            z.len(),
            z_rec.len()
        )));
    }
    let term = |a: &[f64], a_rec: &[f64]| {
        let n = a.len() as f64;
        let mut value = 0.0;
        let grad: Vec<f64> = a
            .iter()
            .zip(a_rec)
            .map(|(&ai, &ri)| {
                let d = ri - ai;
                value += d.abs() / n;
                d.signum() / n
            })
            .collect();
        (value, grad)
    };
    let (vx, gx) = term(x, x_rec);
    let (vz, gz) = term(z, z_rec);
    Ok((vx + vz, gx, gz))
}

/// Feature maps from a fixed frozen extractor: N_l maps of M_l elements.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    /// N_l × M_l, row i the flattened i-th feature map.
    pub maps: Array2<f64>,
}

impl FeatureStack {
    pub fn new(maps: Array2<f64>) -> Result<Self> {
        let (n, m) = maps.dim();
        if n == 0 || m == 0 {
            return Err(Error::invalid("feature stack must have N_l >= 1, M_l >= 1"));
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature stack entries must be finite"));
        }
        Ok(Self { maps })
    }
}

/// Gram matrix: entry (i, j) is the inner product of feature maps i and j.
pub fn gram(features: &FeatureStack) -> Array2<f64> {
    features.maps.dot(&features.maps.t())
}

/// Texture loss: (1 / 4N_l²M_l²) Σ_{i,j} (G_{i,j} − A_{i,j})², with gradient
/// with respect to the prediction's feature maps.
pub fn texture_loss(
    pred_feats: &FeatureStack,
    target_feats: &FeatureStack,
) -> Result<(f64, Array2<f64>)> {
    if pred_feats.maps.dim() != target_feats.maps.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pred features {:?} vs target features {:?}",
            pred_feats.maps.dim(),
            target_feats.maps.dim()
        )));
    }
    let (n, m) = pred_feats.maps.dim();
    let diff = gram(pred_feats) - gram(target_feats);
    let scale = 1.0 / (4.0 * (n * n) as f64 * (m * m) as f64);
    let value = scale * diff.iter().map(|d| d * d).sum::<f64>();
    // d/dF of c·Σ(G−A)² with G = F Fᵀ is 4c·(G−A)·F
    let grad = diff.dot(&pred_feats.maps) * (4.0 * scale);
    Ok((value, grad))
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Group-classification loss: mean over the batch of −log softmax(logits)
/// at the true group, with gradient with respect to the logits.
pub fn classification_loss(
    logits: &Array2<f64>,
    labels: &[GroupLabel],
) -> Result<(f64, Array2<f64>)> {
    let (b, m) = logits.dim();
    if b != labels.len() || b == 0 {
        return Err(Error::ShapeMismatch(format!(
            "got {b} logit rows for {} labels",
            labels.len()
        )));
    }
    if m < 2 {
        return Err(Error::invalid(format!("classification needs m >= 2 classes, got {m}")));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros((b, m));
    for (i, label) in labels.iter().enumerate() {
        if label.group == 0 || label.group as usize > m {
            return Err(Error::invalid(format!(
                "label {} out of range for {m} classes",
                label.group
            )));
        }
        let row: Vec<f64> = logits.row(i).to_vec();
        let probs = softmax_row(&row);
        let target = (label.group - 1) as usize;
        value -= probs[target].max(EPSILON).ln() / b as f64;
        for j in 0..m {
            grad[[i, j]] = (probs[j] - if j == target { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((value, grad))
}

/// The weighted pretraining total:
/// gan_G + gan_F + α·l_cc + β·l_cyc + γ·l_tex + λ·l_cla.
#[allow(clippy::too_many_arguments)]
pub fn total_pretrain_loss(
    gan_g_to_z: f64,
    gan_f_to_x: f64,
    l_cc: f64,
    l_cyc: f64,
    l_tex: f64,
    l_cla: f64,
    w: &LossWeights,
) -> f64 {
    gan_g_to_z + gan_f_to_x + w.alpha * l_cc + w.beta * l_cyc + w.gamma * l_tex + w.lambda * l_cla
}

/// Stage-2 counting loss: mean over pixels of the squared difference, with
/// gradient with respect to the prediction.
pub fn euclidean_count_loss(pred: &DensityMap, target: &DensityMap) -> Result<(f64, Array2<f64>)> {
    if pred.values.dim() != target.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs target {:?}",
            pred.values.dim(),
            target.values.dim()
        )));
    }
    let n = pred.values.len() as f64;
    let diff = &pred.values - &target.values;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff * (2.0 / n);
    Ok((value, grad))
}

/// Central-difference gradient of a scalar function, used to verify every
/// analytic gradient in this module.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let hi = f(&x);
            x[i] = orig - step;
            let lo = f(&x);
            x[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Worst per-component error between analytic and numeric gradients,
/// relative above magnitude 1 and absolute below it.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
