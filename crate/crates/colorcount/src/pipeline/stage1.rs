//! Stage 1: self-supervised colorization pretraining.
//!
//! Each step runs one batch through the full cycle graph — lightness → color
//! distribution (G, with the group classifier on G's features), decoded
//! chroma → lightness (F), both adversaries, the cycle reconstructions and
//! the frozen texture extractor — and updates the discriminators and the
//! generator side simultaneously from the same forward pass: both gradient
//! sets are computed against the current weights before either update is
//! applied.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD};

use crate::color_space::AB_MAX;
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, colorization_loss_sparse, cycle_loss, gan_losses, texture_loss,
    total_pretrain_loss, FeatureStack, LossWeights,
};
use crate::networks::{
    add_stage1_params, classifier_logits, decode_node, describe, discriminator_score,
    generator_logits, inverse_lightness, IgcBlockSpec, NetworkRole,
};
use crate::nn::{name_has_prefix, ConvSpec, Initializer, Optimizer, ParamStore, Tape};
use crate::pipeline::checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::{
    chroma_batch, epoch_order, lightness_batch, prepare_stage1, LabeledScene, Stage1Item,
};
use crate::quantization::{
    build_codebook, QuantArtifacts, RebalanceAccumulator, DEFAULT_GAMUT_SAMPLES, DEFAULT_MIX,
};

/// Number of frozen texture-extractor maps.
pub const TEX_MAPS: usize = 8;
/// Dedicated seed for the frozen texture extractor, independent of the
/// training seed so the feature basis is identical across runs.
const TEX_SEED: u64 = 0x7e_c5_11;

/// Loss values for one batch (training step or probe evaluation). GAN
/// columns are unweighted; `total` is the weighted generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub gan_g: f64,
    pub gan_f: f64,
    pub colorization: f64,
    pub cycle: f64,
    pub texture: f64,
    pub classification: f64,
    pub d_x: f64,
    pub d_z: f64,
    pub total: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "step,gan_g,gan_f,colorization,cycle,texture,classification,d_x,d_z,total";
pub const PROBE_LOG_HEADER: &str =
    "epoch,gan_g,gan_f,colorization,cycle,texture,classification,d_x,d_z,total";

impl StepLosses {
    fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.gan_g,
            self.gan_f,
            self.colorization,
            self.cycle,
            self.texture,
            self.classification,
            self.d_x,
            self.d_z,
            self.total
        )
    }

    fn check_finite(&self, step: u64) -> Result<()> {
        for (term, v) in [
            ("gan_g", self.gan_g),
            ("gan_f", self.gan_f),
            ("colorization", self.colorization),
            ("cycle", self.cycle),
            ("texture", self.texture),
            ("classification", self.classification),
            ("d_x", self.d_x),
            ("d_z", self.d_z),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: term.into(), step });
            }
        }
        Ok(())
    }
}

/// Probe-batch losses recorded before training and after each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeLosses {
    /// Number of completed epochs at evaluation time.
    pub epoch: usize,
    pub losses: StepLosses,
}

/// What [`pretrain`] leaves behind.
#[derive(Debug)]
pub struct PretrainOutcome {
    /// Path of the final checkpoint.
    pub checkpoint: PathBuf,
    pub probe_history: Vec<ProbeLosses>,
    /// Per-step CSV rows written during this run (without header).
    pub log_rows: Vec<String>,
}

/// Add the frozen texture-extractor weights to a stage-1 store.
pub fn add_texture_params(store: &mut ParamStore) -> Result<()> {
    let mut init = Initializer::new(TEX_SEED);
    store.add("tex.conv.w", init.gaussian(&[TEX_MAPS, 2, 3, 3], 2 * 3 * 3))?;
    Ok(())
}

fn stage1_manifest(
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
    q: usize,
    quant: &QuantArtifacts,
) -> CheckpointManifest {
    let igc = IgcBlockSpec::default();
    let m = cfg.groups as usize;
    CheckpointManifest {
        stage: 1,
        epoch,
        step,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        optimizer: cfg.optimizer.clone(),
        networks: vec![
            describe(NetworkRole::GeneratorG, q, m, &igc),
            describe(NetworkRole::ClassifierHead, q, m, &igc),
            describe(NetworkRole::InverseF, q, m, &igc),
            describe(NetworkRole::DiscriminatorX, q, m, &igc),
            describe(NetworkRole::DiscriminatorZ, q, m, &igc),
        ],
        quant: Some(quant.clone()),
        tensors: Vec::new(),
    }
}

/// Per-pixel softmax of one batch slot of a logits tensor, as (H, W, Q) f64.
fn softmax_image(logits: &Array4<f32>, i: usize) -> Array3<f64> {
    let (_, q, h, w) = logits.dim();
    let mut out = Array3::zeros((h, w, q));
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for k in 0..q {
                maxv = maxv.max(logits[[i, k, y, x]] as f64);
            }
            let mut sum = 0.0;
            for k in 0..q {
                let e = (logits[[i, k, y, x]] as f64 - maxv).exp();
                out[[y, x, k]] = e;
                sum += e;
            }
            for k in 0..q {
                out[[y, x, k]] /= sum;
            }
        }
    }
    out
}

fn flatten_f64(a: &Array4<f32>) -> Vec<f64> {
    a.iter().map(|&v| v as f64).collect()
}

fn probs_vec(a: &Array4<f32>) -> Vec<f64> {
    a.iter().map(|&v| v as f64).collect()
}

fn seed_from_grad(shape: (usize, usize, usize, usize), grad: &[f64], scale: f64) -> Array4<f32> {
    let mut out = Array4::zeros(shape);
    for (o, &g) in out.iter_mut().zip(grad) {
        *o = (g * scale) as f32;
    }
    out
}

struct Stage1Ctx<'a> {
    items: &'a [Stage1Item],
    quant: &'a QuantArtifacts,
    weights: LossWeights,
    gan_weight: f64,
    /// Group labels for every item, present iff all items carry one.
    labels: Option<Vec<crate::priors::GroupLabel>>,
}

type GradPair = (Vec<Option<ArrayD<f32>>>, Vec<Option<ArrayD<f32>>>);

/// Run one batch through both tapes. Returns the loss values and, when
/// `train` is set, the generator-side and discriminator-side gradients,
/// both taken at the current weights.
fn run_stage1_batch(
    store: &ParamStore,
    ctx: &Stage1Ctx,
    batch: &[usize],
    train: bool,
    step: u64,
) -> Result<(StepLosses, Option<GradPair>)> {
    let items: Vec<&Stage1Item> = batch.iter().map(|&i| &ctx.items[i]).collect();
    let b = items.len();
    let x = lightness_batch(&items);
    let z = chroma_batch(&items);
    let (h, w) = (x.dim().2, x.dim().3);
    let cb = &ctx.quant.codebook;

    // generator-side graph
    let mut tape_g = Tape::new(store);
    let x_in = tape_g.input(x.clone());
    let (feats, logits) = generator_logits(&mut tape_g, x_in)?;
    let ab_hat = decode_node(&mut tape_g, logits, cb)?;
    let dz_fake_g = discriminator_score(&mut tape_g, ab_hat, "dz")?;
    let x_hat = inverse_lightness(&mut tape_g, ab_hat)?;
    let tex_w = tape_g.param_id("tex.conv.w")?;
    let tex_spec = ConvSpec { stride: 1, pad: 1, dilation: 1, groups: 1 };
    let tex_in = tape_g.scale(ab_hat, 1.0 / AB_MAX as f32);
    let tex_pred = tape_g.conv2d(tex_in, tex_w, None, tex_spec)?;
    let z_tex_in = tape_g.input(z.mapv(|v| v / AB_MAX as f32));
    let tex_target = tape_g.conv2d(z_tex_in, tex_w, None, tex_spec)?;
    let z_in = tape_g.input(z.clone());
    let x_tilde = inverse_lightness(&mut tape_g, z_in)?;
    let dx_fake_g = discriminator_score(&mut tape_g, x_tilde, "dx")?;
    let (_, logits_cycle) = generator_logits(&mut tape_g, x_tilde)?;
    let z_hat = decode_node(&mut tape_g, logits_cycle, cb)?;
    let cls = match &ctx.labels {
        Some(_) => Some(classifier_logits(&mut tape_g, feats)?),
        None => None,
    };

    // discriminator graph on real data and detached fakes
    let mut tape_d = Tape::new(store);
    let xr = tape_d.input(x.clone());
    let zr = tape_d.input(z.clone());
    let xf = tape_d.input(tape_g.value(x_tilde).clone());
    let zf = tape_d.input(tape_g.value(ab_hat).clone());
    let dx_real = discriminator_score(&mut tape_d, xr, "dx")?;
    let dx_fake = discriminator_score(&mut tape_d, xf, "dx")?;
    let dz_real = discriminator_score(&mut tape_d, zr, "dz")?;
    let dz_fake = discriminator_score(&mut tape_d, zf, "dz")?;

    // loss values and per-node gradients (all f64)
    let gan_z = gan_losses(&probs_vec(tape_d.value(dz_real)), &probs_vec(tape_d.value(dz_fake)))?;
    let gan_x = gan_losses(&probs_vec(tape_d.value(dx_real)), &probs_vec(tape_d.value(dx_fake)))?;

    let logits_val = tape_g.value(logits);
    let pixel_norm = (b * h * w) as f64;
    let mut l_cc = 0.0;
    let mut cc_seed = Array4::<f32>::zeros(logits_val.dim());
    for (i, item) in items.iter().enumerate() {
        let probs = softmax_image(logits_val, i);
        let (v, g) = colorization_loss_sparse(&probs, &item.encoding, &ctx.quant.rebalance)?;
        l_cc += v / pixel_norm;
        let scale = ctx.weights.alpha / pixel_norm;
        for y in 0..h {
            for xx in 0..w {
                for k in 0..g.dim().2 {
                    cc_seed[[i, k, y, xx]] = (g[[y, xx, k]] * scale) as f32;
                }
            }
        }
    }

    let x_flat = flatten_f64(&x);
    let z_flat = flatten_f64(&z);
    let x_rec = flatten_f64(tape_g.value(x_hat));
    let z_rec = flatten_f64(tape_g.value(z_hat));
    let (l_cyc, gx_cyc, gz_cyc) = cycle_loss(&x_flat, &x_rec, &z_flat, &z_rec)?;

    let tex_pred_val = tape_g.value(tex_pred);
    let tex_target_val = tape_g.value(tex_target);
    let mut l_tex = 0.0;
    let mut tex_seed = Array4::<f32>::zeros(tex_pred_val.dim());
    for i in 0..b {
        let to_stack = |t: &Array4<f32>| -> Result<FeatureStack> {
            let mut maps = Array2::zeros((TEX_MAPS, h * w));
            for m in 0..TEX_MAPS {
                for y in 0..h {
                    for xx in 0..w {
                        maps[[m, y * w + xx]] = t[[i, m, y, xx]] as f64;
                    }
                }
            }
            FeatureStack::new(maps)
        };
        let pred_stack = to_stack(tex_pred_val)?;
        let target_stack = to_stack(tex_target_val)?;
        let (v, g) = texture_loss(&pred_stack, &target_stack)?;
        l_tex += v / b as f64;
        let scale = ctx.weights.gamma / b as f64;
        for m in 0..TEX_MAPS {
            for y in 0..h {
                for xx in 0..w {
                    tex_seed[[i, m, y, xx]] = (g[[m, y * w + xx]] * scale) as f32;
                }
            }
        }
    }

    let (l_cla, cla_grad) = match (&ctx.labels, cls) {
        (Some(labels), Some(cls_node)) => {
            let val = tape_g.value(cls_node);
            let m = val.dim().1;
            let mut logits2 = Array2::zeros((b, m));
            for i in 0..b {
                for j in 0..m {
                    logits2[[i, j]] = val[[i, j, 0, 0]] as f64;
                }
            }
            let batch_labels: Vec<_> = batch.iter().map(|&i| labels[i]).collect();
            let (v, g) = classification_loss(&logits2, &batch_labels)?;
            (v, Some(g))
        }
        _ => (0.0, None),
    };

    let gw = ctx.gan_weight;
    let losses = StepLosses {
        gan_g: gan_z.generator_loss,
        gan_f: gan_x.generator_loss,
        colorization: l_cc,
        cycle: l_cyc,
        texture: l_tex,
        classification: l_cla,
        d_x: gan_x.discriminator_loss,
        d_z: gan_z.discriminator_loss,
        total: total_pretrain_loss(
            gw * gan_z.generator_loss,
            gw * gan_x.generator_loss,
            l_cc,
            l_cyc,
            l_tex,
            l_cla,
            &ctx.weights,
        ),
    };
    losses.check_finite(step)?;
    if !train {
        return Ok((losses, None));
    }

    // seed both tapes and compute every gradient before any update
    let mut seeds_g: Vec<(crate::nn::NodeId, Array4<f32>)> = Vec::new();
    if ctx.weights.alpha > 0.0 {
        seeds_g.push((logits, cc_seed));
    }
    if gw > 0.0 {
        let score_dim = tape_g.value(dz_fake_g).dim();
        seeds_g.push((dz_fake_g, seed_from_grad(score_dim, &gan_z.gen_grad_on_fake, gw)));
        let score_dim = tape_g.value(dx_fake_g).dim();
        seeds_g.push((dx_fake_g, seed_from_grad(score_dim, &gan_x.gen_grad_on_fake, gw)));
    }
    if ctx.weights.beta > 0.0 {
        seeds_g.push((x_hat, seed_from_grad(x.dim(), &gx_cyc, ctx.weights.beta)));
        seeds_g.push((z_hat, seed_from_grad(z.dim(), &gz_cyc, ctx.weights.beta)));
    }
    if ctx.weights.gamma > 0.0 {
        seeds_g.push((tex_pred, tex_seed));
    }
    if ctx.weights.lambda > 0.0 {
        if let (Some(cls_node), Some(g)) = (cls, &cla_grad) {
            let mut seed = Array4::zeros(tape_g.value(cls_node).dim());
            for i in 0..b {
                for j in 0..g.dim().1 {
                    seed[[i, j, 0, 0]] = (g[[i, j]] * ctx.weights.lambda) as f32;
                }
            }
            seeds_g.push((cls_node, seed));
        }
    }

    let score_dim = tape_d.value(dz_real).dim();
    let seeds_d = vec![
        (dz_real, seed_from_grad(score_dim, &gan_z.disc_grad_on_real, gw)),
        (dz_fake, seed_from_grad(score_dim, &gan_z.disc_grad_on_fake, gw)),
        (dx_real, seed_from_grad(score_dim, &gan_x.disc_grad_on_real, gw)),
        (dx_fake, seed_from_grad(score_dim, &gan_x.disc_grad_on_fake, gw)),
    ];

    let grads_g = tape_g.backward(seeds_g)?.into_param_grads();
    let grads_d = tape_d.backward(seeds_d)?.into_param_grads();
    Ok((losses, Some((grads_g, grads_d))))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Run colorization pretraining over an unlabeled (or group-labeled) corpus.
///
/// Writes per-step losses to `train_log.csv`, probe-batch losses to
/// `probe_log.csv`, a checkpoint after every epoch (`epoch-NNN.bin`) and the
/// final state to `checkpoint.bin`, all under `out_dir`. `resume` continues
/// from a checkpoint written by a previous run with the same configuration,
/// reproducing exactly the steps the uninterrupted run would have taken.
pub fn pretrain(
    scenes: &[LabeledScene],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::invalid(format!("pretraining requires stage 1, config says {}", cfg.stage)));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let weights = cfg.weights()?;

    let resumed: Option<Checkpoint> = match resume {
        Some(path) => {
            let ck = crate::pipeline::checkpoint::load_checkpoint(path)?;
            if ck.manifest.stage != 1 {
                return Err(Error::invalid(format!(
                    "cannot resume stage-1 training from a stage-{} checkpoint",
                    ck.manifest.stage
                )));
            }
            if ck.manifest.config_hash != cfg.hash() {
                return Err(Error::invalid(
                    "checkpoint was produced by a different configuration",
                ));
            }
            Some(ck)
        }
        None => None,
    };

    let quant = match &resumed {
        Some(ck) => ck
            .manifest
            .quant
            .clone()
            .ok_or_else(|| Error::invalid("stage-1 checkpoint lacks quantization artifacts"))?,
        None => {
            let codebook = build_codebook(cfg.grid_spacing, DEFAULT_GAMUT_SAMPLES)?;
            // rebalance is fitted below once the corpus is encoded
            QuantArtifacts {
                codebook: codebook.clone(),
                rebalance: crate::quantization::RebalanceWeights::uniform(codebook.q()),
            }
        }
    };

    let items = prepare_stage1(scenes, cfg.train_size, &quant.codebook, cfg.groups)?;
    let quant = match &resumed {
        Some(_) => quant,
        None => {
            let mut acc = RebalanceAccumulator::new(quant.codebook.q());
            for item in &items {
                acc.add_sparse(&item.encoding)?;
            }
            QuantArtifacts { codebook: quant.codebook, rebalance: acc.finish(DEFAULT_MIX)? }
        }
    };

    let labels = if items.iter().all(|i| i.group.is_some()) {
        Some(items.iter().map(|i| i.group.unwrap()).collect())
    } else {
        if weights.lambda > 0.0 {
            return Err(Error::invalid(
                "classification weight is positive but some images lack group labels \
                 (set lambda = 0 to train without the prior)",
            ));
        }
        None
    };

    let mut store = ParamStore::new();
    let mut init = Initializer::new(cfg.seed);
    add_stage1_params(&mut store, &mut init, quant.codebook.q(), cfg.groups as usize)?;
    add_texture_params(&mut store)?;
    let mut opt = Optimizer::from_kind(&cfg.optimizer, cfg.lr())?;
    let (mut start_epoch, mut step) = (0usize, 0u64);
    if let Some(ck) = &resumed {
        if ck.params.len() != store.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, expected {}",
                ck.params.len(),
                store.len()
            )));
        }
        for id in ck.params.ids_by_name() {
            let name = ck.params.name(id);
            let target = store
                .id(name)
                .ok_or_else(|| Error::invalid(format!("unexpected tensor {name:?} in checkpoint")))?;
            store.set(target, ck.params.get(id).clone())?;
        }
        opt.load_state(&store, &ck.opt_state)?;
        start_epoch = ck.manifest.epoch;
        step = ck.manifest.step;
    }

    let ctx = Stage1Ctx {
        items: &items,
        quant: &quant,
        weights,
        gan_weight: cfg.gan_weight,
        labels,
    };
    let probe: Vec<usize> = (0..items.len().min(cfg.batch_size)).collect();
    let train_log = out_dir.join("train_log.csv");
    let probe_log = out_dir.join("probe_log.csv");
    append_line(&train_log, TRAIN_LOG_HEADER)?;
    append_line(&probe_log, PROBE_LOG_HEADER)?;

    let mut probe_history = Vec::new();
    let mut log_rows = Vec::new();
    let record_probe = |store: &ParamStore,
                        epoch: usize,
                        step: u64,
                        history: &mut Vec<ProbeLosses>|
     -> Result<()> {
        let (losses, _) = run_stage1_batch(store, &ctx, &probe, false, step)?;
        history.push(ProbeLosses { epoch, losses });
        append_line(&probe_log, &format!("{epoch},{}", losses.csv_fields()))
    };
    record_probe(&store, start_epoch, step, &mut probe_history)?;

    for epoch in start_epoch..cfg.epoch_count() {
        let order = epoch_order(items.len(), cfg.seed, epoch as u64);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let (losses, grads) = run_stage1_batch(&store, &ctx, chunk, true, step)?;
            let (grads_g, grads_d) = grads.expect("training mode returns gradients");
            opt.step(&mut store, &grads_d, name_has_prefix(&["dx.", "dz."]));
            opt.step(&mut store, &grads_g, name_has_prefix(&["g.", "f.", "cls."]));
            let row = format!("{step},{}", losses.csv_fields());
            append_line(&train_log, &row)?;
            log_rows.push(row);
        }
        record_probe(&store, epoch + 1, step, &mut probe_history)?;
        let manifest = stage1_manifest(cfg, epoch + 1, step, quant.codebook.q(), &quant);
        save_checkpoint(&out_dir.join(format!("epoch-{:03}.bin", epoch + 1)), manifest, &store, Some(&opt))?;
    }

    let final_path = out_dir.join("checkpoint.bin");
    let manifest = stage1_manifest(cfg, cfg.epoch_count(), step, quant.codebook.q(), &quant);
    save_checkpoint(&final_path, manifest, &store, Some(&opt))?;
    Ok(PretrainOutcome { checkpoint: final_path, probe_history, log_rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{synth_corpus, SynthConfig};
    use crate::pipeline::data::scenes_from_synth;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            stage: 1,
            batch_size: 4,
            epochs: Some(1),
            train_size: 32,
            grid_spacing: 55.0,
            seed: 11,
            ..Default::default()
        }
    }

    fn tiny_scenes(n: usize) -> Vec<LabeledScene> {
        let config = SynthConfig { height: 48, width: 48, ..Default::default() };
        scenes_from_synth(&synth_corpus(&config, n, 31).unwrap())
    }

    #[test]
    fn one_epoch_updates_every_subnetwork_but_not_the_extractor() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let scenes = tiny_scenes(4);
        let out = pretrain(&scenes, &cfg, dir.path(), None).unwrap();
        assert_eq!(out.log_rows.len(), 1); // 4 images, batch 4, 1 epoch
        assert_eq!(out.probe_history.len(), 2);

        let quant_q = build_codebook(cfg.grid_spacing, DEFAULT_GAMUT_SAMPLES).unwrap().q();
        let mut fresh = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        add_stage1_params(&mut fresh, &mut init, quant_q, cfg.groups as usize).unwrap();
        add_texture_params(&mut fresh).unwrap();

        let ck = crate::pipeline::checkpoint::load_checkpoint(&out.checkpoint).unwrap();
        let changed_under = |prefix: &str| {
            fresh.ids_by_name().any(|id| {
                let name = fresh.name(id);
                if !name.starts_with(prefix) {
                    return false;
                }
                let after = ck.params.get(ck.params.id(name).unwrap());
                fresh.get(id) != after
            })
        };
        for prefix in ["g.", "f.", "cls.", "dx.", "dz."] {
            assert!(changed_under(prefix), "no parameter under {prefix} changed");
        }
        let tex_before = fresh.get(fresh.id("tex.conv.w").unwrap());
        let tex_after = ck.params.get(ck.params.id("tex.conv.w").unwrap());
        assert_eq!(tex_before, tex_after, "frozen extractor must not train");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let scenes = tiny_scenes(4);
        let cfg = tiny_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = pretrain(&scenes, &cfg, d1.path(), None).unwrap();
        let b = pretrain(&scenes, &cfg, d2.path(), None).unwrap();
        assert_eq!(a.log_rows, b.log_rows);
        let ca = std::fs::read(&a.checkpoint).unwrap();
        let cb = std::fs::read(&b.checkpoint).unwrap();
        assert_eq!(ca, cb, "final checkpoints must be byte-identical");
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let scenes = tiny_scenes(8); // 2 steps per epoch at batch 4
        let mut cfg = tiny_cfg();
        cfg.epochs = Some(2);

        let full_dir = tempfile::tempdir().unwrap();
        let full = pretrain(&scenes, &cfg, full_dir.path(), None).unwrap();
        assert_eq!(full.log_rows.len(), 4);

        // the full run leaves an epoch-001 checkpoint behind; treat it as the
        // state of an interrupted run and continue from there
        let part_dir = tempfile::tempdir().unwrap();
        let resumed = pretrain(
            &scenes,
            &cfg,
            part_dir.path(),
            Some(&full_dir.path().join("epoch-001.bin")),
        )
        .unwrap();
        assert_eq!(resumed.log_rows, full.log_rows[2..].to_vec());
        let ca = std::fs::read(&full.checkpoint).unwrap();
        let cb = std::fs::read(&resumed.checkpoint).unwrap();
        assert_eq!(ca, cb, "resumed run must end in the identical checkpoint");
    }

    #[test]
    fn resume_rejects_other_configs_and_stages() {
        let scenes = tiny_scenes(4);
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&scenes, &cfg, dir.path(), None).unwrap();
        let mut other = cfg.clone();
        other.learning_rate = Some(3e-4);
        let err =
            pretrain(&scenes, &other, dir.path(), Some(&out.checkpoint)).unwrap_err();
        assert!(err.to_string().contains("configuration"), "{err}");
    }

    #[test]
    fn colorization_alone_improves_on_the_probe_batch() {
        let scenes = tiny_scenes(4);
        let mut cfg = tiny_cfg();
        cfg.epochs = Some(4);
        cfg.learning_rate = Some(1e-3);
        cfg.gan_weight = 0.0;
        cfg.beta = 0.0;
        cfg.gamma = 0.0;
        cfg.lambda = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&scenes, &cfg, dir.path(), None).unwrap();
        let first = out.probe_history.first().unwrap().losses.colorization;
        let last = out.probe_history.last().unwrap().losses.colorization;
        assert!(
            last < first,
            "colorization loss should fall on the probe batch: {first} -> {last}"
        );
    }
}
