//! Stage 2: density-map counting, either fine-tuned from a stage-1
//! colorization checkpoint (first-layer weights duplicated across the three
//! RGB channels) or trained from scratch as a baseline.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};

use crate::density::{count_from_density, DensityMap};
use crate::error::{Error, Result};
use crate::losses::euclidean_count_loss;
use crate::networks::{
    add_counting_params, count_forward, counting_density, describe, transfer_first_layer,
    IgcBlockSpec, NetworkRole, DEFAULT_IGC_BLOCKS,
};
use crate::nn::{Initializer, Optimizer, ParamStore, Tape};
use crate::pipeline::checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::{
    epoch_order, prepare_stage2, rgb_batch, sample_subset, LabeledScene, Stage2Item,
};

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-image euclidean density loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean |predicted − true| count over the training items.
    pub train_mae: f64,
    /// Count MAE on the held-out split; absent when the labeled set is too
    /// small to spare validation images.
    pub val_mae: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_mae,val_mae";

/// What stage-2 training leaves behind.
#[derive(Debug)]
pub struct Stage2Outcome {
    /// Checkpoint of the best validation epoch (final epoch when there is no
    /// validation split).
    pub checkpoint: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

/// Fine-tune the counting network from a stage-1 colorization checkpoint.
pub fn finetune(
    stage1: &Checkpoint,
    scenes: &[LabeledScene],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Stage2Outcome> {
    if stage1.manifest.stage != 1 {
        return Err(Error::invalid(format!(
            "fine-tuning initializes from a stage-1 checkpoint, got stage {}",
            stage1.manifest.stage
        )));
    }
    train_stage2(Some(stage1), scenes, cfg, out_dir)
}

/// Train the counting network from random initialization (the no-pretraining
/// baseline).
pub fn train_from_scratch(
    scenes: &[LabeledScene],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Stage2Outcome> {
    train_stage2(None, scenes, cfg, out_dir)
}

fn stage2_manifest(cfg: &TrainConfig, epoch: usize, step: u64, igc: &IgcBlockSpec) -> CheckpointManifest {
    CheckpointManifest {
        stage: 2,
        epoch,
        step,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        optimizer: cfg.optimizer.clone(),
        networks: vec![describe(NetworkRole::CountingNet, 0, 0, igc)],
        quant: None,
        tensors: Vec::new(),
    }
}

fn density_slot(pred: &Array4<f32>, i: usize) -> Result<DensityMap> {
    let (_, _, h, w) = pred.dim();
    let mut values = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            values[[y, x]] = pred[[i, 0, y, x]] as f64;
        }
    }
    DensityMap::new(values)
}

fn mae_over(store: &ParamStore, items: &[Stage2Item]) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        let pred = count_forward(store, &item.image)?;
        total += (count_from_density(&pred) - item.count).abs();
    }
    Ok(total / items.len() as f64)
}

fn train_stage2(
    init_from: Option<&Checkpoint>,
    scenes: &[LabeledScene],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::invalid(format!(
            "counting training requires stage 2, config says {}",
            cfg.stage
        )));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("labeled corpus is empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // the subset draw shuffles, so the tail doubles as a validation split
    let sampled = sample_subset(scenes, cfg.subset_fraction, cfg.seed)?;
    let items = prepare_stage2(&sampled, cfg.train_size)?;
    let n = items.len();
    let val_n = if n >= 5 { n / 5 } else { 0 };
    let (train_items, val_items) = items.split_at(n - val_n);

    let igc = IgcBlockSpec::default();
    let mut store = ParamStore::new();
    let mut init = Initializer::new(cfg.seed);
    add_counting_params(&mut store, &mut init, &igc, DEFAULT_IGC_BLOCKS)?;
    if let Some(ck) = init_from {
        for (name, tensor) in transfer_first_layer(&ck.params)? {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::invalid(format!("missing counting parameter {name:?}")))?;
            store.set(id, tensor)?;
        }
    }
    let mut opt = Optimizer::from_kind(&cfg.optimizer, cfg.lr())?;
    let keep_frontend = !cfg.freeze_frontend;
    let keep = |name: &str| keep_frontend || !name.starts_with("count.front.");

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    use std::io::Write as _;
    writeln!(metrics_file, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let best_path = out_dir.join("best.bin");
    let final_path = out_dir.join("checkpoint.bin");
    let mut best_val = f64::INFINITY;
    let mut metrics = Vec::new();
    let mut step = 0u64;

    for epoch in 0..cfg.epoch_count() {
        let order = epoch_order(train_items.len(), cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Stage2Item> = chunk.iter().map(|&i| &train_items[i]).collect();
            let b = batch.len();
            let mut tape = Tape::new(&store);
            let rgb = tape.input(rgb_batch(&batch));
            let density = counting_density(&mut tape, rgb, &igc, DEFAULT_IGC_BLOCKS)?;
            let pred = tape.value(density);
            step += 1;
            let mut loss = 0.0;
            let mut seed = Array4::<f32>::zeros(pred.dim());
            for (i, item) in batch.iter().enumerate() {
                let pred_map = density_slot(pred, i)?;
                let (v, g) = euclidean_count_loss(&pred_map, &item.density)?;
                loss += v / b as f64;
                let (h, w) = g.dim();
                for y in 0..h {
                    for x in 0..w {
                        seed[[i, 0, y, x]] = (g[[y, x]] / b as f64) as f32;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { term: "euclidean".into(), step });
            }
            let grads = tape.backward(vec![(density, seed)])?.into_param_grads();
            opt.step(&mut store, &grads, keep);
            epoch_loss += loss;
            batches += 1;
        }

        let train_mae = mae_over(&store, train_items)?;
        let val_mae = if val_items.is_empty() { None } else { Some(mae_over(&store, val_items)?) };
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: epoch_loss / batches.max(1) as f64,
            train_mae,
            val_mae,
        };
        writeln!(
            metrics_file,
            "{},{},{},{}",
            row.epoch,
            row.train_loss,
            row.train_mae,
            row.val_mae.map(|v| v.to_string()).unwrap_or_default()
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        metrics.push(row);

        if let Some(v) = val_mae {
            if v < best_val {
                best_val = v;
                let manifest = stage2_manifest(cfg, epoch + 1, step, &igc);
                save_checkpoint(&best_path, manifest, &store, Some(&opt))?;
            }
        }
    }

    let manifest = stage2_manifest(cfg, cfg.epoch_count(), step, &igc);
    save_checkpoint(&final_path, manifest, &store, Some(&opt))?;
    let checkpoint = if best_val.is_finite() { best_path } else { final_path };
    Ok(Stage2Outcome { checkpoint, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{synth_corpus, SynthConfig};
    use crate::pipeline::data::scenes_from_synth;
    use crate::pipeline::{load_checkpoint, pretrain};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            stage: 2,
            batch_size: 2,
            epochs: Some(1),
            train_size: 32,
            seed: 13,
            ..Default::default()
        }
    }

    fn tiny_scenes(n: usize) -> Vec<LabeledScene> {
        let config = SynthConfig { height: 48, width: 48, ..Default::default() };
        scenes_from_synth(&synth_corpus(&config, n, 77).unwrap())
    }

    fn stage1_checkpoint(dir: &Path) -> Checkpoint {
        let cfg = TrainConfig {
            stage: 1,
            batch_size: 2,
            epochs: Some(0),
            train_size: 32,
            grid_spacing: 55.0,
            ..Default::default()
        };
        let out = pretrain(&tiny_scenes(2), &cfg, dir, None).unwrap();
        load_checkpoint(&out.checkpoint).unwrap()
    }

    #[test]
    fn finetune_transfers_the_frontend_and_rejects_stage2_checkpoints() {
        let s1_dir = tempfile::tempdir().unwrap();
        let ck = stage1_checkpoint(s1_dir.path());
        let out_dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = Some(0); // keep the initialization untouched
        let out = finetune(&ck, &tiny_scenes(3), &cfg, out_dir.path()).unwrap();
        assert!(out.metrics.is_empty());

        let trained = load_checkpoint(&out.checkpoint).unwrap();
        let w3 = trained.params.get(trained.params.id("count.front.c1.w").unwrap());
        let w1 = ck.params.get(ck.params.id("g.front.c1.w").unwrap());
        assert_eq!(w3.shape(), &[16, 3, 3, 3]);
        for c in 0..3 {
            for (i, &v) in w1.iter().enumerate() {
                let (co, kh, kw) = (i / 9, (i / 3) % 3, i % 3);
                assert_eq!(w3[[co, c, kh, kw]], v);
            }
        }
        // zero-initialized head means an identically-zero prediction
        let ref_img = tiny_scenes(1)[0].image.clone();
        let resized = crate::pipeline::resize_image(&ref_img, 32, 32).unwrap();
        let pred = count_forward(&trained.params, &resized).unwrap();
        assert_eq!(count_from_density(&pred), 0.0);

        // a stage-2 checkpoint is not a valid starting point
        let err = finetune(&trained, &tiny_scenes(3), &tiny_cfg(), out_dir.path()).unwrap_err();
        assert!(err.to_string().contains("stage"), "{err}");
    }

    #[test]
    fn scratch_training_updates_parameters_and_freezing_protects_the_frontend() {
        let scenes = tiny_scenes(4);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.learning_rate = Some(1e-3);
        let out = train_from_scratch(&scenes, &cfg, dir.path()).unwrap();
        assert_eq!(out.metrics.len(), 1);

        let mut fresh = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        add_counting_params(&mut fresh, &mut init, &IgcBlockSpec::default(), DEFAULT_IGC_BLOCKS)
            .unwrap();
        let trained = load_checkpoint(&out.checkpoint).unwrap();
        let changed = |prefix: &str, store: &ParamStore| {
            fresh.ids_by_name().any(|id| {
                let name = fresh.name(id);
                name.starts_with(prefix) && fresh.get(id) != store.get(store.id(name).unwrap())
            })
        };
        assert!(changed("count.front.", &trained.params));
        assert!(changed("count.igc", &trained.params));

        let frozen_dir = tempfile::tempdir().unwrap();
        cfg.freeze_frontend = true;
        let out2 = train_from_scratch(&scenes, &cfg, frozen_dir.path()).unwrap();
        let frozen = load_checkpoint(&out2.checkpoint).unwrap();
        assert!(!changed("count.front.", &frozen.params), "frozen frontend must stay fixed");
        assert!(changed("count.igc", &frozen.params));
    }

    #[test]
    fn training_is_deterministic_and_splits_validation() {
        let scenes = tiny_scenes(5);
        let mut cfg = tiny_cfg();
        cfg.epochs = Some(2);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train_from_scratch(&scenes, &cfg, d1.path()).unwrap();
        let b = train_from_scratch(&scenes, &cfg, d2.path()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics[0].val_mae.is_some(), "5 labeled images spare one for validation");
        assert!(a.checkpoint.ends_with("best.bin"));
    }

    #[test]
    fn tiny_sets_train_without_validation() {
        let scenes = tiny_scenes(2);
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let out = train_from_scratch(&scenes, &cfg, dir.path()).unwrap();
        assert!(out.metrics[0].val_mae.is_none());
        assert!(out.checkpoint.ends_with("checkpoint.bin"));
    }
}
