//! End-to-end training orchestration: configuration, dataset preparation,
//! checkpointing, colorization pretraining (stage 1) and density-map
//! fine-tuning (stage 2).

pub mod config;
pub mod checkpoint;
pub mod data;
pub mod stage1;
pub mod stage2;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorInfo};
pub use config::TrainConfig;
pub use stage1::{add_texture_params, pretrain, PretrainOutcome, ProbeLosses, StepLosses};
pub use stage2::{finetune, train_from_scratch, EpochMetrics, Stage2Outcome};
pub use data::{
    epoch_order, load_dataset, prepare_stage1, prepare_stage2, resize_image, sample_subset,
    save_dataset, scenes_from_synth, LabeledScene, Stage1Item, Stage2Item,
};
