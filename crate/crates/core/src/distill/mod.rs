//! Distillation objective and training loops.

mod aligned_mtl;
mod config;
mod losses;
mod targets;
mod train;

pub use aligned_mtl::{aligned_columns, aligned_mtl_aggregate, aligned_weights, alignment_matrix, Aggregated};
pub use config::{KdRegion, LossKind, LossSet, TrainConfig};
pub use losses::{label_predictions, loss_ce_hard, loss_kld, loss_label, loss_reg, LabelLoss, LabelTarget, RegLoss};
pub use targets::{PreparedTeacher, Targets};
pub use train::{
    finetune, finetune_step, frame_accuracy, kd_terms, metrics_csv, pretrain, pretrain_step, region_frames,
    utterance_at, KdTerm, LossComponent, LossReport,
};
