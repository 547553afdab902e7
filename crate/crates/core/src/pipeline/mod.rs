//! Configuration, data, the assembled model, training, checkpoints and evaluation.

pub mod checkpoint;
mod config;
mod data;
mod eval;
mod model;
mod train;

pub use config::{Ablation, ModelConfig, PromptSourceConfig, TrainConfig};
pub use data::*;
pub use model::{argmax_classes, organ_prompts, pooled_text, Head, ModelOutputs, PgSeg, Prediction, PROB_FLOOR};
pub use train::{stack_images, stack_labels, train, EpochLog, StepLog, Trainer, METRICS_LOG, SNAPSHOT_DIR};
pub use eval::{
    check_compatible, evaluate, guide_heatmap, infer, min_max_u8, read_png, write_png, write_reports, Predictor, REPORT_CSV,
    SUMMARY_JSON,
};
