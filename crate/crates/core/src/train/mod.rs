//! Adversarial training loop, checkpoints, inference and ablation.

mod check;
mod checkpoint;
mod config;
mod model;
mod optim;
mod run;
mod trainer;

pub use check::{full_graph_check, ParamCheck, FULL_CHECK_JITTER, FULL_CHECK_MAX_ELEMENTS};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{parse_drop, MaskMode, TrainConfig};
pub use model::{masked_l1, prepare, sample_mask, Example, Frozen, GeneratorPass, Model, Networks};
pub use optim::{clip_grad_norm, AdamW};
pub use run::{
    ablate, checkpoint_name, eval_examples, evaluate_model, run_steps, train, Ablation, Inpainter,
    ModelEvaluation, TrainRun, CONFIG_FILE, FINAL_CHECKPOINT, LOSSES_CSV, TRAIN_LOG_CSV,
};
pub use trainer::{batch_indices, Phase, StepStats, Trainer, LOG_CSV_HEADER};
