//! Training, evaluation and the ablation study.

mod ablation;
mod config;
mod model;
mod optim;
mod train;

pub use ablation::{median, run_ablation, AblationRow, AblationRun, AblationTable};
pub use config::{ConfigFile, RunConfig, Variant};
pub use model::{
    organ_phrase, prompt_tokens, prompt_vocabulary, step_loss, Forward, Model, ModelConfig,
    StepLoss, MULTI_ORGAN_PHRASE,
};
pub use optim::{adam_step, cosine_lr, default_lr_min, AdamConfig, AdamState};
pub use train::{
    append_metrics_csv, train, write_loss_csv, ClassMetric, MetricsReport, RunRecord, StepLog,
    TrainOutcome, Trained, CHECKPOINT_FILE, LOSS_FILE, METRICS_CSV_HEADER, RUN_FILE, VOCAB_FILE,
};
