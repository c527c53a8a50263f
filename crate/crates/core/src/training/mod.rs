//! Optimiser, pre-training loop and frozen-feature evaluation.

mod config;
mod eval;
mod metrics;
mod optim;
mod pretrain;

pub use config::{LocalNegatives, TrainConfig, ABLATION_ROWS};
pub use eval::{
    embed_videos, eval_start, linear_probe, neighbours, recall_at_k, LabeledFeatures, ProbeConfig, ProbeResult,
};
pub use metrics::{MetricsLog, StepRecord, METRICS_HEADER};
pub use optim::{cosine_lr, Sgd, SgdConfig};
pub use pretrain::{encoder_from_checkpoint, initial_encoder, pretrain, pretrain_with, schedule_len, validate_corpus, PretrainOutcome};
