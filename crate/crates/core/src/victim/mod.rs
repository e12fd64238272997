//! The victim encoder: contrastive training with an optional watermark
//! predictor, and a query-serving API with pluggable defenses.

mod serve;
mod train;

pub use serve::{
    input_hash, read_query_log, write_query_log, DefenseStep, Expose, QueryLogEntry, ServeConfig, VictimServer,
    DEFAULT_FLAGGED_NOISE,
};
pub use train::{
    train_supervised, train_victim, train_victim_watermarked, SupervisedConfig, SupervisedModel, VictimConfig,
    VictimModel,
};
