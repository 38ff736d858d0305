//! Dual-branch training: projection heads shared by a contrastive branch and
//! an asymmetric-loss branch, AdamW with EMA and cosine annealing, and
//! leak-free proxy validation on held-out classes.

mod benchmark;
mod model;
mod optim;
mod proxy;
mod train;

pub use benchmark::{run_proxy_benchmark, ArmResult, BenchmarkConfig, BenchmarkReport};
pub use model::{forward, DualBranchModel, ForwardOutput, INITIAL_TEMPERATURE, PARAMETER_NAMES};
pub use optim::{adamw_step, cosine_lr, ema_update, scheduled_lr, AdamState, AdamW, TrainConfig};
pub use proxy::{
    build_proxy_split, default_proxy_folds, evaluate_proxy, shuffle_concat_descriptions, validate_folds, GroupResult,
    ProxyFoldSpec, ProxyGroup, ProxyReport, ProxySplit, DESCRIPTION_SEPARATOR, HELDOUT_PER_GROUP, NORMAL_STUDY,
    PROXY_LABEL_SPACE,
};
pub use train::{train, validation_map, EpochRecord, StepRecord, Trace, TrainOutput, TrainingSet, ValidationSet};
