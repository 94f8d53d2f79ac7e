//! Pre-training: meta-learning of the cascade, its multi-task ablation, and the
//! baseline procedures.

mod meta;
mod objective;
mod optim;
mod train;

pub use meta::{
    alignment_check, composed_meta_objective, inner_step, meta_gradient, outer_step, AlignmentCheck, MetaGradient,
    MetaMode, MetaSpec, OuterSettings, TRAIN_MODE,
};
pub use objective::{evaluate, objective_value, Evaluation, Loss, Objective};
pub use optim::{LrDecay, Optimizer, OptimizerKind};
pub use train::{pretrain, EpochRecord, PretrainConfig, PretrainMethod, PretrainReport};
