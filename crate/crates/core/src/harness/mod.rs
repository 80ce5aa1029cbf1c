//! Backbone pretraining, prompt tuning, evaluation and multi-seed protocols.

pub mod config;
pub mod eval;
pub mod io;
pub mod model;
pub mod pretrain;
pub mod protocol;
pub mod train;

pub use config::{Components, EvalSpace, PretrainConfig, Theta, TrainConfig};
pub use eval::{evaluate, EvalOptions, EvalReport};
pub use model::TunedModel;
pub use pretrain::{pretrain_backbone, PretrainReport};
pub use protocol::{run_ablation, run_protocol, AblationResult, Arm, RunRecord, RunResult};
pub use train::{train_tpl, CheckpointRecord, TargetContext, TrainOutcome};
