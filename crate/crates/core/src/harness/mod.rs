//! Training, evaluation and experiment orchestration.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod export;
pub mod model;
pub mod record;
pub mod rl;
pub mod train;

pub use ablation::{ablate, variant_config, GapReport, VARIANTS};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{Batch, Dataset};
pub use eval::{evaluate, Evaluation};
pub use export::{export_analysis, AnalysisKind};
pub use model::Model;
pub use record::{EpochLog, Phase, RunRecord};
pub use rl::rl_finetune;
pub use train::{pretrain, Outputs, Trainer};
