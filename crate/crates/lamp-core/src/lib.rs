//! Low-parameter prompt tuning: a soft prompt is factored by truncated SVD,
//! rebuilt as a sum of rank-1 outer products, optionally pooled, and trained
//! against a small frozen transformer.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod prompt;
pub mod svd;
pub mod tape;
pub mod task;
pub mod trainer;

pub use analysis::{cost_report, dispersion_stats, CostReport, DispersionStats};
pub use backbone::{BackboneConfig, FrozenBackbone};
pub use config::{run_experiment, ExperimentConfig};
pub use error::{LampError, Result};
pub use matrix::Matrix;
pub use optim::{OptimizerState, TrainConfig};
pub use prompt::{
    compressed_outer_product, decompose, lamp_param_count, reconstruct, vanilla_pt_param_count, DecomposedPrompt,
    PoolConfig, PoolMode, ReconstructionMode, SoftPrompt,
};
pub use svd::{svd, SvdResult};
pub use task::{LabelRule, SyntheticTask};
pub use trainer::{train_loop, MetricsLog};
