//! Orchestration: configuration, synthetic data, the coarse-to-fine training
//! loop, inference, evaluation and the gradient-check suite.

mod config;
mod dataset;
mod eval;
mod gradcheck;
mod infer;
mod optim;
mod setup;
mod train;

pub use config::{DataConfig, HierarchyConfig, LossConfig, ModelConfig, RunConfig, TrainConfig};
pub use dataset::{prepare, read_dataset_file, render_plain, synth_dataset, write_dataset_file, Prepared, Sample};
pub use eval::{evaluate, EvalReport, EvalRow, Variant, REFERENCE_ROW};
pub use gradcheck::{gradcheck_suite, GradReport, GradRow, COMPONENTS};
pub use infer::{infer, infer_prepared, Inference};
pub use optim::Adam;
pub use setup::Setup;
pub use train::{
    checkpoint_params, generator_objective, is_generator, mean_pixel_loss, refine, render_prepared, train, train_step,
    Objective,
    StepLog, TrainData, TrainState, CRITIC_PREFIX, GENERATOR_PREFIXES,
};
