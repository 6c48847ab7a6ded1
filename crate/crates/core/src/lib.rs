//! Self-distillation as partial variance reduction: objectives, distillation
//! gradients, optimizers, compression, exact oracles and measurement tools.

pub mod compression;
pub mod data_io;
pub mod distillation;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod objectives;
pub mod optimizers;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod telemetry;
pub mod verify;

pub use compression::{compressed_kd_step, verify_compressor, CompressionStats, Compressor, CompressorKind};
pub use distillation::{
    distillation_grad, optimal_lambda, reduction_ratio, DistillationForm, KdConfig, OptimalLambda, TeacherStats,
};
pub use error::{Error, Result};
pub use linalg::ParamVector;
pub use objectives::{Dataset, ModelKind, ModelOutput, Objective, Targets};
pub use optimizers::{
    kd_step, run, run_observed, sgd_step, unbiased_kd_step, LambdaPolicy, Mode, RunOutput, RunSchedule, RunSetup,
    TeacherSource, TrainerState,
};
pub use oracle::{solve_linear_regression, ExactConstants};
pub use rng::Rng;
pub use sampling::{sample_minibatch, Minibatch, SamplingPolicy};
pub use telemetry::{EpochStats, GapStats};
