//! Curriculum and standard training of small networks on parity targets over
//! a mixture of a biased and a uniform distribution on `{-1,1}^d`, with the
//! matching theory calculators.

// `!(x > 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod curriculum;
pub mod data;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod theory;

pub use curriculum::{
    run_algorithm1, run_curriculum_generic, run_one_step_hinge, run_standard, theorem2_hyperparams,
    CurriculumSchedule, DataSource, OneStepConfig, OneStepMode, OneStepSchedule, RunMetrics, StopRule,
    TestSet,
};
pub use data::{Dataset, MixtureParams, MonomialTarget, SignVector};
pub use error::{Error, Result};
pub use experiments::{
    reproduce_preset, run_matrix, summarize, ArchPreset, DataMode, ExperimentConfig, GroupField, Method, PresetName,
    RunRecord, Scale, TargetSpec,
};
pub use loss::LossKind;
pub use model::{Activation, AnyNet, GradientBundle, MlpNet, Network, TwoLayerNet};
pub use optimizer::{LearningRate, NoisySgdConfig, ParamMask};
pub use theory::{CpMethod, CpResult};
