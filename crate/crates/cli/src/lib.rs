//! Command implementations behind the `salora` binary, exposed as a library
//! so the integration and acceptance suites can drive the full pipeline
//! in-process.

pub mod commands;
pub mod config;

pub use commands::{
    assemble_model, cmd_analyze, cmd_finetune, cmd_gen_world, cmd_infer, cmd_selftest,
    AnalyzeSummary, FinetuneSummary, GenWorldSummary, InferSummary, SelftestLine,
};
pub use config::{ExperimentConfig, Paths};
