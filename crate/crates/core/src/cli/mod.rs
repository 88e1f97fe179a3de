//! Experiment configuration and the end-to-end pipeline behind the `duvio`
//! command.

mod config;
mod pipeline;

pub use config::{
    parse_config, validate_config, DehazeSection, DisturbSection, EvalSection, ExperimentConfig, SyntheticSection,
};
pub use pipeline::{
    config_hash, read_predictions, resolve_seed, run_pipeline, write_predictions, HardwareRecord, ImageQuality,
    PipelineOutput, Provenance, StageTiming,
};
