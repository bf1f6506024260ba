//! Experiment orchestration: layered configuration, seeded stage
//! splitting, end-to-end runs, and the four-variant ablation grid.

pub mod config;
pub mod run;

pub use config::{
    config_hash, load_config, resolve_config, stage_seed, CliOverrides, CsvSource,
    DatasetSource, DecisionSection, ExperimentConfig, RobustnessSection, SimulatorSection,
    Variant, ENV_PREFIX,
};
pub use run::{
    ablate, build_dataset, effective_calibration_config, effective_decision_config,
    effective_sim_config, effective_synthetic_config, evaluate, evaluate_seed,
    policy_init_seed, run_pipeline, AblationOutput, EvaluationReport, RunManifest, RunOutput,
    StageError, StageTime, SweepSummary,
};
