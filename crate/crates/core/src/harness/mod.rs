//! Experiment orchestration: configs, run directories, training recipes,
//! generation and likelihood evaluation, sweeps, positional profiles, and
//! report emission.
//!
//! Every run is a pure function of its config and seed: streams are indexed
//! rather than stateful, metrics rows carry no wall-clock data, and rerunning
//! a config reproduces its outputs byte for byte.

mod config;
mod evals;
mod metrics;
mod profiles;
mod report;
mod sweeps;
mod train;

pub use config::{
    tau_slug, CheckpointSchedule, ExperimentConfig, LossKind, TaskSpec, OUTPUT_ROOT_ENV,
};
pub use evals::{
    eval_generation, eval_likelihood, eval_task_generation, gen_mc_instances, mc_choice_losses,
    GenEvalRow, McEval, TaskEval, EVAL_SEED_OFFSET,
};
pub use metrics::{
    output_root, read_metrics, MetricsRow, MetricsWriter, RunDir, METRICS_HEADER,
    METRICS_SCHEMA_VERSION,
};
pub use profiles::{
    analyze_profiles, autocorrelation, loss_profiles, profile_sequences, LossProfiles,
    ProfileReport,
};
pub use report::{
    block_sweep_csv, emit_report, gen_table_csv, mask_sweep_csv, write_block_sweep,
    write_gen_table, write_mask_sweep,
};
pub use sweeps::{
    mask_variant_label, sweep_block_sizes, sweep_masking, BlockSweepCell, MaskSweepRow,
};
pub use train::{geometric_schedule, resolve_stream, run_convert, run_pretrain_ar, TrainOutcome};
