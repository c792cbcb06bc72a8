//! Experiment configuration, orchestration, metrics and plots.

pub mod checks;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod runner;

pub use config::{DataConfig, EvalConfig, ExperimentConfig, LoggingConfig, SurrogateConfig, SCHEMA_VERSION};
pub use eval::{evaluate, mean_shifted, DomainAccuracy, PromptMode, SOURCE_DOMAIN};
pub use metrics::{read_metrics, write_metrics, MetricsRecord};
pub use plot::{emit_plot, line_chart, Series};
pub use runner::{
    aggregate, evaluate_checkpoint, prepare, run_experiment, run_seed, run_variants, sweep, Aggregate, Prepared,
    RunSummary, SweepParam, SweepRow, Variant, VariantResult,
};
