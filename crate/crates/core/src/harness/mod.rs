//! Experiment harness: configuration, synthetic data, dataset I/O, the
//! end-to-end pipeline, ablations, the occupancy benchmark and proxy training.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use config::{BenchConfig, FeatureMode, GraphConfig, PipelineConfig, RunConfig, Scorer};
pub use dataset::{load_dataset, write_dataset, Dataset, Format};
pub use pipeline::{run_ablation, run_pipeline, AblationAxis, PipelineOutput, Report};
pub use synth::{generate_suite, generate_synthetic, Sample, Split, SuiteSpec, SyntheticSpec};
pub use train::{train_proxy, TrainConfig, TrainRun, TrainTask};
