//! File formats, run configuration and the end-to-end pipeline behind the
//! command-line tool.

pub mod bench;
pub mod config;
pub mod gradcheck;
pub mod pipeline;
pub mod records;
pub mod synth;

pub use bench::{bench_files, bench_tensors, machine_spec, BenchReport};
pub use config::RunConfig;
pub use pipeline::{FrameOutput, Pipeline, StageTiming, DETECTION_CHANNELS};
