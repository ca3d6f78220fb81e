//! Workloads, trace files and the experiment driver.

pub mod harness;
pub mod output;
pub mod synth;
pub mod trace;

pub use harness::{
    run_experiment, BatchResult, DecisionRow, ExperimentConfig, ExperimentOutput, LoadReset,
    Policy, PolicyRun, WeightScheme, Workload,
};
pub use output::{summarize, write_artifacts, PolicySummary, Summary};
pub use synth::{context_stream, generate_synthetic, Generator, GeneratorBand, SyntheticSpec};
pub use trace::{
    read_trace, write_records, write_trace, Phase, Trace, TraceHeader, TraceReader, TraceRecord,
    TraceWriter,
};

/// Yields the records of a trace file in file order.
pub fn replay_trace(
    path: impl AsRef<std::path::Path>,
) -> crate::Result<impl Iterator<Item = TraceRecord>> {
    Ok(read_trace(path)?.records.into_iter())
}
