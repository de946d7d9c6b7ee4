//! Run configuration, checkpoints, stage pipeline and CSV reports.

mod checkpoint;
mod config;
mod pipeline;
mod report;

pub use checkpoint::{
    checkpoint_exists, load_checkpoint, save_checkpoint, Checkpoint, Manifest, QuantizationInfo, ScaleEntry,
    TensorEntry,
};
pub use config::{sha256_hex, EvalConfig, GptqConfig, Method, RunConfig};
pub use pipeline::{
    anchor_name, AnchorDistance, DataSummary, Evaluation, LandscapeResult, LayerMse, MethodEval, Pipeline, QaftRecord,
    QuantizedModel, ReportKind, BASE_ANCHOR,
};
pub use report::{
    num, read_csv, write_csv, BASIN_HEADER, GPTQ_DAMP_HEADER, LANDSCAPE_HEADER, MISALIGNMENT_HEADER, QAFT_LR_HEADER,
    QAFT_TRACE_HEADER, TRADEOFF_HEADER,
};
